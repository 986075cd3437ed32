"""Heart-rate extraction from single-lead ECG.

Pipeline: bandpass to the QRS band, square, moving-window integration,
then peak picking against an adaptive threshold (a fraction of the local
2 s energy maximum, floored by a global noise estimate).  Instantaneous
rates from R-R intervals are averaged over sliding windows; windows with
too few plausible beats come back as NaN.  This is a simplified stand-in
for a full clinical QRS detector and is oracle-tested on synthetic pulse
trains rather than annotated recordings.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage, signal

HR_MIN_BPM = 30.0
HR_MAX_BPM = 220.0
# a window needs this many plausible R-R intervals before its mean counts
MIN_INTERVALS = 3
# and their spread must look like a heartbeat, not scattered noise hits
RATE_CV_MAX = 0.2


def bandpass_filter(ecg: np.ndarray, fs: float, low: float = 5.0, high: float = 15.0) -> np.ndarray:
    """Zero-phase Butterworth bandpass over the QRS energy band."""
    sos = signal.butter(3, [low, high], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(ecg, dtype=float))


def detect_r_peaks(ecg: np.ndarray, fs: float) -> np.ndarray:
    """R-peak sample indices via an adaptive energy threshold.

    A peak must clear 40% of the largest integrated energy within 2 s
    around it, with a 250 ms refractory between accepted peaks.  Noise can
    still produce spurious peaks here; downstream windowing rejects them
    by the dispersion of the resulting intervals.
    """
    ecg = np.asarray(ecg, dtype=float).ravel()
    if len(ecg) < int(fs):
        return np.array([], dtype=int)
    energy = bandpass_filter(ecg, fs) ** 2
    width = max(1, int(round(0.15 * fs)))
    integrated = np.convolve(energy, np.ones(width) / width, mode="same")
    local_max = ndimage.maximum_filter1d(integrated, size=max(1, int(round(2.0 * fs))))
    peaks, _ = signal.find_peaks(integrated, height=0.4 * local_max, distance=int(round(0.25 * fs)))
    return peaks


def hr_series(ecg: np.ndarray, fs: float, window_s: float = 8.0, shift_s: float = 2.0) -> np.ndarray:
    """Windowed mean heart rate in beats/minute.

    Window k spans [k*shift_s, k*shift_s + window_s]; its value is the mean
    of the instantaneous rates (60/RR) whose interval midpoints fall inside,
    after discarding rates outside [30, 220].  A window is NaN when fewer
    than MIN_INTERVALS survive or when their coefficient of variation
    exceeds RATE_CV_MAX (scattered noise hits rather than a rhythm), so
    every finite output is within physiological bounds by construction.
    """
    duration_s = len(np.asarray(ecg).ravel()) / fs
    if duration_s < window_s:
        return np.array([])
    n_windows = int(np.floor((duration_s - window_s) / shift_s + 1e-9)) + 1
    peaks = detect_r_peaks(ecg, fs)
    times = peaks / fs
    out = np.full(n_windows, np.nan)
    if len(times) < 2:
        return out
    rates = 60.0 / np.diff(times)
    mids = (times[:-1] + times[1:]) / 2.0
    ok = (rates >= HR_MIN_BPM) & (rates <= HR_MAX_BPM)
    rates, mids = rates[ok], mids[ok]
    for k in range(n_windows):
        start = k * shift_s
        chosen = rates[(mids >= start) & (mids < start + window_s)]
        if len(chosen) >= MIN_INTERVALS and np.std(chosen) <= RATE_CV_MAX * np.mean(chosen):
            out[k] = float(np.mean(chosen))
    return out
