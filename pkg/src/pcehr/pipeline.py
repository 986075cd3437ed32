"""Signal preprocessing: resampling, imputation, normalization, windowing,
FFT features, and discriminator pair sampling.

All transformations are pure functions on numpy arrays / small dataclasses;
missing samples are represented as NaN until imputation.  The full chain for
one subject is ``preprocess_subject``: impute -> resample to a shared rate ->
z-normalize sensors -> discretize into overlapping snippets -> group into
fixed-length segments.  HR stays in beats/minute throughout; normalizing it
with training-population statistics is the caller's job (the stats travel
with model checkpoints).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

HR_CHANNEL = "hr"
PPG_CHANNEL = "ppg"


@dataclass
class ChannelSeries:
    name: str
    rate_hz: float
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError(f"channel {self.name!r}: rate_hz must be positive, got {self.rate_hz}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.values) / self.rate_hz


@dataclass
class SubjectRecord:
    subject_id: str
    channels: list[ChannelSeries]
    dataset: str = ""

    def channel(self, name: str) -> ChannelSeries | None:
        for ch in self.channels:
            if ch.name == name:
                return ch
        return None

    def sensor_channels(self) -> list[ChannelSeries]:
        return [ch for ch in self.channels if ch.name != HR_CHANNEL]


@dataclass
class TimeSnippet:
    sensors: np.ndarray          # (n_sensors, ts_len), normalized samples
    mean_hr: float | None        # beats/minute over the window, None if no HR truth
    start_time: float            # seconds from series start
    ppg_fft: np.ndarray | None = None   # per-snippet normalized magnitude spectrum


@dataclass
class Segment:
    snippets: list[TimeSnippet]
    init_len: int
    subject_id: str
    segment_index: int

    @property
    def n_snippets(self) -> int:
        return len(self.snippets)

    def sensor_array(self) -> np.ndarray:
        """(n_snippets, n_sensors, ts_len) stack."""
        return np.stack([s.sensors for s in self.snippets])

    def hr_array(self) -> np.ndarray:
        return np.array([np.nan if s.mean_hr is None else s.mean_hr for s in self.snippets])

    def fft_array(self) -> np.ndarray:
        return np.stack([s.ppg_fft for s in self.snippets])


# ---------------------------------------------------------------------------
# resampling and imputation


def resample(series: ChannelSeries, target_hz: float) -> ChannelSeries:
    """Rate conversion preserving duration to within one output tick.

    Upsampling: linear interpolation on the original time grid (edge values
    held beyond the last source sample).  Downsampling: mean over each output
    tick's covering window of source samples, which also anti-aliases.
    """
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    values = series.values
    if len(values) == 0:
        raise ValueError(f"channel {series.name!r} is empty")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"channel {series.name!r} has missing values; impute before resampling")
    rate = series.rate_hz
    if math.isclose(rate, target_hz):
        out = values.copy()
    elif target_hz > rate:
        n_out = int(round(len(values) * target_hz / rate))
        t_out = np.arange(n_out) / target_hz
        t_in = np.arange(len(values)) / rate
        out = np.interp(t_out, t_in, values)
    else:
        ratio = rate / target_hz
        n_out = int(len(values) * target_hz // rate)
        if n_out == 0:
            raise ValueError(f"channel {series.name!r} too short to emit one sample at {target_hz} Hz")
        bounds = np.ceil(np.arange(n_out + 1) * ratio).astype(np.int64)
        bounds = np.minimum(bounds, len(values))
        sums = np.add.reduceat(values, bounds[:-1])
        # reduceat over the trailing block includes everything to the end;
        # trim by subtracting samples past the last boundary
        if bounds[-1] < len(values):
            sums[-1] -= values[bounds[-1] :].sum()
        counts = np.diff(bounds)
        out = sums / counts
    return ChannelSeries(series.name, target_hz, out, series.units)


def interpolate_missing_linear(values: np.ndarray) -> np.ndarray:
    """Fill NaN runs by linear interpolation between present neighbors; edge
    runs are held at the nearest present value.  Used for sparse HR grids."""
    values = np.asarray(values, dtype=np.float64)
    present = np.isfinite(values)
    if present.all():
        return values.copy()
    if not present.any():
        raise ValueError("cannot interpolate a fully-missing series")
    idx = np.arange(len(values))
    return np.interp(idx, idx[present], values[present])


def impute_local_average(series: ChannelSeries, window_s: float = 0.4) -> ChannelSeries:
    """Replace each NaN with the mean of present samples within +-window_s/2.

    A window containing no present sample widens to the nearest present
    neighbors on each side; a Python warning carries the widened count.
    """
    values = series.values
    present = np.isfinite(values)
    if present.all():
        return ChannelSeries(series.name, series.rate_hz, values.copy(), series.units)
    if not present.any():
        raise ValueError(f"channel {series.name!r} is fully missing")
    radius = max(1, int(round(window_s / 2.0 * series.rate_hz)))
    out = values.copy()
    missing_idx = np.flatnonzero(~present)

    filled = np.where(present, values, 0.0)
    csum = np.concatenate([[0.0], np.cumsum(filled)])
    ccount = np.concatenate([[0], np.cumsum(present.astype(np.int64))])
    lo = np.maximum(missing_idx - radius, 0)
    hi = np.minimum(missing_idx + radius + 1, len(values))
    window_sums = csum[hi] - csum[lo]
    window_counts = ccount[hi] - ccount[lo]

    ok = window_counts > 0
    out[missing_idx[ok]] = window_sums[ok] / window_counts[ok]

    widened = missing_idx[~ok]
    if len(widened):
        present_idx = np.flatnonzero(present)
        pos = np.searchsorted(present_idx, widened)
        for i, p in zip(widened, pos):
            neighbors = []
            if p > 0:
                neighbors.append(values[present_idx[p - 1]])
            if p < len(present_idx):
                neighbors.append(values[present_idx[p]])
            out[i] = float(np.mean(neighbors))
        warnings.warn(
            f"channel {series.name!r}: {len(widened)} missing samples had no present "
            f"neighbor within +-{window_s / 2:.2f}s; widened to nearest values"
        )
    return ChannelSeries(series.name, series.rate_hz, out, series.units)


# ---------------------------------------------------------------------------
# normalization


def znorm(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Zero-mean unit-variance scaling with population std.

    Degenerate channels (std < 1e-8) map to all zeros with std recorded as 1
    so de-normalization reproduces the constant.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    std = float(values.std())
    if std < 1e-8:
        return np.zeros_like(values), mean, 1.0
    return (values - mean) / std, mean, std


def denorm(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    return np.asarray(values) * std + mean


# ---------------------------------------------------------------------------
# windowing


def discretize(
    sensors: np.ndarray,
    hr: np.ndarray | None,
    rate_hz: float,
    tau_s: float,
    overlap: float,
    ppg_row: int | None = None,
) -> list[TimeSnippet]:
    """Cut (n_sensors, n_samples) into windows of tau_s seconds advancing by
    tau_s*(1-overlap); each snippet also carries the mean HR over its window
    and, when ppg_row names a sensor row, that row's magnitude spectrum."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap ratio must be in [0, 1), got {overlap}")
    sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
    n = sensors.shape[1]
    ts_len = tau_s * rate_hz
    if abs(ts_len - round(ts_len)) > 1e-9:
        raise ValueError(f"tau_s*rate_hz must be an integer sample count, got {ts_len}")
    ts_len = int(round(ts_len))
    duration = n / rate_hz
    if duration < tau_s:
        warnings.warn(f"series of {duration:.1f}s shorter than one {tau_s:.0f}s window; no snippets")
        return []
    stride_s = tau_s * (1.0 - overlap)
    count = int(math.floor((duration - tau_s) / stride_s + 1e-9)) + 1
    snippets = []
    for k in range(count):
        start_t = k * stride_s
        start = int(round(start_t * rate_hz))
        window = sensors[:, start : start + ts_len]
        mean_hr = None
        if hr is not None:
            mean_hr = float(np.mean(hr[start : start + ts_len]))
        fft_feat = None
        if ppg_row is not None:
            fft_feat = fft_magnitude(window[ppg_row])
        snippets.append(TimeSnippet(window, mean_hr, start_t, fft_feat))
    return snippets


def segment(snippets: list[TimeSnippet], n_snippets: int = 50, init_len: int = 12, subject_id: str = "") -> list[Segment]:
    """Group consecutive snippets into non-overlapping blocks of n_snippets;
    the trailing remainder is dropped.  First init_len snippets of each block
    are the initialization part, the rest the prediction part."""
    if not n_snippets > init_len >= 1:
        raise ValueError(f"need n_snippets > init_len >= 1, got {n_snippets}, {init_len}")
    n_full = len(snippets) // n_snippets
    if n_full == 0:
        warnings.warn(f"subject {subject_id!r}: {len(snippets)} snippets < segment length {n_snippets}; excluded")
        return []
    return [
        Segment(snippets[i * n_snippets : (i + 1) * n_snippets], init_len, subject_id, i)
        for i in range(n_full)
    ]


# ---------------------------------------------------------------------------
# FFT features


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative in-place decimation-in-time FFT for power-of-two lengths."""
    n = len(x)
    data = np.asarray(x, dtype=np.complex128).copy()
    # bit-reversal permutation
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            data[i], data[j] = data[j], data[i]
    size = 2
    while size <= n:
        half = size // 2
        step = np.exp(-2j * np.pi * np.arange(half) / size)
        for start in range(0, n, size):
            upper = data[start : start + half].copy()
            lower = data[start + half : start + size] * step
            data[start : start + half] = upper + lower
            data[start + half : start + size] = upper - lower
        size *= 2
    return data


def fft_complex(x: np.ndarray) -> np.ndarray:
    """Full complex spectrum of a power-of-two-length real sequence."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 2 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two >= 2, got {n}")
    return _fft_radix2(x)


def fft_magnitude(x: np.ndarray) -> np.ndarray:
    """Magnitudes at positive-frequency bins 1..L/2 (DC dropped), then
    z-normalized; a flat spectrum (e.g. constant input) maps to zeros."""
    spectrum = fft_complex(x)
    mags = np.abs(spectrum[1 : len(x) // 2 + 1])
    normalized, _, _ = znorm(mags)
    return normalized


# ---------------------------------------------------------------------------
# discriminator pair sampling


def sample_discriminator_pairs(segments_by_subject: dict, rng: np.random.Generator) -> list[tuple]:
    """One partner per training segment: same-subject with probability 0.5
    (uniform over the subject's other segments, itself if there are none),
    otherwise uniform over all other subjects' segments.  Label 1 iff same
    subject.  Deterministic for a fixed rng state."""
    subjects = sorted(segments_by_subject)
    if not subjects:
        return []
    single_subject = len(subjects) == 1
    if single_subject:
        warnings.warn("single-subject training set: all discriminator pairs share the subject")
    pairs = []
    for subject in subjects:
        own = segments_by_subject[subject]
        others = [seg for s in subjects if s != subject for seg in segments_by_subject[s]]
        for idx, seg in enumerate(own):
            same_branch = single_subject or rng.random() < 0.5
            if same_branch:
                candidates = own[:idx] + own[idx + 1 :]
                partner = seg if not candidates else candidates[rng.integers(len(candidates))]
                pairs.append((seg, partner, 1))
            else:
                partner = others[rng.integers(len(others))]
                pairs.append((seg, partner, 0))
    return pairs


# ---------------------------------------------------------------------------
# end-to-end per-subject preprocessing


@dataclass
class SubjectSegments:
    """Preprocessed output for one subject: segments plus the channel layout
    and the per-channel normalization statistics used."""

    subject_id: str
    channel_names: list[str]
    segments: list[Segment]
    channel_stats: list[tuple[float, float]] = field(default_factory=list)
    rate_hz: float = 32.0


def preprocess_subject(
    record: SubjectRecord,
    rate_hz: float = 32.0,
    tau_s: float = 4.0,
    overlap: float = 0.5,
    n_snippets: int = 50,
    init_len: int = 12,
    with_ppg_fft: bool = False,
) -> SubjectSegments:
    """Impute -> resample to rate_hz -> z-normalize sensors per subject ->
    discretize -> segment.  HR is linearly interpolated over its grid, then
    resampled, and stays in beats/minute."""
    sensor_list = record.sensor_channels()
    if not sensor_list:
        raise ValueError(f"subject {record.subject_id!r} has no sensor channels")
    resampled = []
    for ch in sensor_list:
        if not np.all(np.isfinite(ch.values)):
            ch = impute_local_average(ch)
        resampled.append(resample(ch, rate_hz))
    hr_ch = record.channel(HR_CHANNEL)
    hr_values = None
    if hr_ch is not None:
        hr_clean = ChannelSeries(HR_CHANNEL, hr_ch.rate_hz, interpolate_missing_linear(hr_ch.values), hr_ch.units)
        hr_values = resample(hr_clean, rate_hz).values

    n = min(len(ch.values) for ch in resampled)
    if hr_values is not None:
        n = min(n, len(hr_values))
        hr_values = hr_values[:n]
    names = [ch.name for ch in resampled]
    stats = []
    rows = []
    for ch in resampled:
        normalized, mean, std = znorm(ch.values[:n])
        stats.append((mean, std))
        rows.append(normalized)
    sensors = np.stack(rows)

    ppg_row = names.index(PPG_CHANNEL) if (with_ppg_fft and PPG_CHANNEL in names) else None
    if with_ppg_fft and ppg_row is None:
        raise ValueError(f"subject {record.subject_id!r} has no {PPG_CHANNEL!r} channel for the FFT branch")
    snippets = discretize(sensors, hr_values, rate_hz, tau_s, overlap, ppg_row=ppg_row)
    segments = segment(snippets, n_snippets, init_len, record.subject_id)
    return SubjectSegments(record.subject_id, names, segments, stats, rate_hz)


def hr_population_stats(segment_lists: list[list[Segment]]) -> tuple[float, float]:
    """Mean/std of snippet HR over a training population, for normalizing the
    HR values fed to models and de-normalizing predictions."""
    values = [
        s.mean_hr
        for segments in segment_lists
        for seg in segments
        for s in seg.snippets
        if s.mean_hr is not None
    ]
    if not values:
        raise ValueError("no HR truth available to compute population statistics")
    arr = np.asarray(values)
    std = float(arr.std())
    return float(arr.mean()), (std if std >= 1e-8 else 1.0)
