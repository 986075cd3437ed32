"""Archive converters: PPG-DaLiA and WESAD native pickles to the canonical
CSV+manifest layout.

Both archives store one pickle per subject (``S<n>/S<n>.pkl``) holding a
chest device sampled at 700 Hz and a wrist device with 32 Hz acceleration
and a 64 Hz optical pulse channel.  PPG-DaLiA ships ground-truth heart rate
computed over 8 s windows shifted by 2 s; for WESAD the same quantity is
derived here from the chest ECG.  Heart rate lands on a 0.5 Hz grid spanning
the recording, each window's value placed at its center time, so all of a
subject's files describe the same span and the window timing is recorded in
the manifest.
"""

from __future__ import annotations

import pickle
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .canonical import Channel, write_dataset
from .ecg import hr_series

CHEST_RATE_HZ = 700.0
WRIST_ACC_RATE_HZ = 32.0
PPG_RATE_HZ = 64.0
HR_RATE_HZ = 0.5
HR_WINDOW_S = 8.0
HR_SHIFT_S = 2.0

DALIA_SUBJECT_IDS = tuple(f"S{i}" for i in range(1, 16))
# the published set has no subjects 1 and 12
WESAD_SUBJECT_IDS = tuple(f"S{i}" for i in (*range(2, 12), *range(13, 18)))


class ConversionError(Exception):
    """Nothing convertible under the source directory."""


class SubjectSkip(Exception):
    """Subject cannot be converted; carries the reason for the warning."""


@dataclass
class ConversionReport:
    subjects: list[str] = field(default_factory=list)
    channels: dict[str, list[str]] = field(default_factory=dict)
    sample_counts: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        warnings.warn(message)


def _subject_number(subject_id: str) -> int:
    match = re.fullmatch(r"S(\d+)", subject_id)
    return int(match.group(1)) if match else -1


def discover_subjects(src) -> list[tuple[str, Path]]:
    """(subject_id, pickle path) pairs found under ``src``, numerically sorted.

    Accepts both the unpacked archive root (``S2/S2.pkl``) and a flat
    directory of pickles (``S2.pkl``).
    """
    src = Path(src)
    found = {}
    for path in list(src.glob("S*/S*.pkl")) + list(src.glob("S*.pkl")):
        sid = path.stem
        if _subject_number(sid) > 0 and sid not in found:
            found[sid] = path
    return sorted(found.items(), key=lambda item: _subject_number(item[0]))


def _load_pickle(path: Path) -> dict:
    # both archives were produced under python 2; latin-1 keeps byte strings readable
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _device_array(data: dict, device: str, channel: str) -> np.ndarray:
    signals = data.get("signal", {})
    if device not in signals:
        raise SubjectSkip(f"missing {device} device")
    if channel not in signals[device]:
        raise SubjectSkip(f"missing {device}/{channel} channel")
    return np.asarray(signals[device][channel], dtype=float)


def _sensor_channels(data: dict, include_ppg: bool) -> tuple[list[Channel], float]:
    """Trimmed sensor channels plus the common duration they span.

    All channels are cut to the shortest device's span so every emitted file
    describes the same time range within one sample tick.
    """
    chest = _device_array(data, "chest", "ACC").reshape(-1, 3)
    wrist = _device_array(data, "wrist", "ACC").reshape(-1, 3)
    parts = [(chest, CHEST_RATE_HZ), (wrist, WRIST_ACC_RATE_HZ)]
    if include_ppg:
        ppg = _device_array(data, "wrist", "BVP").reshape(-1)
        parts.append((ppg.reshape(-1, 1), PPG_RATE_HZ))
    duration = min(len(arr) / rate for arr, rate in parts)
    channels = []
    for (arr, rate), prefix in zip(parts, ("chest_acc", "wrist_acc", "wrist_ppg")):
        n = int(np.floor(duration * rate + 1e-9))
        arr = arr[:n]
        if arr.shape[1] == 1:
            channels.append(Channel(prefix, rate, arr[:, 0]))
        else:
            for axis, label in enumerate("xyz"):
                channels.append(Channel(f"{prefix}_{label}", rate, arr[:, axis]))
    return channels, duration


def _hr_channel(hr_windows: np.ndarray, duration_s: float, report: ConversionReport, subject_id: str) -> Channel:
    """Heart-rate windows placed on a 0.5 Hz grid spanning the recording.

    Window k covers [k*2, k*2+8] s, so its value sits at grid index k+2
    (center time 2k+4); leading/trailing grid points with no window are NaN.
    """
    n_grid = int(np.floor(duration_s * HR_RATE_HZ + 1e-9))
    expected = int(np.floor((duration_s - HR_WINDOW_S) / HR_SHIFT_S + 1e-9)) + 1 if duration_s >= HR_WINDOW_S else 0
    if len(hr_windows) != expected:
        report.warn(
            f"{subject_id}: {len(hr_windows)} heart-rate windows but the sensor span "
            f"({duration_s:.1f}s) fits {expected}; extra values are dropped"
        )
    grid = np.full(n_grid, np.nan)
    offset = int(round(HR_WINDOW_S / (2 * HR_SHIFT_S)))
    for k, value in enumerate(hr_windows):
        idx = k + offset
        if 0 <= idx < n_grid:
            grid[idx] = value
    meta = {"hr_window": {"window_s": HR_WINDOW_S, "shift_s": HR_SHIFT_S, "alignment": "window-center"}}
    return Channel("hr", HR_RATE_HZ, grid, units="bpm", file_meta=meta)


def _convert(src, dst, dataset_tag: str, subject_ids: tuple[str, ...], extract_hr, include_ppg: bool) -> ConversionReport:
    report = ConversionReport()
    records = []
    for sid, path in discover_subjects(src):
        if sid not in subject_ids:
            report.warn(f"{sid}: not part of the {dataset_tag} subject set, ignored")
            continue
        try:
            data = _load_pickle(path)
        except Exception as exc:
            report.warn(f"{sid}: unreadable archive ({exc}), skipped")
            continue
        try:
            channels, duration = _sensor_channels(data, include_ppg)
            hr_windows = extract_hr(data)
        except SubjectSkip as exc:
            report.warn(f"{sid}: {exc}, skipped")
            continue
        channels.append(_hr_channel(np.asarray(hr_windows, dtype=float).ravel(), duration, report, sid))
        records.append((sid, channels))
        report.subjects.append(sid)
        report.channels[sid] = [ch.name for ch in channels]
        report.sample_counts[sid] = int(sum(len(ch.values) for ch in channels))
    if not records:
        raise ConversionError(f"no convertible subjects found under {src}")
    write_dataset(dst, records, dataset_tag)
    return report


def convert_ppg_dalia(src, dst, include_ppg: bool = True) -> ConversionReport:
    """Convert an unpacked PPG-DaLiA archive; ground-truth HR is taken from
    the shipped labels.  ``include_ppg=False`` produces the accelerometer-only
    variant of the dataset."""

    def extract_hr(data: dict) -> np.ndarray:
        if "label" not in data:
            raise SubjectSkip("missing heart-rate labels")
        return np.asarray(data["label"], dtype=float)

    tag = "ppg-dalia" if include_ppg else "dalia"
    return _convert(src, dst, tag, DALIA_SUBJECT_IDS, extract_hr, include_ppg)


def convert_wesad(src, dst) -> ConversionReport:
    """Convert an unpacked WESAD archive; ground-truth HR is derived from the
    chest ECG (subjects S1 and S12 do not exist in the published set)."""

    def extract_hr(data: dict) -> np.ndarray:
        ecg = _device_array(data, "chest", "ECG").reshape(-1)
        return hr_series(ecg, CHEST_RATE_HZ, HR_WINDOW_S, HR_SHIFT_S)

    return _convert(src, dst, "wesad", WESAD_SUBJECT_IDS, extract_hr, include_ppg=True)
