"""Dataset serialization: the canonical CSV+manifest format, the PAMAP2
native-text loader, and the preprocessed segment cache.

Canonical layout: a root directory holding ``manifest.json`` plus one CSV
per subject per sample rate.  The manifest declares, for every file, its
rate and ordered channel list; CSV headers must match exactly.  Missing
samples are empty CSV fields.  The environment variable PCEHR_DATA_DIR
names the default dataset root for the command-line tools.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from pathlib import Path

import numpy as np

from .pipeline import ChannelSeries, Segment, SubjectRecord, SubjectSegments, TimeSnippet

CANONICAL_FORMAT = "pcehr-canonical-v1"
DATA_DIR_ENV = "PCEHR_DATA_DIR"


class DatasetError(ValueError):
    """Manifest/CSV inconsistency or unreadable native file."""


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


# ---------------------------------------------------------------------------
# canonical format


def _format_value(v: float) -> str:
    if math.isnan(v):
        return ""
    return format(v, ".9g")


def write_canonical(root, records: list[SubjectRecord], dataset_tag: str = "") -> Path:
    """Write records grouped by (subject, rate); returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": CANONICAL_FORMAT, "dataset": dataset_tag, "subjects": {}}
    for record in records:
        by_rate: dict[float, list[ChannelSeries]] = {}
        for ch in record.channels:
            by_rate.setdefault(ch.rate_hz, []).append(ch)
        files = []
        for rate, channels in sorted(by_rate.items()):
            rate_name = format(rate, "g").replace(".", "p")
            path = f"{record.subject_id}_{rate_name}hz.csv"
            names = [ch.name for ch in channels]
            n = max(len(ch.values) for ch in channels)
            with open(root / path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(names)
                for i in range(n):
                    writer.writerow(
                        [_format_value(ch.values[i]) if i < len(ch.values) else "" for ch in channels]
                    )
            entry = {"path": path, "rate_hz": rate, "channels": names}
            units = {ch.name: ch.units for ch in channels if ch.units}
            if units:
                entry["units"] = units
            files.append(entry)
        manifest["subjects"][record.subject_id] = {"files": files}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def _read_csv_columns(path: Path, expected_channels: list[str]) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty CSV")
        if header != expected_channels:
            raise DatasetError(f"{path}: header {header} does not match manifest channels {expected_channels}")
        columns = [[] for _ in header]
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"{path}:{row_no}: expected {len(header)} fields, got {len(row)}")
            for col, field in zip(columns, row):
                if field == "":
                    col.append(np.nan)
                else:
                    try:
                        col.append(float(field))
                    except ValueError as exc:
                        raise DatasetError(f"{path}:{row_no}: non-numeric field {field!r}") from exc
    return {name: np.asarray(col) for name, col in zip(header, columns)}


def validate_canonical(root) -> dict:
    """Hard-fails on any manifest/CSV inconsistency; returns a summary."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != CANONICAL_FORMAT:
        raise DatasetError(f"{manifest_path}: format {manifest.get('format')!r} != {CANONICAL_FORMAT!r}")
    subjects = manifest.get("subjects")
    if not isinstance(subjects, dict) or not subjects:
        raise DatasetError(f"{manifest_path}: no subjects declared")
    n_files = 0
    n_samples = 0
    for subject_id, entry in subjects.items():
        durations = []
        for file_entry in entry.get("files", []):
            for key in ("path", "rate_hz", "channels"):
                if key not in file_entry:
                    raise DatasetError(f"{manifest_path}: subject {subject_id}: file entry missing {key!r}")
            rate = file_entry["rate_hz"]
            if not rate > 0:
                raise DatasetError(f"{manifest_path}: subject {subject_id}: rate_hz must be positive")
            path = root / file_entry["path"]
            if not path.exists():
                raise DatasetError(f"subject {subject_id}: declared file {path} does not exist")
            columns = _read_csv_columns(path, list(file_entry["channels"]))
            n = len(next(iter(columns.values()))) if columns else 0
            durations.append((n / rate, 1.0 / rate, path))
            n_files += 1
            n_samples += n * len(columns)
        if len(durations) > 1:
            # every file of a subject must describe the same time span,
            # up to one tick of the coarser rate
            base_dur = durations[0][0]
            for dur, tick, path in durations[1:]:
                tol = max(tick, durations[0][1])
                if abs(dur - base_dur) > tol + 1e-9:
                    raise DatasetError(
                        f"subject {subject_id}: {path} spans {dur:.3f}s but sibling file spans "
                        f"{base_dur:.3f}s (tolerance one tick = {tol:.3f}s)"
                    )
    return {"subjects": len(subjects), "files": n_files, "samples": n_samples}


def read_canonical(root) -> list[SubjectRecord]:
    """Load a validated canonical dataset into SubjectRecords."""
    root = Path(root)
    validate_canonical(root)
    manifest = json.loads((root / "manifest.json").read_text())
    records = []
    for subject_id in sorted(manifest["subjects"]):
        channels = []
        for file_entry in manifest["subjects"][subject_id]["files"]:
            columns = _read_csv_columns(root / file_entry["path"], list(file_entry["channels"]))
            units = file_entry.get("units", {})
            for name in file_entry["channels"]:
                channels.append(ChannelSeries(name, file_entry["rate_hz"], columns[name], units.get(name, "")))
        records.append(SubjectRecord(subject_id, channels, manifest.get("dataset", "")))
    return records


# ---------------------------------------------------------------------------
# PAMAP2 native layout

PAMAP2_COLUMNS = 54
PAMAP2_RATE_HZ = 100.0
# column index -> channel name; each IMU block is temperature, two 3D
# accelerometers, gyro, magnetometer, orientation; only the accelerometers
# of the hand (wrist) and chest devices are kept
PAMAP2_CHANNEL_COLUMNS = {
    "wrist_acc16_x": 4, "wrist_acc16_y": 5, "wrist_acc16_z": 6,
    "wrist_acc6_x": 7, "wrist_acc6_y": 8, "wrist_acc6_z": 9,
    "chest_acc16_x": 21, "chest_acc16_y": 22, "chest_acc16_z": 23,
    "chest_acc6_x": 24, "chest_acc6_y": 25, "chest_acc6_z": 26,
}
PAMAP2_HR_COLUMN = 2


def load_pamap2(path) -> list[SubjectRecord]:
    """Load per-subject whitespace-separated text files.

    Keeps both wrist and both chest accelerometer triples (12 channels at
    100 Hz) plus HR on the same grid with NaN where absent.  Rows that do
    not parse are skipped with a warning count; a file whose structure is
    mostly broken (over half the rows malformed) is rejected with a warning.
    """
    path = Path(path)
    files = sorted(path.glob("subject*.dat"))
    if not files:
        raise DatasetError(f"no subject*.dat files under {path}")
    records = []
    for file_path in files:
        rows = []
        bad = 0
        total = 0
        with open(file_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                total += 1
                fields = line.split()
                if len(fields) != PAMAP2_COLUMNS:
                    bad += 1
                    continue
                try:
                    rows.append([float(f) for f in fields])
                except ValueError:
                    bad += 1
        if total == 0 or bad > total // 2:
            warnings.warn(f"{file_path}: rejected ({bad}/{total} malformed rows)")
            continue
        if bad:
            warnings.warn(f"{file_path}: skipped {bad} malformed rows")
        data = np.asarray(rows)
        subject_id = file_path.stem
        channels = [
            ChannelSeries(name, PAMAP2_RATE_HZ, data[:, col], "m/s^2")
            for name, col in PAMAP2_CHANNEL_COLUMNS.items()
        ]
        channels.append(ChannelSeries("hr", PAMAP2_RATE_HZ, data[:, PAMAP2_HR_COLUMN], "bpm"))
        records.append(SubjectRecord(subject_id, channels, "pamap2"))
    return records


# ---------------------------------------------------------------------------
# preprocessed segment cache


def save_segment_cache(cache_dir, subject: SubjectSegments):
    """One compressed npz per subject holding all segment arrays."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if not subject.segments:
        raise ValueError(f"subject {subject.subject_id!r} has no segments to cache")
    sensors = np.stack([seg.sensor_array() for seg in subject.segments])
    hr = np.stack([seg.hr_array() for seg in subject.segments])
    starts = np.stack([[s.start_time for s in seg.snippets] for seg in subject.segments])
    arrays = {
        "sensors": sensors.astype(np.float32),
        "hr": hr,
        "start_times": starts,
        "init_len": np.array(subject.segments[0].init_len),
        "rate_hz": np.array(subject.rate_hz),
        "channel_stats": np.asarray(subject.channel_stats, dtype=np.float64),
    }
    if subject.segments[0].snippets[0].ppg_fft is not None:
        arrays["ppg_fft"] = np.stack([seg.fft_array() for seg in subject.segments]).astype(np.float32)
    meta = json.dumps({"subject_id": subject.subject_id, "channel_names": subject.channel_names})
    np.savez_compressed(cache_dir / f"{subject.subject_id}.npz", meta=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_segment_cache(cache_dir) -> list[SubjectSegments]:
    cache_dir = Path(cache_dir)
    results = []
    for npz_path in sorted(cache_dir.glob("*.npz")):
        with np.load(npz_path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            sensors = data["sensors"].astype(np.float64)
            hr = data["hr"]
            starts = data["start_times"]
            init_len = int(data["init_len"])
            rate = float(data["rate_hz"])
            stats = [tuple(row) for row in data["channel_stats"]]
            fft = data["ppg_fft"].astype(np.float64) if "ppg_fft" in data else None
        segments = []
        for s in range(sensors.shape[0]):
            snippets = [
                TimeSnippet(
                    sensors[s, k],
                    float(hr[s, k]) if np.isfinite(hr[s, k]) else None,
                    float(starts[s, k]),
                    fft[s, k] if fft is not None else None,
                )
                for k in range(sensors.shape[1])
            ]
            segments.append(Segment(snippets, init_len, meta["subject_id"], s))
        results.append(SubjectSegments(meta["subject_id"], meta["channel_names"], segments, stats, rate))
    return results
