"""Writer for the canonical CSV+manifest dataset layout.

The layout is a directory holding ``manifest.json`` plus one CSV per subject
per sample rate.  The manifest declares each file's rate and ordered channel
list; CSV headers repeat that list exactly, values are written with 9
significant digits, and missing samples are empty fields.  This module is
deliberately self-contained: the format itself is the contract between this
converter and downstream consumers, so nothing is imported from them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANONICAL_FORMAT = "pcehr-canonical-v1"


@dataclass
class Channel:
    name: str
    rate_hz: float
    values: np.ndarray
    units: str = ""
    # extra manifest metadata for the file this channel lands in, e.g. the
    # window/shift timing of a derived heart-rate series
    file_meta: dict = field(default_factory=dict)


def _format_value(v: float) -> str:
    if math.isnan(v):
        return ""
    return format(v, ".9g")


def write_dataset(root, subjects: list[tuple[str, list[Channel]]], dataset_tag: str = "") -> Path:
    """Write one CSV per (subject, rate) plus the manifest; returns its path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": CANONICAL_FORMAT, "dataset": dataset_tag, "subjects": {}}
    for subject_id, channels in subjects:
        by_rate: dict[float, list[Channel]] = {}
        for ch in channels:
            by_rate.setdefault(ch.rate_hz, []).append(ch)
        files = []
        for rate, group in sorted(by_rate.items()):
            rate_name = format(rate, "g").replace(".", "p")
            path = f"{subject_id}_{rate_name}hz.csv"
            names = [ch.name for ch in group]
            n = max(len(ch.values) for ch in group)
            with open(root / path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(names)
                for i in range(n):
                    writer.writerow(
                        [_format_value(ch.values[i]) if i < len(ch.values) else "" for ch in group]
                    )
            entry = {"path": path, "rate_hz": rate, "channels": names}
            units = {ch.name: ch.units for ch in group if ch.units}
            if units:
                entry["units"] = units
            for ch in group:
                entry.update(ch.file_meta)
            files.append(entry)
        manifest["subjects"][subject_id] = {"files": files}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path
