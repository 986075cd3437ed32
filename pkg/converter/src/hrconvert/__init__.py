"""Converters for wearable-sensor archives (PPG-DaLiA, WESAD) into the
canonical CSV+manifest dataset layout, including ECG-derived heart rate."""

from .canonical import CANONICAL_FORMAT, Channel, write_dataset
from .convert import (
    ConversionError,
    ConversionReport,
    DALIA_SUBJECT_IDS,
    WESAD_SUBJECT_IDS,
    convert_ppg_dalia,
    convert_wesad,
)
from .ecg import bandpass_filter, detect_r_peaks, hr_series

__all__ = [
    "CANONICAL_FORMAT",
    "Channel",
    "ConversionError",
    "ConversionReport",
    "DALIA_SUBJECT_IDS",
    "WESAD_SUBJECT_IDS",
    "bandpass_filter",
    "convert_ppg_dalia",
    "convert_wesad",
    "detect_r_peaks",
    "hr_series",
    "write_dataset",
]
