"""Flat key = value run configuration.

Precedence: built-in defaults, then file values, then command-line flags.
Keys mirror the model/training/preprocessing hyperparameter names; unknown
keys are hard errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import fields

from .harness import TrainConfig
from .models import ModelConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# model-structure keys come straight from the ModelConfig fields; field types
# may be strings under postponed annotation evaluation
_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}
_MODEL_KEYS = {
    f.name: (f.type if isinstance(f.type, type) else _TYPE_NAMES[f.type])
    for f in fields(ModelConfig)
    if f.name != "kind"
}

CONFIG_SCHEMA: dict[str, type] = {
    # optimization
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "hr_weight": float,
    "disc_weight": float,
    # protocol
    "runs_per_fold": int,
    "base_seed": int,
    # preprocessing
    "tau_s": float,
    "overlap": float,
    "rate_hz": float,
    "with_ppg_fft": bool,
    # model structure
    **_MODEL_KEYS,
}

_PREPROCESS_KEYS = ("tau_s", "overlap", "rate_hz", "n_snippets", "init_len", "with_ppg_fft")
_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "weight_decay", "hr_weight", "disc_weight")


def _coerce(key: str, text: str):
    target = CONFIG_SCHEMA[key]
    try:
        if target is bool:
            return _parse_bool(text)
        return target(text)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {text!r} as {target.__name__}") from exc


def read_config_file(path) -> dict:
    """Parse key = value lines; '#' starts a comment, blank lines ignored."""
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, text.strip())
    return values


def merge_settings(*layers: dict | None) -> dict:
    """Later layers override earlier ones; None entries mean 'not set'."""
    merged: dict = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            if value is None:
                continue
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            merged[key] = value
    return merged


def preprocess_params(settings: dict) -> dict:
    """Subset understood by the preprocessing pipeline."""
    return {key: settings[key] for key in _PREPROCESS_KEYS if key in settings}


def build_train_config(settings: dict, kind: str, dataset=None) -> TrainConfig:
    """TrainConfig with model-structure fields taken from the dataset shape
    (when given) and then from explicit settings."""
    from .harness import infer_model_config

    model_fields = {f.name for f in fields(ModelConfig)}
    overrides = {k: v for k, v in settings.items() if k in model_fields and k != "kind"}
    if dataset is not None:
        # dataset shape wins for the data-determined fields unless overridden
        model = infer_model_config(dataset, kind, **overrides)
    else:
        model = ModelConfig(kind=kind)
        for key, value in overrides.items():
            setattr(model, key, value)
    train_kwargs = {k: settings[k] for k in _TRAIN_KEYS if k in settings}
    return TrainConfig(model=model, **train_kwargs)
