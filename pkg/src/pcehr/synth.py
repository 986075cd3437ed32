"""Synthetic population generator.

Each subject gets a conditioning coefficient c drawn uniformly from a range;
heart rate follows the linear recovery dynamics dH/dt = rho*(H_target - H)
with H_target(t) = hr_rest + c * a(t), where a(t) is a piecewise-constant
activity intensity shared by the whole population.  Accelerometer channels
are zero-mean Gaussian noise whose standard deviation is proportional to
a(t), so movement statistics carry the intensity signal while HR response
per unit intensity is governed by c alone.  HR is emitted at 1 Hz (to
exercise the upsampling path), accelerometers at 32 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import ChannelSeries, SubjectRecord

DEFAULT_SCHEDULE = (
    (90.0, 0.0),
    (120.0, 20.0),
    (90.0, 5.0),
    (120.0, 30.0),
    (60.0, 10.0),
    (120.0, 25.0),
)


@dataclass
class SynthConfig:
    n_subjects: int = 8
    duration_s: float = 1200.0
    conditioning_range: tuple[float, float] = (0.5, 2.0)
    schedule: tuple[tuple[float, float], ...] = DEFAULT_SCHEDULE  # (block seconds, intensity)
    noise: float = 0.02                 # accelerometer std per unit intensity
    hr_rest: float = 60.0
    hr_initial: float | None = None     # defaults to hr_rest
    rho: float = 0.05                   # recovery rate, 1/s
    seed: int = 0
    accel_rate_hz: float = 32.0
    hr_rate_hz: float = 1.0
    emit_ppg: bool = False

    def __post_init__(self):
        c_min, c_max = self.conditioning_range
        if not c_min < c_max:
            raise ValueError(f"conditioning range must satisfy c_min < c_max, got {self.conditioning_range}")
        if self.accel_rate_hz <= 0 or self.hr_rate_hz <= 0:
            raise ValueError("rates must be positive")
        if self.rho <= 0:
            raise ValueError("recovery rate rho must be positive")


def intensity_at(schedule, t: np.ndarray) -> np.ndarray:
    """Piecewise-constant intensity, cycling the schedule."""
    blocks = np.asarray([list(b) for b in schedule], dtype=np.float64)
    cycle = blocks[:, 0].sum()
    starts = np.concatenate([[0.0], np.cumsum(blocks[:, 0])])
    t_mod = np.asarray(t, dtype=np.float64) % cycle
    idx = np.searchsorted(starts, t_mod, side="right") - 1
    idx = np.clip(idx, 0, len(blocks) - 1)
    return blocks[idx, 1]


def _hr_series(config: SynthConfig, c: float) -> np.ndarray:
    """Exact per-sample integration of the linear recovery dynamics: over a
    step with constant target T, H(t+dt) = T + (H(t) - T)*exp(-rho*dt)."""
    n = int(round(config.duration_s * config.hr_rate_hz))
    dt = 1.0 / config.hr_rate_hz
    t = np.arange(n) * dt
    targets = config.hr_rest + c * intensity_at(config.schedule, t)
    decay = np.exp(-config.rho * dt)
    h = np.empty(n)
    h[0] = config.hr_rest if config.hr_initial is None else config.hr_initial
    for k in range(1, n):
        h[k] = targets[k - 1] + (h[k - 1] - targets[k - 1]) * decay
    return h


def generate_subject(config: SynthConfig, subject_index: int, rng: np.random.Generator) -> SubjectRecord:
    c = float(rng.uniform(*config.conditioning_range))
    hr = _hr_series(config, c)

    n_acc = int(round(config.duration_s * config.accel_rate_hz))
    t_acc = np.arange(n_acc) / config.accel_rate_hz
    sigma = config.noise * intensity_at(config.schedule, t_acc)
    channels = [
        ChannelSeries(f"acc_{axis}", config.accel_rate_hz, rng.normal(size=n_acc) * sigma, "g")
        for axis in "xyz"
    ]
    if config.emit_ppg:
        # pulse-like oscillation at the instantaneous HR frequency plus
        # motion-correlated noise
        hr_dense = np.interp(t_acc, np.arange(len(hr)) / config.hr_rate_hz, hr)
        phase = 2.0 * np.pi * np.cumsum(hr_dense / 60.0) / config.accel_rate_hz
        ppg = np.sin(phase) + 0.5 * sigma * rng.normal(size=n_acc)
        channels.append(ChannelSeries("ppg", config.accel_rate_hz, ppg, "a.u."))
    channels.append(ChannelSeries("hr", config.hr_rate_hz, hr, "bpm"))
    record = SubjectRecord(f"s{subject_index + 1:02d}", channels, "synth")
    record.conditioning = c
    return record


def generate_synthetic(config: SynthConfig) -> list[SubjectRecord]:
    rng = np.random.default_rng(config.seed)
    return [generate_subject(config, i, rng) for i in range(config.n_subjects)]
