"""Store-recall trials.

A trial is ``[silent step, direction step, delay..., cue window]``. At the
direction step all ten channels of one direction fire together (channels
0-9 = Down, 10-19 = Up). After a silent delay of 10-30 steps the ten cue
channels (20-29) each fire once at a random step of the 3-step cue window,
which is also the scored window.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import ConfigurationError

UP, DOWN, BOTH = "up", "down", "both"


@dataclass(frozen=True)
class TaskConfig:
    n_dir_channels: int = 10
    n_cue_channels: int = 10
    input_step: int = 1
    delay_min_steps: int = 10
    delay_max_steps: int = 30
    cue_steps: int = 3
    p_up: float = 0.5

    def __post_init__(self):
        for name in ("n_dir_channels", "n_cue_channels", "delay_min_steps", "cue_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.input_step < 0:
            raise ConfigurationError("input_step must be >= 0")
        if self.delay_min_steps > self.delay_max_steps:
            raise ConfigurationError("delay_min_steps must not exceed delay_max_steps")
        if not 0.0 <= self.p_up <= 1.0:
            raise ConfigurationError("p_up must lie in [0, 1]")

    @property
    def n_channels(self) -> int:
        return 2 * self.n_dir_channels + self.n_cue_channels

    def channels(self, direction: str) -> np.ndarray:
        n = self.n_dir_channels
        return {DOWN: np.arange(n), UP: np.arange(n, 2 * n), BOTH: np.arange(2 * n)}[direction]

    @property
    def cue_channels(self) -> np.ndarray:
        return np.arange(2 * self.n_dir_channels, self.n_channels)


@dataclass(frozen=True)
class TrialSpec:
    direction: str
    delay_steps: int
    cue_fire_step: tuple
    total_steps: int

    @property
    def target(self) -> float | None:
        return {UP: 1.0, DOWN: 0.0}.get(self.direction)


@dataclass
class SpikeRaster:
    spikes: np.ndarray  # (total_steps, n_channels), 0/1
    target: float | None
    loss_mask: np.ndarray  # (total_steps,), 0/1

    def __len__(self):
        return self.spikes.shape[0]


def _build(config: TaskConfig, direction: str, delay: int, cue_fire) -> tuple[TrialSpec, SpikeRaster]:
    cue_start = int(config.input_step + 1 + delay)
    total = cue_start + config.cue_steps
    spikes = np.zeros((total, config.n_channels))
    spikes[config.input_step, config.channels(direction)] = 1.0
    spikes[cue_start + np.asarray(cue_fire), config.cue_channels] = 1.0
    mask = np.zeros(total)
    mask[cue_start:] = 1.0
    spec = TrialSpec(direction, int(delay), tuple(int(c) for c in cue_fire), total)
    return spec, SpikeRaster(spikes, spec.target, mask)


def _draw_timing(config: TaskConfig, rng: np.random.Generator):
    delay = rng.integers(config.delay_min_steps, config.delay_max_steps + 1)
    cue_fire = rng.integers(0, config.cue_steps, size=config.n_cue_channels)
    return delay, cue_fire


def generate_trial(config: TaskConfig, rng: np.random.Generator) -> tuple[TrialSpec, SpikeRaster]:
    direction = UP if rng.random() < config.p_up else DOWN
    return _build(config, direction, *_draw_timing(config, rng))


def generate_novel_both(config: TaskConfig, rng: np.random.Generator) -> tuple[TrialSpec, SpikeRaster]:
    """Both direction groups fire at once; no target. Probe-only, never used for training."""
    return _build(config, BOTH, *_draw_timing(config, rng))


def make_trial(config: TaskConfig, direction: str, delay: int, cue_fire) -> tuple[TrialSpec, SpikeRaster]:
    """Deterministic trial with explicit timing (used for matched probes)."""
    if not config.delay_min_steps <= delay <= config.delay_max_steps:
        raise ConfigurationError(f"delay {delay} outside configured range")
    return _build(config, direction, delay, cue_fire)


def generate_batch(config: TaskConfig, n: int, rng: np.random.Generator):
    if n < 1:
        raise ValueError("batch size must be >= 1")
    return [generate_trial(config, rng) for _ in range(n)]


def trial_descriptor(spec: TrialSpec) -> dict:
    return {"direction": spec.direction, "delay_steps": spec.delay_steps,
            "total_steps": spec.total_steps, "target": spec.target}


def write_raster(raster: SpikeRaster, spec: TrialSpec, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (``step,channel`` spike events) and ``<stem>.json`` (descriptor)."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "channel"])
        for step, ch in zip(*np.nonzero(raster.spikes)):
            w.writerow([int(step), int(ch)])
    json_path.write_text(json.dumps(trial_descriptor(spec), sort_keys=True) + "\n")
    return csv_path, json_path


def read_raster(stem: str | Path, config: TaskConfig = TaskConfig()) -> tuple[dict, SpikeRaster]:
    stem = Path(stem)
    desc = json.loads(stem.with_suffix(".json").read_text())
    total = int(desc["total_steps"])
    spikes = np.zeros((total, config.n_channels))
    with open(stem.with_suffix(".csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            spikes[int(row["step"]), int(row["channel"])] = 1.0
    mask = np.zeros(total)
    mask[total - config.cue_steps:] = 1.0
    return desc, SpikeRaster(spikes, desc["target"], mask)
