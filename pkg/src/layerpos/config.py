"""Experiment configuration with embedded defaults and JSON round-trip."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

OPTIMIZERS = ("gd", "momentum", "adam")


def substream_seed(seed: int, name: str) -> int:
    """Seed of the named random stream derived from the master seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    # task
    layers: int = 6
    width: int = 128
    d: int = 16
    e: int = 32
    planted: tuple = (0, 2, 4)
    shift_magnitude: float = 1.0
    n_target: int = 256
    margin: float = 1.0
    source_threshold: float = 1e-3
    # adapters
    rank: int = 8
    gamma: float = 2.0
    # optimization
    eta_w: float = 3e-3
    eta_alpha: float = 1e-2
    T: int = 1000
    T_s: int = 300
    k: int = 3
    guard: float = 1e-12
    optimizer_w: str = "adam"
    optimizer_alpha: str = "gd"
    momentum: float = 0.9
    binarize_gates: bool = True
    warm_start_stage2: bool = True
    oracle_budget: int = 200
    # paths
    task: str | None = None
    checkpoint: str | None = None
    anchors: str | None = None
    out_dir: str = "runs/default"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.planted = tuple(sorted(int(i) for i in self.planted))
        self.validate()

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be positive")
        if not 1 <= self.k <= self.layers:
            raise ValueError(f"k = {self.k} must lie in 1..{self.layers}")
        if not 0 < self.T_s < self.T:
            raise ValueError(f"need 0 < T_s < T, got T_s = {self.T_s}, T = {self.T}")
        if not self.rank >= 1 or not self.gamma > 0:
            raise ValueError("rank must be at least 1 and gamma positive")
        if self.eta_w < 0 or self.eta_alpha < 0:
            raise ValueError("step sizes must be non-negative")
        for name in (self.optimizer_w, self.optimizer_alpha):
            if name not in OPTIMIZERS:
                raise ValueError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
        if any(not 0 <= i < self.layers for i in self.planted):
            raise ValueError(f"planted layers {self.planted} outside 0..{self.layers - 1}")
        if self.shift_magnitude < 0:
            raise ValueError("shift_magnitude must be non-negative")

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["planted"] = list(self.planted)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
