"""Run configuration shared by training, evaluation and the command line."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .layers import DEFAULT_ISO_SET


@dataclass
class RunConfig:
    arch: str = "S-Ax4-G-Ax4-CAM"
    hidden_width: int = 32
    iso_set: tuple = DEFAULT_ISO_SET
    cameras: int = 5
    channels: int = 4
    lr: float = 1e-3
    lr_final_fraction: float = 1.0  # cosine decay to lr * this; 1.0 keeps lr constant
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    scalar_lr_scale: float = 10.0  # lr multiplier for the signal and gain parameters
    scale_clamp: float = 2.0  # soft bound on coupling log-scales; 0 disables
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0  # steps between test-NLL evaluations; 0 = once per epoch
    eval_max_records: int = 256
    train_data: str = ""
    test_data: str = ""
    hist_range: float = 0.2
    hist_bins: int = 256
    samples_per_record: int = 1
    nearest_iso: bool = False
    output_dir: str = "."

    def __post_init__(self):
        self.iso_set = tuple(int(i) for i in self.iso_set)
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 are required")
        if self.scalar_lr_scale <= 0 or self.scale_clamp < 0:
            raise ValueError("scalar_lr_scale must be positive and scale_clamp non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iso_set"] = list(self.iso_set)
        return d

    def updated(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)
