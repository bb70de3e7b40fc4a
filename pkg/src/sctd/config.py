"""Run configuration: JSON document with model/schedule/optimizer/data/run sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

MODES = ("baseline", "tokendrop", "sctd")


@dataclass
class ModelSection:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: Optional[int] = None
    max_seq: int = 128
    drop_start: Optional[int] = None
    drop_end: Optional[int] = None
    keep_ratio: float = 0.5
    dtype: str = "float32"
    init_std: float = 0.02


@dataclass
class ScheduleSection:
    mode: str = "sctd"
    interval: Optional[int] = 10
    weight: float = 0.05
    detach_teacher: bool = True
    scorer: str = "importance"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"schedule.mode must be one of {MODES}, got {self.mode!r}")
        if self.interval is not None and self.interval < 1:
            raise ConfigError(f"schedule.interval must be >= 1 or null, got {self.interval}")
        if self.weight < 0:
            raise ConfigError("schedule.weight must be non-negative")
        if self.scorer not in ("importance", "random"):
            raise ConfigError(f"schedule.scorer must be importance or random, got {self.scorer!r}")


@dataclass
class OptimizerSection:
    peak_lr: float = 1e-3
    warmup_steps: Optional[int] = None
    total_steps: int = 2000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    batch_size: int = 32
    seed: int = 0
    max_grad_norm: float = 1.0

    def validate(self):
        if self.peak_lr <= 0:
            raise ConfigError("optimizer.peak_lr must be positive")
        if self.total_steps < 1:
            raise ConfigError("optimizer.total_steps must be positive")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("optimizer.warmup_steps must lie in [0, total_steps]")
        if self.batch_size < 1:
            raise ConfigError("optimizer.batch_size must be positive")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.06 * self.total_steps))


@dataclass
class DataSection:
    corpus: Optional[str] = None
    val_corpus: Optional[str] = None
    val_fraction: float = 0.05
    vocab_size: int = 8000
    max_len: int = 128
    mask_rate: float = 0.15
    sub_split: bool = True

    def validate(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("data.mask_rate must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in [0, 1)")


@dataclass
class RunSection:
    eval_interval: int = 100
    eval_batches: int = 4
    checkpoint_every: int = 0
    record_timing: bool = True


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.schedule.validate()
        self.optimizer.validate()
        self.data.validate()
        if self.data.max_len > self.model.max_seq:
            raise ConfigError(f"data.max_len={self.data.max_len} exceeds model.max_seq={self.model.max_seq}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            section_cls = f.default_factory
            body = raw.get(f.name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {f.name!r} must be an object")
            allowed = {g.name for g in dataclasses.fields(section_cls)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {f.name!r}: {sorted(bad)}")
            try:
                kwargs[f.name] = section_cls(**body)
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "TrainConfig":
        """Copy with per-section overrides, e.g. ``replace(schedule={"mode": "baseline"})``."""
        raw = self.to_dict()
        for name, updates in sections.items():
            raw[name].update(updates)
        return TrainConfig.from_dict(raw)

    def fingerprint(self) -> str:
        """Digest of everything that determines the training trajectory."""
        raw = self.to_dict()
        raw.pop("run")
        blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def bert_base_preset() -> TrainConfig:
    """Full-scale setting (BERT-base shape, batch 1024, 250K steps). Not runnable on a desk CPU."""
    return TrainConfig(
        model=ModelSection(n_layers=12, d_model=768, n_heads=12, ffn_dim=3072, max_seq=512),
        schedule=ScheduleSection(mode="sctd", interval=10, weight=0.05),
        optimizer=OptimizerSection(peak_lr=2e-4, total_steps=250_000, batch_size=1024),
        data=DataSection(vocab_size=30522, max_len=512),
    )
