"""Experiment configuration: typed sections, strict JSON round-trip, seed streams."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SOURCES = ("bass", "drums", "other", "vocals")
VARIANTS = ("MSA", "NSV1", "NSV2", "A1", "A2", "A3", "COLA", "RANDMASK")

# variants where a fixed source is coherent (source-targeted training)
_FIXED_SOURCE_OK = ("MSA", "NSV1", "A2", "A3")


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_clips: int = 2000
    clip_seconds: float = 30.0
    activity_prob: dict = field(default_factory=lambda: {
        "bass": 0.45, "drums": 0.42, "other": 0.88, "vocals": 0.32})
    tempo_range: tuple = (75.0, 225.0)
    pitch_set: tuple = (0, 2, 4, 5, 7, 9, 11)
    split_ratio: tuple = (12, 1, 3)
    seed: Optional[int] = None  # None: derive from the experiment seed

    def validate(self, path="generator"):
        if self.clip_seconds < 4:
            raise ConfigError(f"{path}.clip_seconds: must be >= 4")
        if self.n_clips < 1:
            raise ConfigError(f"{path}.n_clips: must be >= 1")
        if set(self.activity_prob) != set(SOURCES):
            raise ConfigError(f"{path}.activity_prob: keys must be exactly {sorted(SOURCES)}")
        for src, p in self.activity_prob.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{path}.activity_prob.{src}: probability out of [0,1]")
        if len(self.tempo_range) != 2 or self.tempo_range[0] >= self.tempo_range[1]:
            raise ConfigError(f"{path}.tempo_range: need (low, high) with low < high")
        if len(self.pitch_set) == 0:
            raise ConfigError(f"{path}.pitch_set: must be non-empty")
        if len(self.split_ratio) != 3 or min(self.split_ratio) <= 0:
            raise ConfigError(f"{path}.split_ratio: need three positive weights")

    @property
    def tempo_median(self) -> float:
        return 0.5 * (self.tempo_range[0] + self.tempo_range[1])


@dataclass
class MelSection:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None
    log_floor: float = 1e-6


@dataclass
class PairingConfig:
    variant: str = "MSA"
    source: Optional[str] = None  # fix the source for source-targeted training

    def validate(self, path="pairing"):
        if self.variant not in VARIANTS:
            raise ConfigError(f"{path}.variant: unknown variant {self.variant!r}")
        if self.source is not None:
            if self.source not in SOURCES:
                raise ConfigError(f"{path}.source: unknown source {self.source!r}")
            if self.variant not in _FIXED_SOURCE_OK:
                raise ConfigError(
                    f"{path}.source: fixed source is incompatible with variant {self.variant}")


@dataclass
class ModelConfig:
    feature_dim: int = 64
    embed_dim: int = 32
    # conv stages: (out_channels, (kh, kw), (sh, sw)); global max pool then dense to feature_dim
    encoder_spec: tuple = (
        (8, (5, 9), (2, 3)),
        (16, (3, 9), (2, 2)),
    )
    input_shape: tuple = (64, 98)  # (mel bands, frames) each crop must have
    init_seed: Optional[int] = None

    def validate(self, path="model"):
        if self.feature_dim < 1 or self.embed_dim < 1:
            raise ConfigError(f"{path}: feature_dim and embed_dim must be >= 1")
        if len(self.encoder_spec) < 1:
            raise ConfigError(f"{path}.encoder_spec: need at least one conv stage")
        if len(self.input_shape) != 2:
            raise ConfigError(f"{path}.input_shape: need (mels, frames)")


@dataclass
class TrainConfig:
    total_steps: int = 400
    batches_per_step: int = 64
    batch_size: int = 32
    lr0: float = 0.001
    halve_at: Optional[int] = None  # None -> total_steps // 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_window: int = 50
    temperature: float = 0.2
    n_val_batches: int = 4
    checkpoint_every: int = 25

    def validate(self, path="train"):
        if self.total_steps < 1:
            raise ConfigError(f"{path}.total_steps: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError(f"{path}.batch_size: must be >= 2")
        if self.resolved_halve_at > self.total_steps:
            raise ConfigError(f"{path}.halve_at: must be <= total_steps")
        if self.temperature <= 0:
            raise ConfigError(f"{path}.temperature: must be positive")

    @property
    def resolved_halve_at(self) -> int:
        return self.total_steps // 2 if self.halve_at is None else self.halve_at


@dataclass
class ProbeConfig:
    head: str = "linear"  # or "mlp512relu"
    task_type: str = "multilabel"  # or "multiclass"
    lr: Optional[float] = None  # None: 0.0005 linear, 0.0003 mlp
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 60
    hidden_dim: int = 512
    class_prefix: str = "pitch-"  # tag family defining multiclass labels

    def validate(self, path="probe"):
        if self.head not in ("linear", "mlp512relu"):
            raise ConfigError(f"{path}.head: unknown head {self.head!r}")
        if self.task_type not in ("multilabel", "multiclass"):
            raise ConfigError(f"{path}.task_type: unknown task_type {self.task_type!r}")
        if self.patience < 1:
            raise ConfigError(f"{path}.patience: must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"{path}.lr: must be positive")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.0005 if self.head == "linear" else 0.0003


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    data_dir: Optional[str] = None  # None -> <output_dir>/dataset
    seed: int = 0
    leakage: float = 0.0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    mel: MelSection = field(default_factory=MelSection)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self):
        if not 0.0 <= self.leakage <= 1.0:
            raise ConfigError("leakage: must be in [0, 1]")
        self.generator.validate()
        self.pairing.validate()
        self.model.validate()
        self.train.validate()
        self.probe.validate()
        return self

    @property
    def resolved_data_dir(self) -> Path:
        if self.data_dir is not None:
            return Path(self.data_dir)
        return Path(self.output_dir) / "dataset"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


_TUPLE_FIELDS = {"tempo_range", "pitch_set", "split_ratio", "encoder_spec", "input_shape"}


def _to_jsonable(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    return value


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key")
        ftype = fields[key].type
        sub = f"{path}.{key}" if path else key
        if isinstance(value, dict) and key in _SECTION_TYPES:
            kwargs[key] = _from_dict(_SECTION_TYPES[key], value, sub)
        elif key in _TUPLE_FIELDS:
            kwargs[key] = _tuplify(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "generator": GeneratorConfig,
    "mel": MelSection,
    "pairing": PairingConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "")
    return cfg.validate()


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    return config_from_dict(data)


def mel_config(cfg: ExperimentConfig):
    from .dsp import MelConfig

    m = cfg.mel
    return MelConfig(window_ms=m.window_ms, hop_ms=m.hop_ms, n_mels=m.n_mels,
                     fmin=m.fmin, fmax=m.fmax, log_floor=m.log_floor)


# ---------------------------------------------------------------------------
# seeded randomness: every component draws from a named substream of one root
# ---------------------------------------------------------------------------

_STREAMS = {"data": 1, "pairing": 2, "init": 3, "probe": 4, "val": 5, "gradcheck": 6}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """A generator that depends only on (seed, stream name, indices)."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[name], *map(int, indices)])
    return np.random.Generator(np.random.PCG64(ss))
