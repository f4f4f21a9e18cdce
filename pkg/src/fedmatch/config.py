"""Run configuration: model shape, federation protocol, training and data knobs.

Config files are YAML documents with four sections (``model``, ``federation``,
``training``, ``data``) plus top-level ``corpus``, ``seed`` and ``name``.
Every field is validated before any compute starts; errors carry the field
path, e.g. ``model.d_patch: must be smaller than d_model (32)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

INSERTION_MODES = ("none", "inner", "outer", "vertical", "horizontal")
PATCH_KINDS = ("pal", "low_rank")
FEDERATION_MODES = ("federated", "isolated")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    vocab_size: int = 0  # filled from the corpus vocabulary at run time
    max_seq_len: int = 32
    d_patch: int = 8
    insertion_mode: str = "horizontal"
    patch_kind: str = "low_rank"
    pal_heads: int = 2
    n_shared_layers: int | None = None  # None means all layers shared
    init_std: float = 0.02

    @property
    def shared_layers(self) -> int:
        return self.n_layers if self.n_shared_layers is None else self.n_shared_layers

    @property
    def is_fedavg(self) -> bool:
        return self.insertion_mode == "none"

    def validate(self, prefix: str = "model") -> None:
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "max_seq_len", "d_patch", "pal_heads"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{prefix}.{name}", f"must be a positive integer, got {value!r}")
        if self.vocab_size < 0:
            raise ConfigError(f"{prefix}.vocab_size", "must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError(f"{prefix}.n_heads", f"must divide d_model ({self.d_model})")
        if self.insertion_mode not in INSERTION_MODES:
            raise ConfigError(f"{prefix}.insertion_mode", f"must be one of {INSERTION_MODES}")
        if self.patch_kind not in PATCH_KINDS:
            raise ConfigError(f"{prefix}.patch_kind", f"must be one of {PATCH_KINDS}")
        if self.d_patch >= self.d_model:
            raise ConfigError(f"{prefix}.d_patch", f"must be smaller than d_model ({self.d_model})")
        if self.patch_kind == "pal" and self.d_patch % self.pal_heads:
            raise ConfigError(f"{prefix}.pal_heads", f"must divide d_patch ({self.d_patch})")
        if self.max_seq_len < 4:
            raise ConfigError(f"{prefix}.max_seq_len", "must leave room for [CLS] q [SEP] a [SEP]")
        if not 0 <= self.shared_layers <= self.n_layers:
            raise ConfigError(f"{prefix}.n_shared_layers", f"must lie in [0, {self.n_layers}]")
        if not self.init_std > 0:
            raise ConfigError(f"{prefix}.init_std", "must be positive")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 15
    aggregation_every_k_epochs: int = 1
    sample_size: int | None = None  # None means every client, every round
    mode: str = "federated"

    def validate(self, n_clients: int | None = None, prefix: str = "federation") -> None:
        if not isinstance(self.rounds, int) or self.rounds < 0:
            raise ConfigError(f"{prefix}.rounds", "must be a non-negative integer")
        if self.aggregation_every_k_epochs not in (1, 2, 3):
            raise ConfigError(f"{prefix}.aggregation_every_k_epochs", "must be 1, 2 or 3")
        if self.mode not in FEDERATION_MODES:
            raise ConfigError(f"{prefix}.mode", f"must be one of {FEDERATION_MODES}")
        if self.sample_size is not None:
            if not isinstance(self.sample_size, int) or self.sample_size < 1:
                raise ConfigError(f"{prefix}.sample_size", "must be a positive integer")
            if n_clients is not None and self.sample_size > n_clients:
                raise ConfigError(f"{prefix}.sample_size", f"exceeds the {n_clients} clients")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-3
    batch_size: int = 8
    batch_sizes: dict[str, int] = field(default_factory=dict)  # per-participant overrides
    negatives_per_question: int = 5
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 128

    def batch_size_for(self, participant: str) -> int:
        return int(self.batch_sizes.get(participant, self.batch_size))

    def validate(self, prefix: str = "training") -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"{prefix}.learning_rate", "must be non-negative")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be a positive integer")
        for key, value in self.batch_sizes.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{prefix}.batch_sizes.{key}", "must be a positive integer")
        if not isinstance(self.negatives_per_question, int) or self.negatives_per_question < 1:
            raise ConfigError(f"{prefix}.negatives_per_question", "must be a positive integer")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"{prefix}.warmup_fraction", "must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"{prefix}.beta1", "moment decay rates must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError(f"{prefix}.adam_eps", "must be positive")
        if not isinstance(self.eval_batch_size, int) or self.eval_batch_size < 1:
            raise ConfigError(f"{prefix}.eval_batch_size", "must be a positive integer")


@dataclass(frozen=True)
class DataConfig:
    train_ratio: float = 1.0
    participants: tuple[str, ...] | None = None  # None means every participant in the corpus

    def validate(self, prefix: str = "data") -> None:
        if not 0 < self.train_ratio <= 1:
            raise ConfigError(f"{prefix}.train_ratio", "must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    corpus: str = "corpus"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self, n_clients: int | None = None) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        if not self.name:
            raise ConfigError("name", "must be non-empty")
        self.model.validate()
        self.federation.validate(n_clients)
        self.training.validate()
        self.data.validate()

    def replace(self, **overrides: Any) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``{"model.d_patch": 4}``."""
        return apply_overrides(self, overrides)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["data"]["participants"] is not None:
            out["data"]["participants"] = list(out["data"]["participants"])
        return out


_SECTIONS = {
    "model": ModelConfig,
    "federation": FederationConfig,
    "training": TrainingConfig,
    "data": DataConfig,
}


def _build(cls, raw: Any, prefix: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
    kwargs = dict(raw)
    if cls is DataConfig and kwargs.get("participants") is not None:
        kwargs["participants"] = tuple(kwargs["participants"])
    if cls is TrainingConfig and kwargs.get("batch_sizes") is not None:
        if not isinstance(kwargs["batch_sizes"], dict):
            raise ConfigError(f"{prefix}.batch_sizes", "must be a mapping")
    return cls(**kwargs)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config document must be a mapping")
    allowed = {"name", "corpus", "seed", *_SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown field")
    sections = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    corpus = str(raw.get("corpus", "corpus"))
    if base_dir is not None and not Path(corpus).is_absolute():
        corpus = str((base_dir / corpus).resolve())
    cfg = RunConfig(
        name=str(raw.get("name", "run")),
        corpus=corpus,
        seed=raw.get("seed", 0),
        **sections,
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw, base_dir=path.parent)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    for dotted, value in overrides.items():
        head, _, tail = dotted.partition(".")
        if not tail:
            if head not in ("name", "corpus", "seed"):
                raise ConfigError(dotted, "unknown field")
            cfg = dataclasses.replace(cfg, **{head: value})
            continue
        if head not in _SECTIONS:
            raise ConfigError(dotted, "unknown section")
        section = getattr(cfg, head)
        if tail not in {f.name for f in fields(section)}:
            raise ConfigError(dotted, "unknown field")
        if head == "data" and tail == "participants" and value is not None:
            value = tuple(value)
        cfg = dataclasses.replace(cfg, **{head: dataclasses.replace(section, **{tail: value})})
    return cfg
