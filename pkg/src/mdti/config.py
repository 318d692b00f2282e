"""Training configuration, TOML loading and the config fingerprint."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .model import ModelConfig
from .synthetic import GeneratorConfig

SEED_ENV = "MDTI_SEED"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 2e-4
    warmup_epochs: int = 10
    min_lr: float = 1e-6
    weight_decay: float = 1e-4
    dim: int = 256
    dropout: float = 0.1
    T_segments: int = 16
    K_patterns: int = 16
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)

    # architecture knobs beyond the headline dims
    heads: int = 4
    road_layers: int = 4
    grid_layers: int = 2
    gat_heads: int = 4
    grid_gat_dim: int = 64
    ffn_mult: int = 4
    max_offset: int = 8
    d_lm: int = 256

    # optimisation details
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    tau_init: float = 0.07
    mask_rate: float = 0.15
    bert_split: bool = False

    # fine-tuning; unset values fall back to the pretraining ones
    finetune_epochs: int | None = None
    finetune_lr: float | None = None
    finetune_warmup_epochs: int | None = None

    # single-threaded, deterministic kernels
    reference: bool = True

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "epochs", "dim", "T_segments", "K_patterns", "heads", "d_lm", "grid_gat_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "min_lr", "eps", "clip_norm", "tau_init"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr exceeds lr")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1 or not 0 <= self.mask_rate <= 1:
            raise ConfigError("weight_decay, dropout or mask_rate out of range")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        ft_epochs = self.finetune_epochs or self.epochs
        ft_warm = self.finetune_warmup_epochs if self.finetune_warmup_epochs is not None else self.warmup_epochs
        if not 0 <= ft_warm < ft_epochs:
            raise ConfigError("fine-tuning warmup must be below fine-tuning epochs")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0 or sum(self.loss_weights) == 0:
            raise ConfigError(f"loss_weights must be two non-negatives, not both zero: {self.loss_weights}")
        if self.dim % self.heads or self.grid_gat_dim % self.gat_heads:
            raise ConfigError("dim / grid_gat_dim must be divisible by the head counts")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            road_layers=self.road_layers,
            grid_layers=self.grid_layers,
            gat_heads=self.gat_heads,
            grid_gat_dim=self.grid_gat_dim,
            dropout=self.dropout,
            segments=self.T_segments,
            d_lm=self.d_lm,
            max_offset=self.max_offset,
            ffn_mult=self.ffn_mult,
        )

    def for_finetune(self) -> "TrainConfig":
        """Schedule fields swapped for their fine-tuning counterparts."""
        return dataclasses.replace(
            self,
            epochs=self.finetune_epochs or self.epochs,
            lr=self.finetune_lr or self.lr,
            warmup_epochs=(
                self.finetune_warmup_epochs if self.finetune_warmup_epochs is not None else self.warmup_epochs
            ),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


def apply_seed_override(cfg: TrainConfig) -> TrainConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from e
    return dataclasses.replace(cfg, seed=seed)


def parse_config(data: dict) -> RunConfig:
    """Top-level keys are TrainConfig fields; an optional ``[generator]`` table holds GeneratorConfig fields."""
    data = dict(data)
    gen = data.pop("generator", {})
    gen_fields = {f.name for f in dataclasses.fields(GeneratorConfig)}
    unknown = sorted(set(gen) - gen_fields)
    if unknown:
        raise ConfigError(f"unknown generator keys: {unknown}")
    try:
        generator = GeneratorConfig(**gen)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid generator settings: {e}") from e
    try:
        train = TrainConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(apply_seed_override(train), generator)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(data)
