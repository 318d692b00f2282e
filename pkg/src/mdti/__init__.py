"""Multimodal trajectory representation learning with grid, GPS and road views."""
from .config import RunConfig, TrainConfig, config_hash, load_config
from .model import MDTIEncoder, ModelConfig, PretrainModel, TTEModel
from .synthetic import GeneratorConfig, generate_synthetic
from .train import evaluate, finetune_tte, lr_at, pretrain

__all__ = [
    "GeneratorConfig",
    "MDTIEncoder",
    "ModelConfig",
    "PretrainModel",
    "RunConfig",
    "TTEModel",
    "TrainConfig",
    "config_hash",
    "evaluate",
    "finetune_tte",
    "generate_synthetic",
    "load_config",
    "lr_at",
    "pretrain",
]

__version__ = "0.1.0"
