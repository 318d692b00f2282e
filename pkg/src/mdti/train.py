"""Optimisation loop, pretraining and fine-tuning drivers, evaluation reports."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, load_into, save_checkpoint
from .config import TrainConfig, config_hash
from .errors import NonFiniteLossError
from .gps_encoder import GpsSemanticEncoder, HashingEmbedder
from .model import FeatureBuilder, PretrainModel, TTEModel, collate, network_tensors
from .objectives import mask_sequence, metrics, tte_loss
from .trajectory import GridSpec, RoadNetwork, TrajectorySample

log = logging.getLogger("mdti")

HISTORY_FILE = "history.json"
BEST_DIR = "best"
VAL_MASK_STREAM = 7919


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to ``lr``, then cosine down to ``min_lr`` at the final step."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    if step >= total:
        return cfg.min_lr
    progress = (step - warm) / (total - warm)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def set_reference_mode(seed: int, reference: bool = True) -> None:
    torch.manual_seed(seed)
    if reference:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_optimizer(params: Sequence[tuple[str, nn.Parameter]], cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with decay on matrices only; biases, norms, scalars are left undecayed."""
    params = [(n, p) for n, p in params if p.requires_grad]
    decay = [p for _, p in params if p.dim() >= 2]
    other = [p for _, p in params if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": other, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Near-equal batches (sizes differ by at most one), so no batch is left with a lone sample."""
    if n == 0:
        return []
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return np.array_split(order, math.ceil(n / batch_size))


class Pipeline:
    """Feature preparation bound to one road network, grid and pattern library."""

    def __init__(self, cfg: TrainConfig, net: RoadNetwork, spec: GridSpec, library: np.ndarray):
        lon0, lat0, lon1, lat1 = spec.bbox
        center = ((lon0 + lon1) / 2, (lat0 + lat1) / 2)
        self.cfg = cfg
        self.net = net
        self.spec = spec
        self.gps = GpsSemanticEncoder(library, center, HashingEmbedder(cfg.d_lm))
        self.features = FeatureBuilder(spec, net, self.gps, cfg.T_segments)
        self.types = net.types()
        self.net_t = network_tensors(net)

    @property
    def library(self) -> np.ndarray:
        return self.gps.library

    @classmethod
    def fit(cls, cfg: TrainConfig, net: RoadNetwork, spec: GridSpec, train: Sequence[TrajectorySample]):
        lon0, lat0, lon1, lat1 = spec.bbox
        center = ((lon0 + lon1) / 2, (lat0 + lat1) / 2)
        library = GpsSemanticEncoder.fit(train, center, cfg.K_patterns, cfg.seed).library
        return cls(cfg, net, spec, library)

    def batch(self, samples: Sequence[TrajectorySample], masks=None) -> dict:
        return collate(self.features.many(samples), self.types, masks)

    def masks(self, samples: Sequence[TrajectorySample], rng: np.random.Generator):
        return [
            mask_sequence(s.road.segments, self.cfg.mask_rate, rng, len(self.net), self.cfg.bert_split)
            for s in samples
        ]


def _check_finite(where: str, losses: dict) -> None:
    values = {k: float(v.detach()) if hasattr(v, "detach") else float(v) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        parts = " ".join(f"{k}={v:.6g}" for k, v in values.items())
        raise NonFiniteLossError(f"non-finite loss at {where}: {parts}")


@dataclass
class PretrainResult:
    model: PretrainModel
    pipeline: Pipeline
    history: list[dict]
    best_epoch: int
    checkpoint: Checkpoint


def pretrain_losses(model: PretrainModel, pipe: Pipeline, samples, masks, cfg: TrainConfig) -> dict[str, float]:
    """Sample-weighted mean losses over ``samples`` in eval mode, batches in fixed order."""
    model.eval()
    sums = {"cl": 0.0, "mlm": 0.0, "total": 0.0}
    with torch.no_grad():
        for idx in batch_indices(len(samples), cfg.batch_size):
            out = model(pipe.batch([samples[i] for i in idx], [masks[i] for i in idx]), pipe.net_t, cfg.loss_weights)
            for k in sums:
                sums[k] += float(out[k].detach()) * len(idx)
    return {k: v / len(samples) for k, v in sums.items()}


def pretrain(
    cfg: TrainConfig,
    net: RoadNetwork,
    spec: GridSpec,
    train: Sequence[TrajectorySample],
    val: Sequence[TrajectorySample],
    out_dir=None,
) -> PretrainResult:
    """Optimise the weighted contrastive + masked-segment objective; keep the best-validation weights."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("pretraining needs non-empty train and validation splits")
    set_reference_mode(cfg.seed, cfg.reference)
    pipe = Pipeline.fit(cfg, net, spec, train)
    model = PretrainModel(cfg.model_config(), len(net), cfg.tau_init)
    opt = make_optimizer(list(model.named_parameters()), cfg)
    val_masks = pipe.masks(val, np.random.default_rng([cfg.seed, VAL_MASK_STREAM]))
    steps_per_epoch = len(batch_indices(len(train), cfg.batch_size))
    params = [p for p in model.parameters() if p.requires_grad]

    history, best, best_state, best_epoch, step = [], math.inf, None, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        model.train()
        sums = {"cl": 0.0, "mlm": 0.0, "total": 0.0}
        for b, idx in enumerate(batch_indices(len(train), cfg.batch_size, rng)):
            samples = [train[i] for i in idx]
            out = model(pipe.batch(samples, pipe.masks(samples, rng)), pipe.net_t, cfg.loss_weights)
            _check_finite(f"epoch {epoch} batch {b}", out)
            opt.zero_grad(set_to_none=True)
            out["total"].backward()
            nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            step += 1
            for g in opt.param_groups:
                g["lr"] = lr_at(step, cfg, steps_per_epoch)
            opt.step()
            for k in sums:
                sums[k] += float(out[k].detach()) * len(idx)
        record = {"epoch": epoch, "lr": lr_at(step, cfg, steps_per_epoch)}
        record.update({f"train_{k}": v / len(train) for k, v in sums.items()})
        v = pretrain_losses(model, pipe, val, val_masks, cfg)
        _check_finite(f"epoch {epoch} validation", v)
        record.update({f"val_{k}": x for k, x in v.items()})
        record["tau"] = float(model.temperature().detach())
        history.append(record)
        log.info(
            "epoch %d  L_CL %.4f  L_MLM %.4f  val L_CL %.4f  val L_MLM %.4f",
            epoch, record["train_cl"], record["train_mlm"], record["val_cl"], record["val_mlm"],
        )
        if v["total"] < best:
            best, best_epoch = v["total"], epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    ckpt = Checkpoint.from_module(
        model,
        cfg.to_dict(),
        pipe.library,
        {"kind": "pretrain", "best_epoch": best_epoch, "n_segments": len(net), "val_total": best},
    )
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(ckpt, out / BEST_DIR)
        write_json(out / HISTORY_FILE, history)
    return PretrainResult(model, pipe, history, best_epoch, ckpt)


@torch.no_grad()
def predict(model: TTEModel, pipe: Pipeline, samples: Sequence[TrajectorySample], batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = [model(pipe.batch([samples[i] for i in idx]), pipe.net_t) for idx in batch_indices(len(samples), batch_size)]
    return torch.cat(out).double().numpy()


def evaluate(model: TTEModel, pipe: Pipeline, samples: Sequence[TrajectorySample], cfg: TrainConfig) -> dict:
    """``{mae, rmse, mape, n, config_hash}`` over ``samples``."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty split")
    preds = predict(model, pipe, samples, cfg.batch_size)
    report = metrics(preds, [s.travel_time for s in samples])
    report.update(n=len(samples), config_hash=config_hash(cfg))
    return report


@dataclass
class FinetuneResult:
    model: TTEModel
    pipeline: Pipeline
    history: list[dict]
    best_epoch: int
    reports: dict[str, dict] = field(default_factory=dict)

    def checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        return Checkpoint.from_module(
            self.model, cfg.to_dict(), self.pipeline.library, {"kind": "tte", "best_epoch": self.best_epoch}
        )


def build_tte(cfg: TrainConfig, ckpt: Checkpoint | None = None) -> TTEModel:
    """Fresh TTE model, warm-started from a checkpoint's encoder tensors when given."""
    model = TTEModel(cfg.model_config())
    if ckpt is not None:
        load_into(model.encoder, ckpt.subset("encoder"))
    return model


def finetune_tte(
    cfg: TrainConfig,
    ckpt: Checkpoint | None,
    net: RoadNetwork,
    spec: GridSpec,
    train: Sequence[TrajectorySample],
    val: Sequence[TrajectorySample],
    test: Sequence[TrajectorySample] = (),
    freeze_encoder: bool = False,
) -> FinetuneResult:
    """Train the travel-time head (and the encoder unless frozen) with an MAE loss.

    The pattern library travels with the checkpoint when one is given, so a
    model pretrained on another city reuses the same prompt patterns.
    Validation MAE picks the returned weights.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fine-tuning needs non-empty train and validation splits")
    set_reference_mode(cfg.seed, cfg.reference)
    sched = cfg.for_finetune()
    if ckpt is not None and ckpt.pattern_library is not None:
        pipe = Pipeline(cfg, net, spec, ckpt.pattern_library)
    else:
        pipe = Pipeline.fit(cfg, net, spec, train)
    model = build_tte(cfg, ckpt)
    model.head.init_output(float(np.mean([s.travel_time for s in train])))
    if freeze_encoder:
        model.encoder.requires_grad_(False)
    opt = make_optimizer(list(model.named_parameters()), sched)
    params = [p for p in model.parameters() if p.requires_grad]
    steps_per_epoch = len(batch_indices(len(train), sched.batch_size))

    history, best, best_state, best_epoch, step = [], math.inf, None, 0, 0
    for epoch in range(1, sched.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        model.train()
        if freeze_encoder:
            model.encoder.eval()
        total = 0.0
        for b, idx in enumerate(batch_indices(len(train), sched.batch_size, rng)):
            batch = pipe.batch([train[i] for i in idx])
            loss = tte_loss(model(batch, pipe.net_t), batch["label"])
            _check_finite(f"epoch {epoch} batch {b}", {"mae": loss})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            step += 1
            for g in opt.param_groups:
                g["lr"] = lr_at(step, sched, steps_per_epoch)
            opt.step()
            total += float(loss.detach()) * len(idx)
        v = evaluate(model, pipe, val, cfg)
        record = {"epoch": epoch, "train_mae": total / len(train), "val_mae": v["mae"], "val_mape": v["mape"]}
        history.append(record)
        log.info("epoch %d  train MAE %.4f  val MAE %.4f  val MAPE %.4f", epoch, record["train_mae"], v["mae"], v["mape"])
        if v["mae"] < best:
            best, best_epoch = v["mae"], epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    result = FinetuneResult(model, pipe, history, best_epoch)
    result.reports["val"] = evaluate(model, pipe, val, cfg)
    if len(test):
        result.reports["test"] = evaluate(model, pipe, test, cfg)
    return result


def load_tte(ckpt: Checkpoint) -> tuple[TTEModel, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = TTEModel(cfg.model_config())
    load_into(model, ckpt.tensors)
    model.eval()
    return model, cfg


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
