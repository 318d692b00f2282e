"""Pretraining losses, the travel-time head and regression metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .road_encoder import MASK as MASK_TOKEN


def info_nce(g: Tensor, r: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE between row-paired embeddings (rows are L2-normalised here)."""
    g = F.normalize(g, dim=-1)
    r = F.normalize(r, dim=-1)
    logits = g @ r.T / tau
    target = torch.arange(g.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


class Temperature(nn.Module):
    """Positive temperature ``exp(log_tau)``."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> Tensor:
        return self.log_tau.exp()


@dataclass
class MlmBatch:
    masked_seq: list[int]  # MASK_TOKEN at masked slots
    mask_positions: list[int]
    targets: list[int]



def mask_sequence(
    segments,
    rate: float = 0.15,
    rng: np.random.Generator | None = None,
    vocab_size: int | None = None,
    bert_split: bool = False,
) -> MlmBatch:
    """Mask each real token with probability ``rate``; mask one at random if none was picked.

    Positions index the road trajectory itself, so [CLS]/[PAD] cannot be
    selected. With ``bert_split`` the chosen slots follow 80/10/10
    mask/random/keep (needs ``vocab_size``).
    """
    segs = [int(s) for s in segments]
    if not segs:
        raise ValueError("cannot mask an empty sequence")
    rng = rng if rng is not None else np.random.default_rng()
    picked = np.flatnonzero(rng.random(len(segs)) < rate).tolist()
    if not picked:
        picked = [int(rng.integers(len(segs)))]
    masked = list(segs)
    for p in picked:
        if bert_split:
            u = rng.random()
            if u < 0.8:
                masked[p] = MASK_TOKEN
            elif u < 0.9:
                masked[p] = int(rng.integers(vocab_size))
        else:
            masked[p] = MASK_TOKEN
    return MlmBatch(masked, picked, [segs[p] for p in picked])


def masked_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax ``logits`` (``[N, V]``)."""
    if logits.shape[0] == 0:
        raise ValueError("MLM loss needs at least one masked position")
    return F.cross_entropy(logits, targets)


def mlm_loss(logits: Tensor, mlm: MlmBatch) -> Tensor:
    """MLM loss for one sequence; ``logits`` is ``[L, V]`` over the road trajectory."""
    pos = torch.as_tensor(mlm.mask_positions, dtype=torch.long)
    return masked_nll(logits[pos], torch.as_tensor(mlm.targets, dtype=torch.long))


def total_loss(l_cl, l_mlm, weights=(1.0, 1.0)):
    return weights[0] * l_cl + weights[1] * l_mlm


class TTEHead(nn.Module):
    """``D -> D -> 1`` MLP with a softplus output (minutes)."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, 1)

    def init_output(self, mean_label: float) -> None:
        """Start predictions near ``mean_label`` by inverting the softplus on the output bias."""
        with torch.no_grad():
            self.fc2.bias.fill_(float(mean_label + math.log(-math.expm1(-mean_label))))

    def forward(self, cls: Tensor) -> Tensor:
        return F.softplus(self.fc2(F.gelu(self.fc1(cls)))).squeeze(-1)


def tte_loss(pred: Tensor, label: Tensor) -> Tensor:
    return (pred - label).abs().mean()


def metrics(preds, targets) -> dict[str, float]:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("metrics need equal-length, non-empty prediction and target arrays")
    if (t <= 0).any():
        raise ValueError("MAPE is undefined for non-positive targets")
    err = p - t
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err**2))),
        "mape": float(np.mean(np.abs(err) / t)),
    }
