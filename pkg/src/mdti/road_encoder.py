"""Road modality: topology GAT over the whole network, then a Transformer over
each road trajectory whose self-attention carries a road-type prior."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .nn import EncoderLayer, GATLayer
from .synthetic import day_of_week, minute_of_day
from .trajectory import (
    N_POSITION_FEATURES,
    N_ROAD_TYPES,
    RoadNetwork,
    RoadTrajectory,
    position_features,
)

# sentinel token ids; mapped onto the rows after the segment table
PAD, CLS, MASK = -1, -2, -3
N_WEEK, MINUTE_BUCKETS = 7, 96
NO_WEEK, NO_MINUTE = N_WEEK, MINUTE_BUCKETS
TYPE_CLS, TYPE_PAD, TYPE_MASK = N_ROAD_TYPES, N_ROAD_TYPES + 1, N_ROAD_TYPES + 2
N_NODE_FEATURES = 1 + N_ROAD_TYPES + 2 + N_POSITION_FEATURES


def road_node_features(net: RoadNetwork) -> np.ndarray:
    """``[length km, one-hot type, out-degree, in-degree, midpoint encoding]`` per segment.

    The midpoint is scaled to [0, 1] over the network's extent and expanded
    into multi-frequency sinusoids; on a regular lattice the other columns
    alone leave most segments indistinguishable.
    """
    n = len(net)
    x = np.zeros((n, N_NODE_FEATURES))
    x[:, 0] = [s.length_m / 1000.0 for s in net.segments]
    x[np.arange(n), 1 + net.types()] = 1.0
    for a, b in net.edges:
        x[a, 5] += 1
        x[b, 6] += 1
    mid = np.array([np.mean(s.polyline, axis=0) for s in net.segments])
    lo, hi = mid.min(axis=0), mid.max(axis=0)
    x[:, 7:] = position_features((mid - lo) / np.where(hi > lo, hi - lo, 1.0))
    return x


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Z-score each column over the network; constant columns become 0."""
    std = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)


def road_adjacency(net: RoadNetwork) -> np.ndarray:
    """``adj[j, i]`` is True for an edge ``i -> j`` (j aggregates from i); self-loops added."""
    adj = np.eye(len(net), dtype=bool)
    for a, b in net.edges:
        adj[b, a] = True
    return adj


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


def sequence_inputs(
    road: RoadTrajectory,
    types: np.ndarray,
    mask_positions=(),
    n_segments: int | None = None,
    masked_seq=None,
):
    """Token arrays for ``[CLS] v_1 .. v_L``.

    ``mask_positions`` index the road trajectory (0-based); those tokens become
    [MASK] and lose their type, unless ``masked_seq`` supplies another
    replacement for the slot. Returns ``(ids, dow, minute, type)`` int arrays.
    """
    segs = np.asarray(road.segments, dtype=np.int64)
    if n_segments is not None and (segs.min(initial=0) < 0 or segs.max(initial=0) >= n_segments):
        raise ValueError(f"road trajectory references segments outside [0, {n_segments})")
    ts = np.asarray(road.timestamps, dtype=np.int64)
    ids = np.concatenate([[CLS], segs])
    dow = np.concatenate([[NO_WEEK], [day_of_week(t) for t in ts]]).astype(np.int64)
    minute = np.concatenate([[NO_MINUTE], [minute_of_day(t) // 15 for t in ts]]).astype(np.int64)
    typ = np.concatenate([[TYPE_CLS], types[segs]]).astype(np.int64)
    for p in mask_positions:
        tok = MASK if masked_seq is None else int(masked_seq[p])
        ids[p + 1] = tok
        typ[p + 1] = TYPE_MASK if tok == MASK else types[tok]
    return ids, dow, minute, typ


def collate_road(items) -> dict[str, Tensor]:
    """Pad token arrays to a common length; ``pad`` is True on padded slots."""
    length = max(len(it[0]) for it in items)
    fill = (PAD, NO_WEEK, NO_MINUTE, TYPE_PAD)
    out = [torch.full((len(items), length), f, dtype=torch.long) for f in fill]
    pad = torch.ones(len(items), length, dtype=torch.bool)
    for i, it in enumerate(items):
        k = len(it[0])
        for t, arr in zip(out, it):
            t[i, :k] = torch.as_tensor(arr)
        pad[i, :k] = False
    return {"ids": out[0], "dow": out[1], "minute": out[2], "type": out[3], "pad": pad}


class TypeBiasLayer(EncoderLayer):
    """Encoder layer whose attention adds per-head scores computed from the type embeddings."""

    def __init__(self, dim: int, heads: int, ffn_dim: int | None = None, dropout: float = 0.0):
        super().__init__(dim, heads, ffn_dim, dropout)
        self.type_q = nn.Linear(dim, dim, bias=False)
        self.type_k = nn.Linear(dim, dim, bias=False)

    def type_bias(self, type_emb: Tensor) -> Tensor:
        q = self.attn.split(self.type_q(type_emb))
        k = self.attn.split(self.type_k(type_emb))
        return q @ k.transpose(-1, -2) / math.sqrt(self.attn.head_dim)

    def forward(self, x: Tensor, type_emb: Tensor, key_mask: Tensor | None = None) -> Tensor:
        return super().forward(x, key_mask=key_mask, bias=self.type_bias(type_emb))


class RoadEncoder(nn.Module):
    def __init__(
        self,
        dim: int = 256,
        heads: int = 4,
        layers: int = 4,
        gat_heads: int = 4,
        dropout: float = 0.1,
        ffn_dim: int | None = None,
    ):
        super().__init__()
        self.dim = dim
        self.node_proj = nn.Linear(N_NODE_FEATURES, dim)
        self.gat1 = GATLayer(dim, dim, gat_heads, concat=True, dropout=dropout)
        self.gat2 = GATLayer(dim, dim, gat_heads, concat=False, dropout=dropout)
        self.gat_norm = nn.LayerNorm(dim)
        self.special = nn.Parameter(torch.randn(3, dim) * 0.02)  # PAD, CLS, MASK
        self.week_emb = nn.Embedding(N_WEEK + 1, dim)
        self.minute_emb = nn.Embedding(MINUTE_BUCKETS + 1, dim)
        self.type_emb = nn.Embedding(N_ROAD_TYPES + 3, dim)
        for emb in (self.week_emb, self.minute_emb, self.type_emb):
            nn.init.normal_(emb.weight, std=0.02)
        self.layers = nn.ModuleList(TypeBiasLayer(dim, heads, ffn_dim, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def road_gat(self, node_x: Tensor, adj: Tensor) -> Tensor:
        """``[|V|, D]`` topology-aware segment embeddings."""
        return self.gat_norm(self.gat2(self.gat1(self.node_proj(node_x), adj), adj))

    def token_table(self, g_emb: Tensor) -> Tensor:
        return torch.cat([g_emb, self.special], dim=0)

    def embed(self, ids: Tensor, dow: Tensor, minute: Tensor, types: Tensor, g_emb: Tensor):
        """Token inputs ``[B, L+1, D]`` and the type embeddings used for the attention prior."""
        n = g_emb.shape[0]
        rows = torch.where(ids >= 0, ids, n - 1 - ids)
        type_e = self.type_emb(types)
        x = self.token_table(g_emb)[rows] + self.week_emb(dow) + self.minute_emb(minute) + type_e
        x = x + sinusoidal_encoding(ids.shape[1], self.dim, x.dtype)
        return x, type_e

    def forward(self, ids, dow, minute, types, pad, node_x, adj) -> Tensor:
        g_emb = self.road_gat(node_x, adj)
        x, type_e = self.embed(ids, dow, minute, types, g_emb)
        x = self.dropout(x)
        valid = ~pad
        for layer in self.layers:
            x = layer(x, type_e, valid)
        return self.out_proj(self.norm(x))
