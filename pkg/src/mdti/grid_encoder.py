"""Grid modality: local 8-neighbourhood subgraph per trajectory, two GAT
layers, equal-count temporal pooling and projection to the token sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .nn import GATLayer
from .trajectory import (
    N_POSITION_FEATURES,
    GridSpec,
    TrajectorySample,
    point_speeds,
    position_features,
)

N_GRID_FEATURES = 3 + N_POSITION_FEATURES
SPEED_SCALE = 10.0  # m/s; keeps the speed column on the same O(1) scale as the rest


@dataclass
class GridSubgraph:
    node_ids: np.ndarray  # sorted cell ids
    adjacency: np.ndarray  # [n, n] bool, self-loops included
    features: np.ndarray | None = None  # [n, F]

    def index(self) -> dict[int, int]:
        return {int(c): i for i, c in enumerate(self.node_ids)}


@dataclass
class GridInputs:
    """Per-trajectory tensors the grid encoder consumes."""

    features: np.ndarray  # [n, N_GRID_FEATURES]
    adjacency: np.ndarray  # [n, n] bool
    pool: np.ndarray  # [T, n] row-stochastic over each non-empty segment
    empty: np.ndarray  # [T] bool, segment received no timestep


def build_local_adjacency(cells, spec: GridSpec) -> GridSubgraph:
    cells = {int(c) for c in cells}
    if not cells:
        raise ValueError("no cells to build a subgraph from")
    bad = [c for c in cells if not 0 <= c < spec.n_cells]
    if bad:
        raise ValueError(f"cell ids out of range for a {spec.rows}x{spec.cols} grid: {sorted(bad)[:5]}")
    nodes = set(cells)
    for c in cells:
        nodes.update(spec.neighbors(c))
    ids = np.array(sorted(nodes), dtype=np.int64)
    rows, cols = np.divmod(ids, spec.cols)
    adj = (np.abs(rows[:, None] - rows[None, :]) <= 1) & (np.abs(cols[:, None] - cols[None, :]) <= 1)
    return GridSubgraph(ids, adj)


def segment_bins(length: int, segments: int) -> list[range]:
    """Equal-count bins over ``length`` timesteps: ``[floor(sL/T), floor((s+1)L/T))``."""
    return [range(s * length // segments, (s + 1) * length // segments) for s in range(segments)]


def grid_inputs(sample: TrajectorySample, spec: GridSpec, segments: int) -> GridInputs:
    """Node features are ``[mean speed / 10 m/s, mean minute-of-day / 1440, visits / length]``
    (zero for neighbour-only cells) followed by a sinusoidal encoding of the
    cell's row and column."""
    cells = np.asarray(sample.grid.cells, dtype=np.int64)
    if len(cells) == 0:
        raise ValueError(f"sample {sample.id}: empty grid trajectory")
    sub = build_local_adjacency(cells, spec)
    idx = sub.index()
    node_of = np.array([idx[int(c)] for c in cells])
    gps = sample.gps.array()
    lon0, lat0, lon1, lat1 = spec.bbox
    speed = point_speeds(gps, ((lon0 + lon1) / 2, (lat0 + lat1) / 2)) / SPEED_SCALE
    minute = (gps[:, 2] % 86400) / 60.0 / 1440.0
    n = len(sub.node_ids)
    counts = np.bincount(node_of, minlength=n).astype(np.float64)
    feats = np.zeros((n, N_GRID_FEATURES))
    visited = counts > 0
    feats[visited, 0] = np.bincount(node_of, speed, n)[visited] / counts[visited]
    feats[visited, 1] = np.bincount(node_of, minute, n)[visited] / counts[visited]
    feats[:, 2] = counts / len(cells)
    rows, cols = np.divmod(sub.node_ids, spec.cols)
    feats[:, 3:] = position_features(np.stack([(cols + 0.5) / spec.cols, (rows + 0.5) / spec.rows], axis=1))

    pool = np.zeros((segments, n))
    empty = np.zeros(segments, dtype=bool)
    for s, b in enumerate(segment_bins(len(cells), segments)):
        if len(b) == 0:
            empty[s] = True
            continue
        np.add.at(pool[s], node_of[list(b)], 1.0 / len(b))
    return GridInputs(feats, sub.adjacency, pool, empty)


def time_slots(point_times, query_times, segments: int) -> np.ndarray:
    """1-based index of the temporal segment holding each query time.

    A query time maps to the last GPS fix at or before it (the first fix when
    it precedes the trajectory), then to that fix's equal-count bin.
    """
    t = np.asarray(point_times, dtype=np.float64)
    idx = np.searchsorted(t, np.asarray(query_times, dtype=np.float64), side="right") - 1
    idx = np.clip(idx, 0, len(t) - 1)
    # bin s holds [floor(sL/T), floor((s+1)L/T)), so index i sits in bin ceil((i+1)T/L) - 1
    n = len(t)
    return ((idx + 1) * segments + n - 1) // n


MAX_NEIGHBORS = 9  # self + 8-neighbourhood


def neighbor_lists(adjacency: np.ndarray, width: int = MAX_NEIGHBORS) -> tuple[np.ndarray, np.ndarray]:
    """Dense adjacency -> ``(index [n, width], valid [n, width])``; unused slots point at the node itself."""
    n = len(adjacency)
    index = np.repeat(np.arange(n)[:, None], width, axis=1)
    valid = np.zeros((n, width), dtype=bool)
    for i in range(n):
        nbrs = np.flatnonzero(adjacency[i])
        if len(nbrs) > width:
            raise ValueError(f"node {i} has {len(nbrs)} neighbours, more than {width}")
        index[i, : len(nbrs)] = nbrs
        valid[i, : len(nbrs)] = True
    return index, valid


def collate_grid(items: list[GridInputs], dtype=torch.float32, dense: bool = False) -> dict[str, Tensor]:
    """Pad node sets to a common size; padding nodes keep only their self-loop.

    ``adj`` is a dense matrix when ``dense`` is set, otherwise a neighbour list.
    """
    b = len(items)
    n = max(len(it.features) for it in items)
    t = items[0].pool.shape[0]
    x = torch.zeros(b, n, N_GRID_FEATURES, dtype=dtype)
    pool = torch.zeros(b, t, n, dtype=dtype)
    empty = torch.zeros(b, t, dtype=torch.bool)
    if dense:
        adj = torch.eye(n, dtype=torch.bool).repeat(b, 1, 1)
    else:
        index = torch.arange(n)[None, :, None].repeat(b, 1, MAX_NEIGHBORS)
        valid = torch.zeros(b, n, MAX_NEIGHBORS, dtype=torch.bool)
        valid[..., 0] = True
    for i, it in enumerate(items):
        k = len(it.features)
        x[i, :k] = torch.as_tensor(it.features, dtype=dtype)
        pool[i, :, :k] = torch.as_tensor(it.pool, dtype=dtype)
        empty[i] = torch.as_tensor(it.empty)
        if dense:
            adj[i, :k, :k] = torch.as_tensor(it.adjacency)
        else:
            idx, ok = neighbor_lists(it.adjacency)
            index[i, :k] = torch.as_tensor(idx)
            valid[i, :k] = torch.as_tensor(ok)
    return {"x": x, "adj": adj if dense else (index, valid), "pool": pool, "empty": empty}


class GridEncoder(nn.Module):
    """Two GAT layers (heads concatenated, then averaged), temporal pooling, projection, [CLS]."""

    def __init__(self, dim: int = 256, gat_dim: int = 64, heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.gat1 = GATLayer(N_GRID_FEATURES, gat_dim, heads, concat=True, dropout=dropout)
        self.gat2 = GATLayer(gat_dim, gat_dim, heads, concat=False, dropout=dropout)
        self.proj = nn.Linear(gat_dim, dim)
        self.cls = nn.Parameter(torch.randn(dim) * 0.02)
        self.dropout = nn.Dropout(dropout)

    def node_embeddings(self, x: Tensor, adj: Tensor) -> Tensor:
        return self.gat2(self.gat1(x, adj), adj)

    def forward(self, x: Tensor, adj, pool: Tensor, empty: Tensor | None = None) -> Tensor:
        """``[B, T+1, D]`` with row 0 the [CLS] token; empty segments are zero rows."""
        h = self.node_embeddings(x, adj)
        segs = self.dropout(self.proj(pool @ h))
        if empty is not None:
            segs = segs.masked_fill(empty[..., None], 0.0)
        cls = self.cls.expand(segs.shape[0], 1, -1)
        return torch.cat([cls, segs], dim=1)


def encode_grid(sample: TrajectorySample, spec: GridSpec, encoder: GridEncoder, segments: int = 16) -> Tensor:
    """Single-trajectory convenience wrapper returning ``[T+1, D]``."""
    dtype = next(encoder.parameters()).dtype
    batch = collate_grid([grid_inputs(sample, spec, segments)], dtype)
    return encoder(batch["x"], batch["adj"], batch["pool"], batch["empty"])[0]
