import numpy as np
import torch
import torch.nn.functional as F

from mdti.nn import GATLayer


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def random_graph(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, True)
    return adj


def toy_sample(xy, spec, t0=1_700_000_000, dt=15, sid="toy", road=None):
    """A sample whose GPS points are cell-relative fractions ``xy`` of ``spec``'s bbox."""
    from mdti.trajectory import (
        GpsTrajectory,
        RoadTrajectory,
        TrajectorySample,
        discretize,
    )

    lon0, lat0, lon1, lat1 = spec.bbox
    rows = [(lon0 + u * (lon1 - lon0), lat0 + v * (lat1 - lat0), t0 + i * dt) for i, (u, v) in enumerate(xy)]
    gps = GpsTrajectory.from_array(rows)
    segs = road if road is not None else [0]
    rt = RoadTrajectory(list(segs), [t0 + i for i in range(len(segs))])
    return TrajectorySample(sid, gps, discretize(gps, spec), rt, (len(xy) - 1) * dt / 60.0)


def dense_gat_oracle(layer: GATLayer, h: torch.Tensor, adj: np.ndarray) -> torch.Tensor:
    """Literal per-node loop: e_ij = LeakyReLU(a^T [W h_i || W h_j]), softmax over N(i) ∪ {i}."""
    n = h.shape[0]
    H, d = layer.heads, layer.head_dim
    W = layer.weight.weight.detach().T  # [in, H*d]
    heads = []
    for k in range(H):
        Wk = W[:, k * d : (k + 1) * d]
        a = torch.cat([layer.att_src[k], layer.att_dst[k]]).detach()
        wh = h @ Wk
        out = torch.zeros(n, d, dtype=h.dtype)
        for i in range(n):
            nbrs = [j for j in range(n) if adj[i, j]]
            e = torch.stack([F.leaky_relu(a @ torch.cat([wh[i], wh[j]]), 0.2) for j in nbrs])
            alpha = torch.exp(e - e.max()) / torch.exp(e - e.max()).sum()
            for w, j in zip(alpha, nbrs):
                out[i] += w * wh[j]
        heads.append(out)
    agg = torch.cat(heads, dim=-1) if layer.concat else torch.stack(heads).mean(0)
    return F.elu(agg)


def small_config(**kw):
    """A TrainConfig small enough for unit-test training runs."""
    from mdti.config import TrainConfig

    base = dict(
        dim=32, heads=2, road_layers=1, grid_layers=1, gat_heads=2, grid_gat_dim=8, d_lm=32,
        T_segments=4, K_patterns=4, batch_size=16, epochs=2, warmup_epochs=0, lr=1e-3, dropout=0.0,
    )
    base.update(kw)
    return TrainConfig(**base)
