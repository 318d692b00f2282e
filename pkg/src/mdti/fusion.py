"""Inject GPS semantic embeddings into the grid token sequence.

Projection into the grid latent space, length alignment (keep the prefix when
too long, zero-pad when too short), then residual addition on the segment
tokens. The [CLS] row is never touched.
"""
from __future__ import annotations

import torch
from torch import Tensor, nn

from .errors import ShapeError


def project_gps(z: Tensor, proj: nn.Linear) -> Tensor:
    return proj(z)


def align_length(z: Tensor, T: int) -> tuple[Tensor, Tensor]:
    """Truncate or zero-pad ``[n, D]`` to ``[T, D]``; the mask is True on padded slots."""
    n = z.shape[0]
    if n >= T:
        return z[:T], torch.zeros(T, dtype=torch.bool)
    pad = z.new_zeros(T - n, z.shape[1])
    mask = torch.arange(T) >= n
    return torch.cat([z, pad], dim=0), mask


def align_batch(z: Tensor, lengths: Tensor, T: int) -> tuple[Tensor, Tensor]:
    """Batched :func:`align_length` on ``[B, n_max, D]`` padded input with true ``lengths``."""
    b, n, d = z.shape
    valid = torch.arange(n)[None, :] < lengths[:, None]
    z = z * valid[..., None].to(z.dtype)
    if n < T:
        z = torch.cat([z, z.new_zeros(b, T - n, d)], dim=1)
    return z[:, :T], torch.arange(T)[None, :] >= lengths[:, None]


def residual_fuse(grid: Tensor, z: Tensor) -> Tensor:
    """``grid[..., t, :] + z[..., t-1, :]`` for ``t >= 1``; row 0 ([CLS]) passes through."""
    if grid.shape[-2] != z.shape[-2] + 1 or grid.shape[-1] != z.shape[-1] or grid.shape[:-2] != z.shape[:-2]:
        raise ShapeError(f"cannot fuse grid {tuple(grid.shape)} with GPS sequence {tuple(z.shape)}")
    return torch.cat([grid[..., :1, :], grid[..., 1:, :] + z], dim=-2)


class FusionAlign(nn.Module):
    def __init__(self, d_lm: int, dim: int, segments: int):
        super().__init__()
        self.proj = nn.Linear(d_lm, dim)
        self.segments = segments

    def forward(self, grid: Tensor, z: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """Return the fused ``[B, T+1, D]`` sequence and the GPS pad mask ``[B, T]``."""
        aligned, pad = align_batch(project_gps(z, self.proj), lengths, self.segments)
        return residual_fuse(grid, aligned), pad
