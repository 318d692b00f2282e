"""Differentiable building blocks shared by every encoder.

Autograd and kernels come from torch; this module adds the shape contracts,
the masked softmax used by every attention variant, the graph attention
layer, and a finite-difference gradient checker that is independent of
autograd.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

NEG_SLOPE = 0.2


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` laid out as ``[d_in, d_out]``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear: bias {tuple(bias.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    y = x @ weight
    return y + bias if bias is not None else y


def masked_softmax(scores: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a position is valid.

    Masked positions come out as exact zeros. A row with no valid position has
    no defined distribution and raises.
    """
    if mask is None:
        return torch.softmax(scores, dim=-1)
    mask = torch.broadcast_to(mask, scores.shape)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("masked_softmax: a row has every position masked")
    weights = torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
    return weights.masked_fill(~mask, 0.0)


def _expand_bias(bias: Tensor, lq: int, lk: int) -> Tensor:
    if bias.shape[-2:] != (lq, lk):
        raise ShapeError(f"attention bias {tuple(bias.shape)} does not end in ({lq}, {lk})")
    if bias.dim() == 2:
        return bias[None, None]
    if bias.dim() == 3:
        return bias[:, None]
    return bias


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Tensor | None = None,
    key_mask: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Per-head attention on ``[B, H, L, d]`` tensors.

    ``bias`` is added to the scaled scores before the softmax; ``key_mask`` is
    ``[B, Lk]`` with True on valid keys.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + _expand_bias(bias, q.shape[-2], k.shape[-2])
    mask = None if key_mask is None else key_mask[:, None, None, :]
    weights = masked_softmax(scores, mask)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention with an additive pre-softmax bias.

    Projections carry no bias term, so a single valid key yields exactly the
    projected value row and zero inputs give zero outputs.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.dropout = nn.Dropout(dropout)

    def split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        bias: Tensor | None = None,
        key_mask: Tensor | None = None,
        need_weights: bool = False,
    ):
        unbatched = query.dim() == 2
        if unbatched:
            query, key, value = query[None], key[None], value[None]
            if key_mask is not None:
                key_mask = key_mask[None]
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.shape[-1] != self.dim:
                raise ShapeError(f"{name} width {t.shape[-1]} != attention dim {self.dim}")
        q = self.split(self.q_proj(query))
        k = self.split(self.k_proj(key))
        v = self.split(self.v_proj(value))
        out, weights = scaled_dot_product_attention(q, k, v, bias, key_mask)
        out = self.dropout(out)
        b, _, lq, _ = out.shape
        out = self.out_proj(out.transpose(1, 2).reshape(b, lq, self.dim))
        if unbatched:
            out, weights = out[0], weights[0]
        return (out, weights) if need_weights else out


def multi_head_attention(
    attn: MultiHeadAttention,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Tensor | None = None,
    key_mask: Tensor | None = None,
) -> Tensor:
    return attn(q, k, v, bias=bias, key_mask=key_mask)


class FeedForward(nn.Module):
    """Pre-norm residual position-wise MLP: ``x + W2 gelu(W1 LN(x))``."""

    def __init__(self, dim: int, hidden: int | None = None, dropout: float = 0.0):
        super().__init__()
        hidden = hidden or 4 * dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.dropout(self.fc2(self.dropout(F.gelu(self.fc1(self.norm(x))))))


class EncoderLayer(nn.Module):
    """Pre-norm Transformer encoder layer accepting an additive attention bias."""

    def __init__(self, dim: int, heads: int, ffn_dim: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_mask: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
        h = self.norm(x)
        x = x + self.dropout(self.attn(h, h, h, bias=bias, key_mask=key_mask))
        return self.ffn(x)


class GATLayer(nn.Module):
    """Dense graph attention layer.

    ``adj[..., i, j]`` is True when node ``i`` aggregates from node ``j``; the
    caller guarantees self-loops. Heads are concatenated (``concat=True``,
    ``out_dim`` split across heads) or averaged (each head ``out_dim`` wide).
    The ELU nonlinearity is applied to the aggregated result.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int = 4,
        concat: bool = True,
        dropout: float = 0.0,
        activation: bool = True,
    ):
        super().__init__()
        if concat and out_dim % heads:
            raise ConfigError(f"out_dim {out_dim} is not divisible by heads {heads}")
        self.heads = heads
        self.concat = concat
        self.head_dim = out_dim // heads if concat else out_dim
        self.weight = nn.Linear(in_dim, heads * self.head_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        self.dropout = nn.Dropout(dropout)
        self.activation = activation
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)

    def attention(self, h: Tensor, adj: Tensor) -> tuple[Tensor, Tensor]:
        """Return the transformed features ``[B, H, n, d]`` and weights ``[B, H, n, n]``."""
        b, n, _ = h.shape
        wh = self.weight(h).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        # a^T [Wh_i || Wh_j] split into the centre-node and neighbour halves
        e_i = (wh * self.att_src[None, :, None, :]).sum(-1)
        e_j = (wh * self.att_dst[None, :, None, :]).sum(-1)
        scores = F.leaky_relu(e_i[..., :, None] + e_j[..., None, :], NEG_SLOPE)
        return wh, masked_softmax(scores, adj[:, None])

    def attention_sparse(self, h: Tensor, index: Tensor, valid: Tensor) -> tuple[Tensor, Tensor]:
        """Neighbour-list form: ``index[b, i, k]`` names the k-th neighbour of node i.

        Returns gathered neighbour features ``[B, n, K, H, d]`` and weights ``[B, n, H, K]``.
        """
        b, n, _ = h.shape
        k = index.shape[-1]
        wh = self.weight(h).view(b, n, self.heads, self.head_dim)
        e_i = (wh * self.att_src).sum(-1)  # [B, n, H]
        e_j = (wh * self.att_dst).sum(-1)
        flat = index.reshape(b, n * k)
        e_nbr = torch.gather(e_j, 1, flat[..., None].expand(-1, -1, self.heads)).view(b, n, k, self.heads)
        scores = F.leaky_relu(e_i[:, :, None, :] + e_nbr, NEG_SLOPE).transpose(2, 3)
        alpha = masked_softmax(scores, valid[:, :, None, :])
        wh_nbr = torch.gather(wh, 1, flat[..., None, None].expand(-1, -1, self.heads, self.head_dim))
        return wh_nbr.view(b, n, k, self.heads, self.head_dim), alpha

    def forward(self, h: Tensor, adj: Tensor | tuple[Tensor, Tensor], need_weights: bool = False):
        """``adj`` is a dense boolean ``[.., n, n]`` matrix or a ``(index, valid)`` neighbour list."""
        unbatched = h.dim() == 2
        if unbatched:
            h = h[None]
            adj = tuple(a[None] for a in adj) if isinstance(adj, tuple) else adj[None]
        if isinstance(adj, tuple):
            wh_nbr, alpha = self.attention_sparse(h, *adj)
            out = torch.einsum("bnhk,bnkhd->bnhd", self.dropout(alpha), wh_nbr)
        else:
            if adj.shape[-2:] != (h.shape[1], h.shape[1]):
                raise ShapeError(f"adjacency {tuple(adj.shape)} does not match {h.shape[1]} nodes")
            wh, alpha = self.attention(h, adj)
            out = (self.dropout(alpha) @ wh).transpose(1, 2)
        if self.concat:
            out = out.reshape(h.shape[0], h.shape[1], -1)
        else:
            out = out.mean(dim=2)
        if self.activation:
            out = F.elu(out)
        if unbatched:
            out, alpha = out[0], alpha[0]
        return (out, alpha) if need_weights else out


def gradcheck(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``f`` maps the parameter mapping to a scalar; parameters are perturbed in
    place, so closures over module parameters work too. Per parameter tensor
    the error is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    leaves = {}
    for name, p in params.items():
        if not p.requires_grad:
            p.requires_grad_(True)
        leaves[name] = p
    out = f(params)
    if out.numel() != 1 or not torch.isfinite(out).all():
        raise FloatingPointError(f"gradcheck: f returned a non-finite or non-scalar value {out}")
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for (name, p), g in zip(leaves.items(), grads):
            analytic = torch.zeros_like(p) if g is None else g.detach()
            numeric = torch.zeros_like(p)
            flat, nflat = p.data.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f(params)
                flat[i] = orig - eps
                lo = f(params)
                flat[i] = orig
                if not (torch.isfinite(hi) and torch.isfinite(lo)):
                    raise FloatingPointError(f"gradcheck: non-finite f while perturbing {name}[{i}]")
                nflat[i] = (hi - lo).item() / (2 * eps)
            scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
            worst = max(worst, (analytic - numeric).abs().max().item() / scale)
    return worst
