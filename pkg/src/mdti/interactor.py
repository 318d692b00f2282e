"""Cross-modal interaction: road tokens query the fused grid sequence."""
from __future__ import annotations

import torch
from torch import Tensor, nn

from .nn import FeedForward, MultiHeadAttention


class RelativeOffsetBias(nn.Module):
    """Learnable ``b[clip(t_q - t_k, -K, K)]`` shared across heads, zero at init.

    Key positions are the grid row indices. Query positions default to the
    road row indices; passing ``q_pos`` (``[B, Lq]``) places each road token
    at the grid row covering the same moment instead, giving a ``[B, Lq, Lk]`` bias.
    """

    def __init__(self, max_offset: int = 8):
        super().__init__()
        self.max_offset = max_offset
        self.table = nn.Parameter(torch.zeros(2 * max_offset + 1))

    def forward(self, lq: int, lk: int, q_pos: Tensor | None = None) -> Tensor:
        if q_pos is None:
            q_pos = torch.arange(lq)
        offset = q_pos[..., :, None] - torch.arange(lk)
        return self.table[offset.clamp(-self.max_offset, self.max_offset) + self.max_offset]


def cross_attend(
    attn: MultiHeadAttention,
    x: Tensor,
    m: Tensor,
    bias: Tensor | None = None,
    key_mask: Tensor | None = None,
    need_weights: bool = False,
):
    """``softmax((X W_Q)(M W_K)^T / sqrt(d_k) + M_s)(M W_V)``, heads recombined by the output projection."""
    return attn(x, m, m, bias=bias, key_mask=key_mask, need_weights=need_weights)


class Interactor(nn.Module):
    """``X_hat = FFN(X + Attn(X, M))`` with a pre-norm residual FFN block."""

    def __init__(self, dim: int = 256, heads: int = 4, dropout: float = 0.1, max_offset: int = 8, ffn_dim=None):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.offset_bias = RelativeOffsetBias(max_offset)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: Tensor,
        m: Tensor,
        key_mask: Tensor | None = None,
        need_weights: bool = False,
        q_pos: Tensor | None = None,
    ):
        bias = self.offset_bias(x.shape[-2], m.shape[-2], q_pos).to(x.dtype)
        attended, weights = cross_attend(self.attn, x, m, bias, key_mask, need_weights=True)
        out = self.ffn(x + self.dropout(attended))
        return (out, weights) if need_weights else out
