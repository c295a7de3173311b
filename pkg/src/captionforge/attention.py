"""Scaled dot-product and multi-head attention, masks, and positional encodings.

Masks are additive: 0 where a key is visible, -inf where hidden. They
compose with the stable softmax in `numerics`, whose fully-masked rows
come out all-zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Tensor, matmul, reshape, softmax_lastdim, transpose

NEG_INF = float("-inf")


@dataclass
class MultiHeadParams:
    """Projection weights for one multi-head attention block.

    ``wq/wk/wv/wo`` are d_model x d_model; head h reads columns
    [h*d_k, (h+1)*d_k) of the q/k/v projections, so the storage is the
    concatenation of the per-head matrices.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        d_model = self.wq.shape[0]
        if d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by {self.n_heads} heads")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None):
    """softmax(q k^T / sqrt(d_k) + mask) v.

    q is [.., Tq, d_k], k is [.., Tk, d_k], v is [.., Tk, d_v]; leading
    axes broadcast. Returns (output [.., Tq, d_v], weights [.., Tq, Tk]).
    Each weights row sums to 1, or to 0 when fully masked.
    """
    d_k = q.shape[-1]
    if d_k == 0:
        raise ConfigError("attention requires d_k >= 1")
    scores = matmul(q, _swap_last2(k)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        scores = scores + mask
    weights = softmax_lastdim(scores)
    return matmul(weights, v), weights


def multi_head_attention(x_q: Tensor, x_kv: Tensor, p: MultiHeadParams, mask: Tensor | None = None) -> Tensor:
    """Project, attend per head, concatenate, and project back.

    Accepts [T, d_model] or [B, T, d_model] inputs; the mask must broadcast
    against the per-head score shape ([.., H, Tq, Tk]).
    """
    q = _split_heads(matmul(x_q, p.wq), p.n_heads)
    k = _split_heads(matmul(x_kv, p.wk), p.n_heads)
    v = _split_heads(matmul(x_kv, p.wv), p.n_heads)
    ctx, _ = scaled_dot_product_attention(q, k, v, mask)
    return matmul(_merge_heads(ctx), p.wo)


def _swap_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [.., T, d] -> [.., H, T, d_k]
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, n_heads, d // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # [.., H, T, d_k] -> [.., T, d]
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, axes)
    *lead, t, h, dk = x.shape
    return reshape(x, (*lead, t, h * dk))


def causal_mask(t: int) -> Tensor:
    """Lower-triangular-visible mask: entry (i, j) is 0 for j <= i, -inf beyond."""
    if t < 1:
        raise ConfigError("causal mask needs length >= 1")
    m = np.where(np.tri(t, dtype=bool), 0.0, NEG_INF)
    return Tensor(m)


def padding_mask(lengths, t_max: int) -> Tensor:
    """Hide key columns past each sequence's length, for every query.

    Returns a [B, 1, 1, t_max] additive mask that broadcasts over heads
    and query positions.
    """
    lengths = list(lengths)
    if any(n < 1 for n in lengths):
        raise ConfigError("empty sequence in padding mask")
    if any(n > t_max for n in lengths):
        raise ConfigError(f"sequence longer than t_max={t_max}")
    cols = np.arange(t_max)
    m = np.where(cols[None, :] < np.asarray(lengths)[:, None], 0.0, NEG_INF)
    return Tensor(m[:, None, None, :])


def sinusoidal_positions(t: int, d: int) -> Tensor:
    """Fixed sin/cos position table [t, d] at wavelengths 10000^(2i/d).

    Column 2i is sin(pos / 10000^(2i/d)) and column 2i+1 the matching cos;
    an odd final column carries the cosine channel of the last pair.
    """
    pos = np.arange(t, dtype=np.float64)[:, None]
    pairs = np.arange((d + 1) // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * pairs / d)[None, :]
    out = np.zeros((t, d))
    out[:, 0::2] = np.sin(angle[:, : (d + 1) // 2])
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    if d % 2 == 1:
        out[:, -1] = np.cos(angle[:, -1])
    return Tensor(out)
