"""Scaled dot-product, multi-head and spatial-reduction attention.

Token sequences carry their 2-D extent around as a TokenMap so that the
spatial reduction (and later the convolutional feed-forward) can fold tokens
back into a grid. All sequence operations accept arbitrary leading batch
axes; the canonical shapes below are written for the unbatched [N, D] case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .initializers import trunc_normal
from .tensor import DimensionError, Tensor


@dataclass
class TokenMap:
    """N = h*w tokens of width D, shaped [..., N, D], plus the grid extent."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.ndim < 2:
            raise DimensionError(f"token tensor must be at least [N, D], got {self.tokens.shape}")
        if self.n != self.h * self.w:
            raise DimensionError(
                f"token count {self.n} does not match extent {self.h}x{self.w}")

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class AttentionParams:
    """Projections for one spatial-reduction attention operator.

    The per-head query/key/value maps are packed into single [D, D] matrices
    and sliced per head via reshape; with reduction 1 the spatial-reduction
    projection and its norm are absent and the operator is plain multi-head
    self-attention.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    num_heads: int
    head_dim: int
    reduction: int
    ws: Tensor | None = None
    bs: Tensor | None = None
    sr_gamma: Tensor | None = None
    sr_beta: Tensor | None = None

    def __post_init__(self):
        d = self.num_heads * self.head_dim
        if self.wq.shape != (d, d):
            raise DimensionError(f"wq {self.wq.shape} does not match width {d}")
        has_sr = self.ws is not None
        if has_sr != (self.reduction > 1):
            raise DimensionError("spatial-reduction projection must be present exactly when reduction > 1")
        if has_sr and self.ws.shape != (d * self.reduction ** 2, d):
            raise DimensionError(f"ws {self.ws.shape} does not match width {d}, reduction {self.reduction}")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def create(cls, rng, num_heads: int, head_dim: int, reduction: int, dtype=np.float32) -> "AttentionParams":
        d = num_heads * head_dim
        def proj():
            return (T.tensor(trunc_normal(rng, (d, d)), requires_grad=True, dtype=dtype),
                    T.zeros((d,), requires_grad=True, dtype=dtype))
        wq, bq = proj()
        wk, bk = proj()
        wv, bv = proj()
        wo, bo = proj()
        ws = bs = sr_gamma = sr_beta = None
        if reduction > 1:
            ws = T.tensor(trunc_normal(rng, (d * reduction ** 2, d)), requires_grad=True, dtype=dtype)
            bs = T.zeros((d,), requires_grad=True, dtype=dtype)
            sr_gamma = T.tensor(np.ones(d), requires_grad=True, dtype=dtype)
            sr_beta = T.zeros((d,), requires_grad=True, dtype=dtype)
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, num_heads, head_dim, reduction,
                   ws, bs, sr_gamma, sr_beta)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.q.w", self.wq
        yield f"{prefix}.q.b", self.bq
        yield f"{prefix}.k.w", self.wk
        yield f"{prefix}.k.b", self.bk
        yield f"{prefix}.v.w", self.wv
        yield f"{prefix}.v.b", self.bv
        yield f"{prefix}.o.w", self.wo
        yield f"{prefix}.o.b", self.bo
        if self.ws is not None:
            yield f"{prefix}.sr.w", self.ws
            yield f"{prefix}.sr.b", self.bs
            yield f"{prefix}.sr_norm.g", self.sr_gamma
            yield f"{prefix}.sr_norm.b", self.sr_beta


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    Output rows are convex combinations of the rows of ``v``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    d = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """The row-stochastic weight matrix used by ``attention`` (for inspection)."""
    d = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.softmax(T.scale(T.matmul(q, kt), 1.0 / math.sqrt(d)), axis=-1)


def fold_blocks(tm: TokenMap, r: int) -> Tensor:
    """Group tokens into non-overlapping r x r blocks: [..., N, D] ->
    [..., N/r^2, r*r*D]."""
    if tm.h % r or tm.w % r:
        raise DimensionError(f"extent {tm.h}x{tm.w} not divisible by reduction {r}")
    x = tm.tokens
    lead = x.shape[:-2]
    d = tm.dim
    hb, wb = tm.h // r, tm.w // r
    x = T.reshape(x, lead + (hb, r, wb, r, d))
    nd = len(lead)
    x = T.transpose(x, tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return T.reshape(x, lead + (hb * wb, r * r * d))


def spatial_reduce(tm: TokenMap, params: AttentionParams) -> TokenMap:
    """Shrink the token grid by the reduction factor per axis: each r x r
    block is flattened, projected back to width D and layer-normed."""
    r = params.reduction
    if r == 1:
        return tm
    folded = fold_blocks(tm, r)
    proj = T.linear(folded, params.ws, params.bs)
    normed = T.layer_norm(proj, params.sr_gamma, params.sr_beta)
    return TokenMap(normed, tm.h // r, tm.w // r)


def _split_heads(x: Tensor, num_heads: int, head_dim: int) -> Tensor:
    # [..., N, D] -> [..., heads, N, head_dim]
    lead = x.shape[:-2]
    n = x.shape[-2]
    nd = len(lead)
    x = T.reshape(x, lead + (n, num_heads, head_dim))
    return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    # [..., heads, N, head_dim] -> [..., N, heads*head_dim]
    nd = x.ndim - 3
    heads, n, hd = x.shape[-3:]
    x = T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return T.reshape(x, x.shape[:-2] + (heads * hd,))


def sra_forward(tm: TokenMap, params: AttentionParams) -> TokenMap:
    """Spatial-reduction attention over a token map.

    Queries come from the full sequence; keys and values from the spatially
    reduced one. Head outputs are concatenated along channels (a reshape of
    the packed head axis) and passed through the output projection. Shape is
    preserved exactly.
    """
    if tm.dim != params.dim:
        raise DimensionError(f"token width {tm.dim} does not match attention width {params.dim}")
    reduced = spatial_reduce(tm, params)
    expected_kv = tm.n // params.reduction ** 2
    assert reduced.n == expected_kv, f"reduced length {reduced.n} != N/R^2 = {expected_kv}"

    q = _split_heads(T.linear(tm.tokens, params.wq, params.bq), params.num_heads, params.head_dim)
    k = _split_heads(T.linear(reduced.tokens, params.wk, params.bk), params.num_heads, params.head_dim)
    v = _split_heads(T.linear(reduced.tokens, params.wv, params.bv), params.num_heads, params.head_dim)
    out = _merge_heads(attention(q, k, v))
    out = T.linear(out, params.wo, params.bo)
    return TokenMap(out, tm.h, tm.w)
