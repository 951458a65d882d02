"""Convolutional feed-forward and the split-transform-merge group encoder.

A group encoder block applies C identical-topology encoder paths to the same
input and merges them with a single shortcut:

    y = x + sum_i path_i(x)

Each path is norm -> spatial-reduction attention -> norm -> conv feed-forward
with no internal residuals; the block-level shortcut is the only skip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, TokenMap, sra_forward
from .initializers import trunc_normal
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    """Structurally invalid block or model configuration."""


@dataclass
class ConvFFNParams:
    """Two linear maps around a 3x3 depthwise conv + GELU on the widened
    channels; hidden width is exactly expansion * dim."""

    fc1_w: Tensor
    fc1_b: Tensor
    dw_w: Tensor
    dw_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    expansion: int

    def __post_init__(self):
        d_in, hidden = self.fc1_w.shape
        if hidden != self.expansion * d_in:
            raise DimensionError(f"hidden width {hidden} != expansion {self.expansion} x {d_in}")
        if self.dw_w.shape != (hidden, 3, 3):
            raise DimensionError(f"depthwise kernel {self.dw_w.shape} does not match hidden width {hidden}")
        if self.fc2_w.shape != (hidden, d_in):
            raise DimensionError(f"fc2 {self.fc2_w.shape} does not map back to width {d_in}")

    @classmethod
    def create(cls, rng, dim: int, expansion: int, dtype=np.float32) -> "ConvFFNParams":
        hidden = expansion * dim
        return cls(
            fc1_w=T.tensor(trunc_normal(rng, (dim, hidden)), requires_grad=True, dtype=dtype),
            fc1_b=T.zeros((hidden,), requires_grad=True, dtype=dtype),
            dw_w=T.tensor(trunc_normal(rng, (hidden, 3, 3)), requires_grad=True, dtype=dtype),
            dw_b=T.zeros((hidden,), requires_grad=True, dtype=dtype),
            fc2_w=T.tensor(trunc_normal(rng, (hidden, dim)), requires_grad=True, dtype=dtype),
            fc2_b=T.zeros((dim,), requires_grad=True, dtype=dtype),
            expansion=expansion,
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.fc1.w", self.fc1_w
        yield f"{prefix}.fc1.b", self.fc1_b
        yield f"{prefix}.dw.w", self.dw_w
        yield f"{prefix}.dw.b", self.dw_b
        yield f"{prefix}.fc2.w", self.fc2_w
        yield f"{prefix}.fc2.b", self.fc2_b


@dataclass
class EncoderPathParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: ConvFFNParams

    @classmethod
    def create(cls, rng, num_heads: int, head_dim: int, reduction: int, expansion: int,
               dtype=np.float32) -> "EncoderPathParams":
        d = num_heads * head_dim
        return cls(
            ln1_g=T.tensor(np.ones(d), requires_grad=True, dtype=dtype),
            ln1_b=T.zeros((d,), requires_grad=True, dtype=dtype),
            attn=AttentionParams.create(rng, num_heads, head_dim, reduction, dtype=dtype),
            ln2_g=T.tensor(np.ones(d), requires_grad=True, dtype=dtype),
            ln2_b=T.zeros((d,), requires_grad=True, dtype=dtype),
            ffn=ConvFFNParams.create(rng, d, expansion, dtype=dtype),
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.ln1.g", self.ln1_g
        yield f"{prefix}.ln1.b", self.ln1_b
        yield from self.attn.named_tensors(f"{prefix}.attn")
        yield f"{prefix}.ln2.g", self.ln2_g
        yield f"{prefix}.ln2.b", self.ln2_b
        yield from self.ffn.named_tensors(f"{prefix}.ffn")


@dataclass
class GroupEncoderParams:
    paths: list[EncoderPathParams]

    def __post_init__(self):
        if not self.paths:
            raise ConfigError("group encoder needs at least one path")

    @classmethod
    def create(cls, rng, cardinality: int, num_heads: int, head_dim: int, reduction: int,
               expansion: int, dtype=np.float32) -> "GroupEncoderParams":
        if cardinality < 1:
            raise ConfigError(f"cardinality must be >= 1, got {cardinality}")
        return cls([EncoderPathParams.create(rng, num_heads, head_dim, reduction, expansion, dtype=dtype)
                    for _ in range(cardinality)])

    def named_tensors(self, prefix: str):
        for i, path in enumerate(self.paths):
            yield from path.named_tensors(f"{prefix}.path{i}")


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """[..., N, C] tokens -> [B, C, h, w] grid (leading axes flattened)."""
    lead = x.shape[:-2]
    c = x.shape[-1]
    if x.shape[-2] != h * w:
        raise DimensionError(f"token count {x.shape[-2]} does not form a {h}x{w} grid")
    x = T.reshape(x, lead + (h, w, c))
    nd = len(lead)
    x = T.transpose(x, tuple(range(nd)) + (nd + 2, nd, nd + 1))
    batch = 1
    for s in lead:
        batch *= s
    return T.reshape(x, (batch, c, h, w))


def grid_to_tokens(x: Tensor, lead: tuple) -> Tensor:
    """Inverse of :func:`tokens_to_grid` for the given leading shape."""
    _, c, h, w = x.shape
    x = T.transpose(x, (0, 2, 3, 1))
    return T.reshape(x, tuple(lead) + (h * w, c))


def conv_ffn_forward(tm: TokenMap, p: ConvFFNParams) -> TokenMap:
    """fc2(gelu(dwconv(grid(fc1(x))))): the depthwise conv runs on the widened
    channels folded back onto the token grid, in front of the GELU."""
    lead = tm.tokens.shape[:-2]
    hidden = T.linear(tm.tokens, p.fc1_w, p.fc1_b)
    grid = tokens_to_grid(hidden, tm.h, tm.w)
    grid = T.depthwise_conv2d(grid, p.dw_w, p.dw_b)
    hidden = grid_to_tokens(grid, lead)
    hidden = T.gelu(hidden)
    out = T.linear(hidden, p.fc2_w, p.fc2_b)
    return TokenMap(out, tm.h, tm.w)


def encoder_path_forward(tm: TokenMap, p: EncoderPathParams) -> TokenMap:
    """One transform path: pre-norm attention then pre-norm conv-FFN, with no
    internal shortcut (the single skip lives at the group merge)."""
    x = TokenMap(T.layer_norm(tm.tokens, p.ln1_g, p.ln1_b), tm.h, tm.w)
    x = sra_forward(x, p.attn)
    x = TokenMap(T.layer_norm(x.tokens, p.ln2_g, p.ln2_b), x.h, x.w)
    return conv_ffn_forward(x, p.ffn)


def group_encoder_forward(tm: TokenMap, p: GroupEncoderParams) -> TokenMap:
    """Split-transform-merge: y = x + sum of all path outputs.

    Paths are evaluated on the same input and summed in fixed path order, so
    the result is independent of any evaluation schedule.
    """
    if not p.paths:
        raise ConfigError("group encoder needs at least one path")
    acc = tm.tokens
    for path in p.paths:
        acc = T.add(acc, encoder_path_forward(tm, path).tokens)
    return TokenMap(acc, tm.h, tm.w)
