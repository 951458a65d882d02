"""Four-stage pyramid assembly: patch embedding, position embedding, stacked
group encoders, classification head, and the parameter audit.

Stage hyperparameters follow the published architecture table: patch sizes
(4, 2, 2, 2), head counts (1, 2, 5, 8), feed-forward expansions (8, 8, 4, 4)
and attention reductions (8, 4, 2, 1), with stage width = heads * head_dim.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import TokenMap, fold_blocks
from .blocks import ConfigError, GroupEncoderParams, group_encoder_forward
from .initializers import trunc_normal
from .tensor import DimensionError, Tensor

STAGE_PATCH = (4, 2, 2, 2)
STAGE_HEADS = (1, 2, 5, 8)
STAGE_EXPANSION = (8, 8, 4, 4)
STAGE_REDUCTION = (8, 4, 2, 1)
TOTAL_STRIDE = 32  # product of the per-stage patch strides


@dataclass(frozen=True)
class StageSpec:
    patch_size: int
    channels: int
    num_heads: int
    expansion: int
    reduction: int
    depth: int

    def __post_init__(self):
        if self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


@dataclass(frozen=True)
class ModelConfig:
    name: str
    depths: tuple[int, int, int, int]
    paths: int
    head_dim: int
    num_classes: int = 10
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 3

    def __post_init__(self):
        h, w = self.input_size
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ConfigError(f"input size {h}x{w} must be divisible by {TOTAL_STRIDE}")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be four positive ints, got {self.depths}")
        if self.paths < 1:
            raise ConfigError(f"paths must be >= 1, got {self.paths}")

    def stage_specs(self) -> list[StageSpec]:
        return [
            StageSpec(STAGE_PATCH[i], self.head_dim * STAGE_HEADS[i], STAGE_HEADS[i],
                      STAGE_EXPANSION[i], STAGE_REDUCTION[i], self.depths[i])
            for i in range(4)
        ]

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.head_dim * h for h in STAGE_HEADS)


# The five named variants; reference totals are the reported parameter counts
# they are audited against.
VARIANTS: dict[str, ModelConfig] = {
    "APVT-8-2x-a": ModelConfig("APVT-8-2x-a", (2, 2, 2, 2), paths=2, head_dim=32),
    "APVT-8-2x-b": ModelConfig("APVT-8-2x-b", (2, 2, 2, 2), paths=2, head_dim=64),
    "APVT-16-2x-b": ModelConfig("APVT-16-2x-b", (3, 4, 6, 3), paths=2, head_dim=64),
    "APVT-8-4x-a": ModelConfig("APVT-8-4x-a", (2, 2, 2, 2), paths=3, head_dim=32),
    "APVT-16-4x-a": ModelConfig("APVT-16-4x-a", (3, 4, 6, 3), paths=3, head_dim=32),
}

REFERENCE_PARAMS = {
    "APVT-8-2x-a": 5.52e6,
    "APVT-8-2x-b": 22.88e6,
    "APVT-16-2x-b": 42.15e6,
    "APVT-8-4x-a": 8.16e6,
    "APVT-16-4x-a": 15.48e6,
}


def variant_config(name: str, **overrides) -> ModelConfig:
    canonical = {k.lower(): k for k in VARIANTS}
    key = name.strip().lower()
    if key not in canonical:
        raise ConfigError(f"unknown variant {name!r}; known: {', '.join(sorted(VARIANTS))}")
    cfg = VARIANTS[canonical[key]]
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


@dataclass
class PatchEmbedParams:
    w: Tensor
    b: Tensor
    norm_g: Tensor
    norm_b: Tensor
    patch_size: int

    @classmethod
    def create(cls, rng, in_channels: int, patch_size: int, out_channels: int, dtype=np.float32):
        flat = in_channels * patch_size * patch_size
        return cls(
            w=T.tensor(trunc_normal(rng, (flat, out_channels)), requires_grad=True, dtype=dtype),
            b=T.zeros((out_channels,), requires_grad=True, dtype=dtype),
            norm_g=T.tensor(np.ones(out_channels), requires_grad=True, dtype=dtype),
            norm_b=T.zeros((out_channels,), requires_grad=True, dtype=dtype),
            patch_size=patch_size,
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.norm.g", self.norm_g
        yield f"{prefix}.norm.b", self.norm_b


@dataclass
class StageParams:
    patch: PatchEmbedParams
    pos: Tensor
    pos_extent: tuple[int, int]
    blocks: list[GroupEncoderParams]

    def named_tensors(self, prefix: str):
        yield from self.patch.named_tensors(f"{prefix}.patch")
        yield f"{prefix}.pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named_tensors(f"{prefix}.block{i}")


@dataclass
class Model:
    cfg: ModelConfig
    stages: list[StageParams]
    norm_g: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor
    dtype: np.dtype = np.dtype(np.float32)
    _registry: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def named_parameters(self):
        """(name, tensor) pairs in stable registration order."""
        return list(self._registry.items())

    def parameters(self) -> list[Tensor]:
        return list(self._registry.values())

    def named_tensors(self):
        for i, st in enumerate(self.stages):
            yield from st.named_tensors(f"stage{i + 1}")
        yield "norm.g", self.norm_g
        yield "norm.b", self.norm_b
        yield "head.w", self.head_w
        yield "head.b", self.head_b


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Initialize all learnable tensors deterministically from ``seed``.

    Projection weights are truncated-normal (std 0.02); biases and position
    grids start at zero, norm affines at identity.
    """
    rng = np.random.default_rng(seed)
    h, w = cfg.input_size
    in_ch = cfg.in_channels
    stages = []
    for spec in cfg.stage_specs():
        h //= spec.patch_size
        w //= spec.patch_size
        patch = PatchEmbedParams.create(rng, in_ch, spec.patch_size, spec.channels, dtype=dtype)
        pos = T.zeros((h * w, spec.channels), requires_grad=True, dtype=dtype)
        blocks = [
            GroupEncoderParams.create(rng, cfg.paths, spec.num_heads, spec.head_dim,
                                      spec.reduction, spec.expansion, dtype=dtype)
            for _ in range(spec.depth)
        ]
        stages.append(StageParams(patch, pos, (h, w), blocks))
        in_ch = spec.channels

    d4 = cfg.stage_widths()[-1]
    model = Model(
        cfg=cfg,
        stages=stages,
        norm_g=T.tensor(np.ones(d4), requires_grad=True, dtype=dtype),
        norm_b=T.zeros((d4,), requires_grad=True, dtype=dtype),
        head_w=T.tensor(trunc_normal(rng, (d4, cfg.num_classes)), requires_grad=True, dtype=dtype),
        head_b=T.zeros((cfg.num_classes,), requires_grad=True, dtype=dtype),
        dtype=np.dtype(dtype),
    )
    for name, t in model.named_tensors():
        if name in model._registry:
            raise ConfigError(f"duplicate parameter name {name!r}")
        model._registry[name] = t
    return model


def patch_embed_forward(tm: TokenMap, p: PatchEmbedParams) -> TokenMap:
    """Flatten non-overlapping P x P patches and project to the stage width,
    then layer-norm. The extent shrinks by P per axis."""
    ps = p.patch_size
    if tm.h % ps or tm.w % ps:
        raise DimensionError(
            f"extent {tm.h}x{tm.w} not divisible by patch size {ps}")
    folded = fold_blocks(tm, ps)   # [..., N/P^2, P*P*C]
    if folded.shape[-1] != p.w.shape[0]:
        raise DimensionError(
            f"patch vector width {folded.shape[-1]} does not match embedding {p.w.shape}")
    x = T.linear(folded, p.w, p.b)
    x = T.layer_norm(x, p.norm_g, p.norm_b)
    return TokenMap(x, tm.h // ps, tm.w // ps)


@functools.lru_cache(maxsize=16)
def _bilinear_matrix(h0: int, w0: int, h: int, w: int, dtype) -> np.ndarray:
    """Row-stochastic [h*w, h0*w0] interpolation weights (edge-clamped)."""

    def axis_weights(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        lo_c = np.clip(lo, 0, n_in - 1)
        hi_c = np.clip(lo + 1, 0, n_in - 1)
        return lo_c, hi_c, frac

    ri0, ri1, rf = axis_weights(h0, h)
    ci0, ci1, cf = axis_weights(w0, w)
    m = np.zeros((h * w, h0 * w0), dtype=np.dtype(dtype))
    for i in range(h):
        for j in range(w):
            row = i * w + j
            for si, wi in ((ri0[i], 1 - rf[i]), (ri1[i], rf[i])):
                for sj, wj in ((ci0[j], 1 - cf[j]), (ci1[j], cf[j])):
                    m[row, si * w0 + sj] += wi * wj
    m.setflags(write=False)
    return m


def position_embed(tm: TokenMap, grid: Tensor, grid_extent: tuple[int, int]) -> TokenMap:
    """Add the learned position grid, bilinearly resampled when the token
    extent differs from the grid's native extent."""
    if grid.shape[-1] != tm.dim:
        raise DimensionError(f"position grid width {grid.shape} does not match tokens {tm.dim}")
    h0, w0 = grid_extent
    if (h0, w0) == (tm.h, tm.w):
        resized = grid
    else:
        m = T.tensor(_bilinear_matrix(h0, w0, tm.h, tm.w, grid.dtype), dtype=grid.dtype)
        resized = T.matmul(m, grid)
    return TokenMap(T.add(tm.tokens, resized), tm.h, tm.w)


def image_token_map(images) -> TokenMap:
    """[B, C, H, W] (or [C, H, W]) image array/tensor as a C-channel TokenMap."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"images must be [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    x = T.transpose(x, (0, 2, 3, 1))
    return TokenMap(T.reshape(x, (b, h * w, c)), h, w)


def forward(model: Model, images, mode: str = "classify"):
    """Run the pyramid. ``classify`` returns [B, num_classes] logits;
    ``features`` returns the four per-stage token maps (strides 4/8/16/32)."""
    if mode not in ("classify", "features"):
        raise ValueError(f"mode must be 'classify' or 'features', got {mode!r}")
    tm = image_token_map(np.asarray(images, dtype=model.dtype) if not isinstance(images, Tensor) else images)
    if tm.h % TOTAL_STRIDE or tm.w % TOTAL_STRIDE:
        raise DimensionError(f"input extent {tm.h}x{tm.w} must be divisible by {TOTAL_STRIDE}")
    feats = []
    for st in model.stages:
        tm = patch_embed_forward(tm, st.patch)
        tm = position_embed(tm, st.pos, st.pos_extent)
        for blk in st.blocks:
            tm = group_encoder_forward(tm, blk)
        feats.append(tm)
    if mode == "features":
        return feats
    x = T.layer_norm(tm.tokens, model.norm_g, model.norm_b)
    pooled = T.mean(x, axis=-2)
    return T.linear(pooled, model.head_w, model.head_b)


@dataclass
class ParamAudit:
    total: int
    by_component: dict[str, int]

    def format(self) -> str:
        lines = [f"{'component':28} {'params':>12}"]
        for name, count in self.by_component.items():
            lines.append(f"{name:28} {count:12,}")
        lines.append(f"{'total':28} {self.total:12,}  ({self.total / 1e6:.2f}M)")
        return "\n".join(lines)


def count_parameters(model: Model) -> ParamAudit:
    """Exact learnable-scalar totals, broken down by stage and component."""
    by: dict[str, int] = {}
    for name, t in model.named_parameters():
        parts = name.split(".")
        if parts[0].startswith("stage"):
            kind = parts[1]
            if kind.startswith("block"):
                kind = "encoders"
            key = f"{parts[0]}.{kind}"
        else:
            key = parts[0]
        by[key] = by.get(key, 0) + t.size
    total = sum(t.size for _, t in model.named_parameters())
    return ParamAudit(total=total, by_component=by)
