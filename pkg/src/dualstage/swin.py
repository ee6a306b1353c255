"""Second-stage feature extractor: hierarchical windowed attention.

Tokens live on a square grid. Each stage alternates window attention with
shifted-window attention (cyclic roll + region mask), then halves the grid
and doubles the channels via patch merging. Attention logits optionally get
a learnable per-head relative-position bias. The final token set is
normalized and mean-pooled, like the first-stage encoder.

The shift is skipped for a stage whose grid is not larger than the window:
with a single window there is nothing for a shift to connect, it would only
mask region pairs (and starve most relative-bias offsets of gradient).

Masking uses exact -inf so masked attention weights are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import init
from .errors import ConfigError
from .tensor import Tensor, add, gap, layer_norm, matmul, reshape, transpose
from .vit import (
    LAYER_NORM_EPS,
    AttentionParams,
    MlpParams,
    init_attention,
    init_mlp,
    mhsa,
    mlp,
    patchify,
)


@dataclass(frozen=True)
class SwinConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 24  # stage-0 channels; doubles at every merge
    depths: tuple[int, ...] = (2, 2)
    num_heads: tuple[int, ...] = (3, 6)
    window_size: int = 4
    use_relative_bias: bool = True
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))
        if self.image_size <= 0 or self.patch_size <= 0 or self.window_size <= 0:
            raise ConfigError("swin: sizes must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"swin: image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not self.depths:
            raise ConfigError("swin: need at least one stage")
        if len(self.num_heads) != len(self.depths):
            raise ConfigError("swin: num_heads must list one entry per stage")
        if any(d <= 0 or d % 2 for d in self.depths):
            raise ConfigError(f"swin: stage depths must be positive and even, got {self.depths}")
        for s in range(len(self.depths)):
            grid = self.grid_at(s)
            if grid <= 0 or grid % self.window_size:
                raise ConfigError(
                    f"swin: stage {s} grid {grid} not divisible by window {self.window_size}"
                )
            dim = self.dim_at(s)
            if dim % self.num_heads[s]:
                raise ConfigError(
                    f"swin: stage {s} channels {dim} not divisible by {self.num_heads[s]} heads"
                )
        if self.mlp_ratio <= 0:
            raise ConfigError("swin: mlp_ratio must be positive")

    @property
    def shift(self) -> int:
        return self.window_size // 2

    def grid_at(self, stage: int) -> int:
        return (self.image_size // self.patch_size) // (2**stage)

    def dim_at(self, stage: int) -> int:
        return self.embed_dim * (2**stage)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def out_dim(self) -> int:
        return self.dim_at(self.num_stages - 1)

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass
class SwinBlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    attn: AttentionParams
    bias_table: Tensor | None  # [(2W-1)^2, heads], indexed by in-window offsets
    norm2_g: Tensor
    norm2_b: Tensor
    mlp: MlpParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "norm1_g", self.norm1_g
        yield "norm1_b", self.norm1_b
        for n, p in self.attn.named_parameters():
            yield f"attn.{n}", p
        if self.bias_table is not None:
            yield "bias_table", self.bias_table
        yield "norm2_g", self.norm2_g
        yield "norm2_b", self.norm2_b
        for n, p in self.mlp.named_parameters():
            yield f"mlp.{n}", p


@dataclass
class MergeParams:
    norm_g: Tensor   # over concatenated 4C channels
    norm_b: Tensor
    reduction: Tensor  # [4C, 2C], no bias

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b
        yield "reduction", self.reduction


@dataclass
class SwinStageParams:
    blocks: list[SwinBlockParams]
    merge: MergeParams | None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            for n, p in blk.named_parameters():
                yield f"blocks.{i}.{n}", p
        if self.merge is not None:
            for n, p in self.merge.named_parameters():
                yield f"merge.{n}", p


@dataclass
class SwinParams:
    patch_w: Tensor
    patch_b: Tensor
    stages: list[SwinStageParams] = field(default_factory=list)
    norm_g: Tensor = None
    norm_b: Tensor = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        for i, st in enumerate(self.stages):
            for n, p in st.named_parameters():
                yield f"stages.{i}.{n}", p
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b


def init_swin(config: SwinConfig, seed: int, dtype=np.float32) -> SwinParams:
    c0 = config.embed_dim
    w = config.window_size
    stages = []
    for s, depth in enumerate(config.depths):
        dim = config.dim_at(s)
        hidden = int(config.mlp_ratio * dim)
        blocks = []
        for i in range(depth):
            prefix = f"swin.stages.{s}.blocks.{i}"
            blocks.append(
                SwinBlockParams(
                    norm1_g=init.ones((dim,), dtype),
                    norm1_b=init.zeros((dim,), dtype),
                    attn=init_attention(seed, f"{prefix}.attn", dim, dtype),
                    bias_table=(
                        init.zeros(((2 * w - 1) ** 2, config.num_heads[s]), dtype)
                        if config.use_relative_bias
                        else None
                    ),
                    norm2_g=init.ones((dim,), dtype),
                    norm2_b=init.zeros((dim,), dtype),
                    mlp=init_mlp(seed, f"{prefix}.mlp", dim, hidden, dtype),
                )
            )
        merge = None
        if s + 1 < config.num_stages:
            merge = MergeParams(
                norm_g=init.ones((4 * dim,), dtype),
                norm_b=init.zeros((4 * dim,), dtype),
                reduction=init.xavier(
                    seed, f"swin.stages.{s}.merge.reduction", (4 * dim, 2 * dim), 4 * dim, 2 * dim, dtype
                ),
            )
        stages.append(SwinStageParams(blocks=blocks, merge=merge))
    return SwinParams(
        patch_w=init.xavier(seed, "swin.patch_w", (config.patch_dim, c0), config.patch_dim, c0, dtype),
        patch_b=init.zeros((c0,), dtype),
        stages=stages,
        norm_g=init.ones((config.out_dim,), dtype),
        norm_b=init.zeros((config.out_dim,), dtype),
    )


def window_partition(x: Tensor, window_size: int) -> Tensor:
    """[..., G, G, C] -> [..., (G/W)^2, W*W, C], row-major tiles, row-major tokens."""
    shp = x.data.shape
    if len(shp) < 3 or shp[-3] != shp[-2]:
        raise ConfigError(f"window_partition: expected square grid [..., G, G, C], got {shp}")
    g, c = shp[-2], shp[-1]
    w = window_size
    if g % w:
        raise ConfigError(f"window_partition: grid {g} not divisible by window {w}")
    lead = shp[:-3]
    nl = len(lead)
    t = reshape(x, lead + (g // w, w, g // w, w, c))
    t = transpose(t, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return reshape(t, lead + ((g // w) ** 2, w * w, c))


def window_reverse(windows: Tensor, window_size: int, grid: int) -> Tensor:
    """Exact inverse of window_partition."""
    shp = windows.data.shape
    w = window_size
    g = grid
    if len(shp) < 3 or shp[-2] != w * w or shp[-3] != (g // w) ** 2 or g % w:
        raise ConfigError(
            f"window_reverse: got {shp}, incompatible with grid {g} and window {w}"
        )
    lead = shp[:-3]
    nl = len(lead)
    c = shp[-1]
    t = reshape(windows, lead + (g // w, g // w, w, w, c))
    t = transpose(t, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return reshape(t, lead + (g, g, c))


def cyclic_shift(x: Tensor, offset: int) -> Tensor:
    """Torus roll of the token grid by (-offset, -offset); negate to invert."""
    g = x.data.shape[-2]
    if abs(offset) >= g:
        raise ConfigError(f"cyclic_shift: |offset| {abs(offset)} must be < grid {g}")
    return _roll(x, offset)


def _roll(x: Tensor, offset: int) -> Tensor:
    from .tensor import roll_grid

    nd = x.data.ndim
    return roll_grid(x, -offset, -offset, (nd - 3, nd - 2))


@lru_cache(maxsize=None)
def _shift_mask_np(grid: int, window_size: int, shift: int) -> np.ndarray:
    g, w = grid, window_size
    num_windows = (g // w) ** 2
    if shift == 0:
        return np.zeros((num_windows, w * w, w * w))
    # label the shifted grid with the 3x3 region partition induced by the
    # shift boundaries; pairs from different regions must not attend
    labels = np.zeros((g, g))
    cnt = 0
    spans = (slice(0, g - w), slice(g - w, g - shift), slice(g - shift, g))
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = cnt
            cnt += 1
    win = (
        labels.reshape(g // w, w, g // w, w)
        .transpose(0, 2, 1, 3)
        .reshape(num_windows, w * w)
    )
    differs = win[:, :, None] != win[:, None, :]
    return np.where(differs, -np.inf, 0.0)


@lru_cache(maxsize=None)
def _shift_mask_cast(grid: int, window_size: int, shift: int, dtype_name: str) -> np.ndarray:
    arr = _shift_mask_np(grid, window_size, shift).astype(dtype_name)
    arr.setflags(write=False)
    return arr


def build_shift_mask(grid: int, window_size: int, shift: int, dtype=np.float64) -> Tensor:
    """Additive attention mask [(G/W)^2, W*W, W*W] with entries 0 or -inf."""
    if grid % window_size:
        raise ConfigError(f"build_shift_mask: grid {grid} not divisible by window {window_size}")
    if not 0 <= shift < window_size:
        raise ConfigError(f"build_shift_mask: shift {shift} must be in [0, {window_size})")
    return Tensor(_shift_mask_cast(grid, window_size, shift, np.dtype(dtype).name))


@lru_cache(maxsize=None)
def _bias_gather_np(window_size: int) -> np.ndarray:
    """One-hot gather matrix [W^4, (2W-1)^2] mapping token pairs to offset ids.

    Expressing the bias lookup as (one-hot @ table) keeps it inside matmul,
    so the table gets its scatter-add gradient for free.
    """
    w = window_size
    n = w * w
    span = 2 * w - 1
    coords = [(i, j) for i in range(w) for j in range(w)]
    hot = np.zeros((n * n, span * span))
    for a, (ia, ja) in enumerate(coords):
        for b, (ib, jb) in enumerate(coords):
            idx = (ia - ib + w - 1) * span + (ja - jb + w - 1)
            hot[a * n + b, idx] = 1.0
    return hot


@lru_cache(maxsize=None)
def _bias_gather_cast(window_size: int, dtype_name: str) -> np.ndarray:
    arr = _bias_gather_np(window_size).astype(dtype_name)
    arr.setflags(write=False)
    return arr


def relative_bias(table: Tensor, window_size: int) -> Tensor:
    """Expand a [(2W-1)^2, heads] table to per-head logits [heads, W^2, W^2]."""
    n = window_size * window_size
    hot = Tensor(_bias_gather_cast(window_size, table.data.dtype.name))
    flat = matmul(hot, table)  # [n*n, heads]
    per_pair = reshape(flat, (n, n, table.data.shape[-1]))
    return transpose(per_pair, (2, 0, 1))


def window_attention(
    x: Tensor,
    params: SwinBlockParams,
    num_heads: int,
    window_size: int,
    shift: int,
) -> Tensor:
    """Windowed MHSA over a [..., G, G, C] grid; shift > 0 rolls and masks."""
    g = x.data.shape[-2]
    w = window_size
    if shift:
        x = _roll(x, shift)
    windows = window_partition(x, w)
    mask = None
    if shift:
        m = build_shift_mask(g, w, shift, dtype=x.data.dtype)
        mask = reshape(m, (m.data.shape[0], 1, w * w, w * w))  # broadcast over heads
    bias = None
    if params.bias_table is not None:
        bias = relative_bias(params.bias_table, w)
    out = mhsa(windows, params.attn, num_heads, mask=mask, bias=bias)
    out = window_reverse(out, w, g)
    if shift:
        out = _roll(out, -shift)
    return out


def swin_block(
    x: Tensor,
    params: SwinBlockParams,
    num_heads: int,
    window_size: int,
    shift: int,
    shifted: bool,
) -> Tensor:
    """Pre-norm residual block around window attention and the MLP."""
    h = layer_norm(x, params.norm1_g, params.norm1_b, LAYER_NORM_EPS)
    x = add(x, window_attention(h, params, num_heads, window_size, shift if shifted else 0))
    h = layer_norm(x, params.norm2_g, params.norm2_b, LAYER_NORM_EPS)
    return add(x, mlp(h, params.mlp))


def patch_merge(x: Tensor, params: MergeParams) -> Tensor:
    """[..., G, G, C] -> [..., G/2, G/2, 2C].

    Each 2x2 neighborhood's channels are concatenated in (top-left,
    top-right, bottom-left, bottom-right) order, normalized, then linearly
    reduced from 4C to 2C.
    """
    shp = x.data.shape
    g, c = shp[-2], shp[-1]
    if g % 2:
        raise ConfigError(f"patch_merge: grid {g} must be even")
    lead = shp[:-3]
    nl = len(lead)
    t = reshape(x, lead + (g // 2, 2, g // 2, 2, c))
    # -> [..., G/2, G/2, 2, 2, C]; row-major flatten of (2, 2, C) is TL,TR,BL,BR
    t = transpose(t, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    t = reshape(t, lead + (g // 2, g // 2, 4 * c))
    t = layer_norm(t, params.norm_g, params.norm_b, LAYER_NORM_EPS)
    return matmul(t, params.reduction)


def _embed_grid(images: Tensor, params: SwinParams, config: SwinConfig) -> Tensor:
    tokens = add(matmul(patchify(images, config.patch_size), params.patch_w), params.patch_b)
    lead = tokens.data.shape[:-2]
    g = config.grid_at(0)
    return reshape(tokens, lead + (g, g, config.embed_dim))


def _pool(x: Tensor, params: SwinParams, config: SwinConfig) -> Tensor:
    lead = x.data.shape[:-3]
    gl = config.grid_at(config.num_stages - 1)
    x = reshape(x, lead + (gl * gl, config.out_dim))
    x = layer_norm(x, params.norm_g, params.norm_b, LAYER_NORM_EPS)
    return gap(x)


def swin_steps(params: SwinParams, config: SwinConfig):
    """The forward pass as a chain of (parameter prefixes, fn) segments.

    Same contract as the first-stage encoder's step chain: ``swin_forward``
    folds these, and each step names the parameters it introduces.
    """
    steps = [
        (("patch_w", "patch_b"), lambda x: _embed_grid(x, params, config)),
    ]
    for s, stage in enumerate(params.stages):
        grid = config.grid_at(s)
        # a single-window stage gets nothing from shifting, only masking
        shift = config.shift if grid > config.window_size else 0
        for i, blk in enumerate(stage.blocks):
            steps.append(
                (
                    (f"stages.{s}.blocks.{i}",),
                    lambda x, blk=blk, s=s, shift=shift, i=i: swin_block(
                        x, blk, config.num_heads[s], config.window_size, shift, shifted=bool(i % 2)
                    ),
                )
            )
        if stage.merge is not None:
            steps.append(
                (
                    (f"stages.{s}.merge",),
                    lambda x, merge=stage.merge: patch_merge(x, merge),
                )
            )
    steps.append((("norm_g", "norm_b"), lambda x: _pool(x, params, config)))
    return steps


def swin_forward(images: Tensor, params: SwinParams, config: SwinConfig) -> Tensor:
    """[B, 3, H, W] -> [B, out_dim] pooled hierarchical features."""
    x = images
    for _, step in swin_steps(params, config):
        x = step(x)
    return x
