"""First-stage feature extractor: a plain vision transformer.

Images are cut into non-overlapping patches, linearly embedded with learned
positional rows added, pushed through pre-norm transformer blocks
(norm -> sublayer -> residual), normalized once more, and mean-pooled over
the token axis into a single feature vector per image. There is no class
token and no classifier head here; pooling does the summarizing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import init
from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    gap,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("vit: image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"vit: image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.depth < 0:
            raise ConfigError("vit: embed_dim/num_heads must be positive, depth non-negative")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"vit: embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError("vit: mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)


@dataclass
class AttentionParams:
    # no key bias: softmax is invariant to per-row constant shifts, so a key
    # bias is a dead parameter (its gradient is identically zero)
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for f in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"):
            yield f, getattr(self, f)


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for f in ("w1", "b1", "w2", "b2"):
            yield f, getattr(self, f)


@dataclass
class BlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    attn: AttentionParams
    norm2_g: Tensor
    norm2_b: Tensor
    mlp: MlpParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "norm1_g", self.norm1_g
        yield "norm1_b", self.norm1_b
        for n, p in self.attn.named_parameters():
            yield f"attn.{n}", p
        yield "norm2_g", self.norm2_g
        yield "norm2_b", self.norm2_b
        for n, p in self.mlp.named_parameters():
            yield f"mlp.{n}", p


@dataclass
class ViTParams:
    patch_w: Tensor  # [3*p*p, d]
    patch_b: Tensor  # [d]
    pos: Tensor      # [num_patches, d]
    blocks: list[BlockParams] = field(default_factory=list)
    norm_g: Tensor = None
    norm_b: Tensor = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            for n, p in blk.named_parameters():
                yield f"blocks.{i}.{n}", p
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b


def init_attention(seed: int, prefix: str, dim: int, dtype) -> AttentionParams:
    def w(name):
        return init.xavier(seed, f"{prefix}.{name}", (dim, dim), dim, dim, dtype)

    return AttentionParams(
        wq=w("wq"), bq=init.zeros((dim,), dtype),
        wk=w("wk"),
        wv=w("wv"), bv=init.zeros((dim,), dtype),
        wo=w("wo"), bo=init.zeros((dim,), dtype),
    )


def init_mlp(seed: int, prefix: str, dim: int, hidden: int, dtype) -> MlpParams:
    return MlpParams(
        w1=init.xavier(seed, f"{prefix}.w1", (dim, hidden), dim, hidden, dtype),
        b1=init.zeros((hidden,), dtype),
        w2=init.xavier(seed, f"{prefix}.w2", (hidden, dim), hidden, dim, dtype),
        b2=init.zeros((dim,), dtype),
    )


def init_block(seed: int, prefix: str, dim: int, hidden: int, dtype) -> BlockParams:
    return BlockParams(
        norm1_g=init.ones((dim,), dtype),
        norm1_b=init.zeros((dim,), dtype),
        attn=init_attention(seed, f"{prefix}.attn", dim, dtype),
        norm2_g=init.ones((dim,), dtype),
        norm2_b=init.zeros((dim,), dtype),
        mlp=init_mlp(seed, f"{prefix}.mlp", dim, hidden, dtype),
    )


def init_vit(config: ViTConfig, seed: int, dtype=np.float32) -> ViTParams:
    d = config.embed_dim
    return ViTParams(
        patch_w=init.xavier(seed, "vit.patch_w", (config.patch_dim, d), config.patch_dim, d, dtype),
        patch_b=init.zeros((d,), dtype),
        pos=init.zeros((config.num_patches, d), dtype),
        blocks=[
            init_block(seed, f"vit.blocks.{i}", d, config.mlp_hidden, dtype)
            for i in range(config.depth)
        ],
        norm_g=init.ones((d,), dtype),
        norm_b=init.zeros((d,), dtype),
    )


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """Cut [..., 3, H, W] into [..., (H/p)*(W/p), 3*p*p] patch rows.

    Patches are ordered row-major over the patch grid; within a patch the
    layout is channel-major, then pixel row, then pixel column.
    """
    shp = images.data.shape
    if len(shp) < 3 or shp[-3] != 3:
        raise ConfigError(f"patchify: expected [..., 3, H, W], got {shp}")
    h, w = shp[-2], shp[-1]
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ConfigError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    lead = shp[:-3]
    nl = len(lead)
    gh, gw = h // p, w // p
    x = reshape(images, lead + (3, gh, p, gw, p))
    # -> [..., gh, gw, 3, p, p]; row-major flatten of the tail gives
    # channel-major patch rows in grid order
    x = transpose(x, tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4))
    return reshape(x, lead + (gh * gw, 3 * p * p))


def embed(patches: Tensor, params: ViTParams) -> Tensor:
    """Project patch rows into tokens and add the positional table."""
    tokens = add(matmul(patches, params.patch_w), params.patch_b)
    return add(tokens, params.pos)


def _split_heads(t: Tensor, num_heads: int) -> Tensor:
    *lead, n, d = t.data.shape
    nl = len(lead)
    t = reshape(t, (*lead, n, num_heads, d // num_heads))
    return transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))  # [..., H, n, dh]


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dh = t.data.shape
    nl = len(lead)
    t = transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))  # [..., n, H, dh]
    return reshape(t, (*lead, n, h * dh))


def mhsa(
    x: Tensor,
    params: AttentionParams,
    num_heads: int,
    mask: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Multi-head self-attention over [..., n, d] token stacks.

    Per head: softmax(q k^T / sqrt(d_head) + bias + mask) v, heads
    re-concatenated and projected. ``mask`` is additive with entries 0 or
    -inf and must broadcast into the [..., heads, n, n] score stack;
    ``bias`` likewise (per-head attention-bias tables).
    """
    d = x.data.shape[-1]
    if d % num_heads != 0:
        raise ConfigError(f"mhsa: dim {d} not divisible by {num_heads} heads")
    q = _split_heads(add(matmul(x, params.wq), params.bq), num_heads)
    k = _split_heads(matmul(x, params.wk), num_heads)
    v = _split_heads(add(matmul(x, params.wv), params.bv), num_heads)
    nd = q.data.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = scale(matmul(q, kt), 1.0 / np.sqrt(d // num_heads))
    if bias is not None:
        scores = add(scores, bias)
    if mask is not None:
        scores = add(scores, mask)
    attn = softmax_lastdim(scores)
    out = _merge_heads(matmul(attn, v))
    return add(matmul(out, params.wo), params.bo)


def mlp(x: Tensor, params: MlpParams) -> Tensor:
    h = gelu(add(matmul(x, params.w1), params.b1))
    return add(matmul(h, params.w2), params.b2)


def encoder_block(x: Tensor, params: BlockParams, num_heads: int) -> Tensor:
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""
    h = layer_norm(x, params.norm1_g, params.norm1_b, LAYER_NORM_EPS)
    x = add(x, mhsa(h, params.attn, num_heads))
    h = layer_norm(x, params.norm2_g, params.norm2_b, LAYER_NORM_EPS)
    return add(x, mlp(h, params.mlp))


def vit_steps(params: ViTParams, config: ViTConfig):
    """The forward pass as a chain of (parameter prefixes, fn) segments.

    ``vit_forward`` is the fold of these steps; the explicit chain lets the
    gradient checker recompute only the suffix a perturbed parameter can
    affect. Each step's first element lists the parameter names (prefixes)
    read by that step and no earlier one.
    """
    steps = [
        (("patch_w", "patch_b", "pos"), lambda x: embed(patchify(x, config.patch_size), params)),
    ]
    for i, blk in enumerate(params.blocks):
        steps.append(
            ((f"blocks.{i}",), lambda x, blk=blk: encoder_block(x, blk, config.num_heads))
        )
    steps.append(
        (
            ("norm_g", "norm_b"),
            lambda x: gap(layer_norm(x, params.norm_g, params.norm_b, LAYER_NORM_EPS)),
        )
    )
    return steps


def vit_forward(images: Tensor, params: ViTParams, config: ViTConfig) -> Tensor:
    """[B, 3, H, W] -> [B, embed_dim] pooled features."""
    x = images
    for _, step in vit_steps(params, config):
        x = step(x)
    return x
