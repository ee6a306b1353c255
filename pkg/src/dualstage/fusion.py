"""Fusion head: project, concatenate, classify.

The pooled first-stage feature is mapped through a learned affine projection
to the second stage's width (pooled vectors have no spatial axes left to
interpolate, so "resizing" means a linear map), the two vectors are
concatenated in fixed (first-stage, second-stage) order, and one shared
linear layer sized by the combined width produces one logit per label. No
activation is applied to the logits; the loss owns the sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import init
from .data import DEFAULT_LABELS, check_vocabulary
from .errors import ConfigError, ShapeError
from .swin import SwinConfig, SwinParams, init_swin, swin_forward
from .tensor import Tensor, add, concat_lastdim, matmul
from .vit import ViTConfig, ViTParams, init_vit, vit_forward


@dataclass
class DualStageModel:
    vit_config: ViTConfig
    swin_config: SwinConfig
    vocabulary: list[str]
    vit: ViTParams
    swin: SwinParams
    proj_w: Tensor  # [d_v, d_s]
    proj_b: Tensor  # [d_s]
    head_w: Tensor  # [2*d_s, K]
    head_b: Tensor  # [K]

    @property
    def num_labels(self) -> int:
        return len(self.vocabulary)

    @property
    def dtype(self) -> np.dtype:
        return self.proj_w.data.dtype

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.vit.named_parameters():
            yield f"vit.{n}", p
        for n, p in self.swin.named_parameters():
            yield f"swin.{n}", p
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def set_trainable(self, branch: str, trainable: bool) -> None:
        """Freeze or unfreeze one backbone ('vit' or 'swin')."""
        if branch not in ("vit", "swin"):
            raise ConfigError(f"unknown branch {branch!r}")
        for _, p in getattr(self, branch).named_parameters():
            p.requires_grad = trainable


def build_model(
    vit_config: ViTConfig,
    swin_config: SwinConfig,
    vocabulary=DEFAULT_LABELS,
    seed: int = 0,
    dtype=np.float32,
) -> DualStageModel:
    if vit_config.image_size != swin_config.image_size:
        raise ConfigError(
            f"backbones disagree on image size: {vit_config.image_size} vs {swin_config.image_size}"
        )
    vocabulary = check_vocabulary(vocabulary)
    d_v, d_s, k = vit_config.embed_dim, swin_config.out_dim, len(vocabulary)
    return DualStageModel(
        vit_config=vit_config,
        swin_config=swin_config,
        vocabulary=vocabulary,
        vit=init_vit(vit_config, seed, dtype),
        swin=init_swin(swin_config, seed, dtype),
        proj_w=init.xavier(seed, "proj_w", (d_v, d_s), d_v, d_s, dtype),
        proj_b=init.zeros((d_s,), dtype),
        # zero-init classifier: initial logits are exactly 0, so the first
        # loss sits exactly at the all-zero-logit baseline
        head_w=init.zeros((2 * d_s, k), dtype),
        head_b=init.zeros((k,), dtype),
    )


def project_vit(f_v: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """Affine map [B, d_v] -> [B, d_s]."""
    return add(matmul(f_v, proj_w), proj_b)


def fuse(f_v_proj: Tensor, f_s: Tensor) -> Tensor:
    """Concatenate [B, d_s] ++ [B, d_s] -> [B, 2*d_s]; first-stage half first."""
    if f_v_proj.data.shape != f_s.data.shape:
        raise ShapeError(
            f"fuse: feature shapes disagree, {f_v_proj.data.shape} vs {f_s.data.shape}"
        )
    return concat_lastdim(f_v_proj, f_s)


def forward(images: Tensor, model: DualStageModel) -> Tensor:
    """[B, 3, H, W] -> logits [B, K]; no output activation."""
    f_v = vit_forward(images, model.vit, model.vit_config)
    f_s = swin_forward(images, model.swin, model.swin_config)
    fused = fuse(project_vit(f_v, model.proj_w, model.proj_b), f_s)
    return add(matmul(fused, model.head_w), model.head_b)


def predict(logits: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid probabilities [B, K] and argmax label ids [B] (ties: lowest index)."""
    from scipy.special import expit

    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return expit(z), np.argmax(z, axis=-1)
