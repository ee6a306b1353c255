"""Loss, optimizer, and the training loop.

The loss is binary cross-entropy fused with the sigmoid, in the numerically
stable form max(z, 0) - z*y + log(1 + exp(-|z|)), averaged over every
batch-by-label element; its gradient is (sigmoid(z) - y) / (B*K).

The optimizer is Adam with bias correction:
    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

Finiteness is checked once per step, at the loss and at the gradients;
either failure aborts with coordinates.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import data as data_mod
from . import fusion
from .errors import ConfigError, DataError, NumericsError, ShapeError, TrainError
from .tensor import DTYPES, Tape, Tensor, apply_op, backward, zero_grads


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    def __post_init__(self):
        # learning_rate 0 is allowed: a no-op optimizer is a useful control
        if self.learning_rate < 0:
            raise ConfigError("train: learning_rate must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("train: beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("train: epsilon must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train: epochs must be >= 0 and batch_size >= 1")
        if self.precision not in DTYPES:
            raise ConfigError(f"train: unknown precision {self.precision!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("train: checkpoint_every must be >= 0")

    @property
    def dtype(self):
        return DTYPES[self.precision]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        state = cls()
        for name, p in params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def bce_with_logits(logits: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all elements, sigmoid fused in."""
    z = logits.data
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    if not np.isfinite(z).all():
        raise NumericsError("bce_with_logits: non-finite logits")
    if ((y != 0) & (y != 1)).any():
        raise DataError("bce_with_logits: targets must be exactly 0 or 1")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    y_cast = y.astype(z.dtype, copy=False)

    def bwd(g):
        return (g * (expit(z) - y_cast) / n,)

    return apply_op(np.asarray(per.mean()), (logits,), bwd)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One Adam update, in place. Parameters without a gradient are skipped."""
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for name, p in params:
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)


@dataclass
class TrainResult:
    model: fusion.DualStageModel
    state: AdamState
    loss_log: list[tuple[int, float]]


def write_loss_log(loss_log, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, mean_loss in loss_log:
            fh.write(f"{epoch},{mean_loss!r}\n")


def train(
    model: fusion.DualStageModel,
    samples: list[data_mod.Sample],
    config: TrainConfig,
    preprocess: data_mod.PreprocessConfig,
    *,
    image_root: str = "",
    out_dir: str | None = None,
    start_epoch: int = 0,
    adam_state: AdamState | None = None,
) -> TrainResult:
    """Run the forward / loss / backward / update loop.

    Epochs are numbered from 1; ``start_epoch=e`` resumes after epoch e with
    the same derived shuffle and augmentation streams, so a resumed run
    reproduces the uninterrupted one. Per-epoch mean loss is weighted by
    element count, so a partial final batch contributes proportionally.
    """
    if not samples:
        raise DataError("train: no samples")
    if np.dtype(model.dtype) != np.dtype(config.dtype):
        raise ConfigError(
            f"train: model precision {model.dtype} does not match config {config.precision}"
        )
    params = list(model.named_parameters())
    state = adam_state if adam_state is not None else AdamState.for_params(params)
    cache: dict = {}
    loss_log: list[tuple[int, float]] = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        total = 0.0
        count = 0
        batch_iter = data_mod.batches(
            samples,
            config.batch_size,
            config.seed,
            training=True,
            config=preprocess,
            epoch=epoch,
            image_root=image_root,
            dtype=config.dtype,
            cache=cache,
        )
        for batch_idx, (images, targets) in enumerate(batch_iter):
            zero_grads(p for _, p in params)
            with Tape() as tape:
                logits = fusion.forward(images, model)
                try:
                    loss = bce_with_logits(logits, targets)
                except NumericsError as exc:
                    raise TrainError(f"epoch {epoch} batch {batch_idx}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainError(f"epoch {epoch} batch {batch_idx}: loss is {value}")
            backward(loss, tape)
            try:
                adam_step(params, {n: p.grad for n, p in params}, state, config)
            except TrainError as exc:
                raise TrainError(f"epoch {epoch} batch {batch_idx}: {exc}") from exc
            elems = targets.data.size
            total += value * elems
            count += elems
        if count == 0:
            raise DataError(f"epoch {epoch}: every sample was skipped")
        loss_log.append((epoch, total / count))
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            from .checkpoint import save_checkpoint

            save_checkpoint(
                os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt"),
                model, state, epoch, config.seed, preprocess,
            )
    if out_dir:
        from .checkpoint import save_checkpoint

        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(
            os.path.join(out_dir, "model.ckpt"),
            model, state, config.epochs, config.seed, preprocess,
        )
        write_loss_log(loss_log, os.path.join(out_dir, "loss_log.csv"))
    return TrainResult(model=model, state=state, loss_log=loss_log)
