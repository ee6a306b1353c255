"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps one numpy array (row-major, float32 or float64) plus an
optional gradient accumulator. Differentiable operations record themselves on
the innermost active ``Tape``; ``backward`` replays the tape in reverse,
accumulating gradients additively so a tensor used twice receives the sum of
both branch gradients. The tape is rebuilt on every forward pass
(define-by-run); nothing is cached between passes.

Outside a ``with Tape():`` block the same operations run forward-only, which
is the fast path used for finite-difference probing.

Broadcasting is deliberately narrow: the second operand of ``add``/``mul``
may broadcast *into* the first (bias rows over leading axes, per-head bias
tables over batch/window axes). The result shape always equals the first
operand's shape; anything wider raises ``ShapeError``.

Non-finite values are not policed here op by op. Masks legitimately carry
-inf into ``softmax_lastdim``; the training loop checks finiteness once, at
the loss.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

from .errors import GraphError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def set_default_dtype(name: str) -> None:
    global _DEFAULT_DTYPE
    if name not in DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}")
    _DEFAULT_DTYPE = DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    ``data`` is always a numpy array owned by this tensor; treat it as
    immutable once the tensor has been consumed by an op. ``grad`` is filled
    by ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    return t


class Tape:
    """Ordered record of executed differentiable ops.

    Nodes are appended in execution order, so every node appears after the
    nodes that produced its inputs; replaying backward rules in reverse
    visits each gradient edge exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def apply_op(
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable,
    needs: bool | None = None,
) -> Tensor:
    """Wrap an op result, recording it on the active tape when grads are needed.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, each newly allocated or at least never written to in place by the
    caller. ``needs`` short-circuits the requires_grad scan when the caller
    already knows it.
    """
    out = _wrap(out_data)
    if needs is None:
        needs = False
        for t in inputs:
            if t.requires_grad:
                needs = True
                break
    if needs:
        out.requires_grad = True
        if _TAPES:
            _TAPES[-1].nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every tensor on the tape."""
    if loss.data.ndim != 0:
        raise GraphError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not any(node[0] is loss for node in tape.nodes):
        raise GraphError("loss was not produced through this tape")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_broadcast_into(ad: np.ndarray, bd: np.ndarray, op: str) -> None:
    """b must broadcast into a without widening a."""
    if ad.shape == bd.shape:
        return
    if bd.ndim <= ad.ndim and ad.shape[ad.ndim - bd.ndim:] == bd.shape:
        return  # trailing-suffix bias, the common case
    if np.broadcast_shapes(ad.shape, bd.shape) != ad.shape:
        raise ShapeError(f"{op}: {bd.shape} does not broadcast into {ad.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may broadcast into a (bias patterns only)."""
    _check_same_dtype(a, b, "add")
    ad, bd = a.data, b.data
    _check_broadcast_into(ad, bd, "add")
    b_needs = b.requires_grad

    def bwd(g):
        gb = _unbroadcast(g, bd.shape) if b_needs else None
        return g, gb

    return apply_op(ad + bd, (a, b), bwd, a.requires_grad or b_needs)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b; b may broadcast into a."""
    _check_same_dtype(a, b, "mul")
    ad, bd = a.data, b.data
    _check_broadcast_into(ad, bd, "mul")
    a_needs, b_needs = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = g * bd if a_needs else None
        gb = _unbroadcast(g * ad, bd.shape) if b_needs else None
        return ga, gb

    return apply_op(ad * bd, (a, b), bwd, a_needs or b_needs)


def scale(a: Tensor, s: float) -> Tensor:
    """a * s for a python scalar s."""
    s = float(s)

    def bwd(g):
        return (g * s,)

    return apply_op(a.data * s, (a,), bwd, a.requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Both operands must have ndim >= 2. Leading (batch) axes follow numpy
    matmul broadcasting; gradients are summed back to each operand's shape,
    so a 2-D weight shared across a batch accumulates over the batch.
    """
    _check_same_dtype(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {ad.shape} @ {bd.shape}")
    a_needs, b_needs = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = gb = None
        if a_needs:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        if b_needs:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return apply_op(ad @ bd, (a, b), bwd, a_needs or b_needs)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (numpy semantics: axes=None reverses them)."""
    ad = a.data
    if axes is None:
        axes = tuple(range(ad.ndim))[::-1]
    else:
        axes = tuple(axes)

    def bwd(g):
        inv = sorted(range(len(axes)), key=axes.__getitem__)
        return (g.transpose(inv),)

    return apply_op(ad.transpose(axes), (a,), bwd, a.requires_grad)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    ad = a.data
    shape = tuple(shape)
    orig = ad.shape

    def bwd(g):
        return (g.reshape(orig),)

    return apply_op(ad.reshape(shape), (a,), bwd, a.requires_grad)


def concat_lastdim(*tensors: Tensor) -> Tensor:
    """Concatenate along the last axis; shapes must agree elsewhere."""
    if len(tensors) < 2:
        raise ShapeError("concat_lastdim needs at least two tensors")
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat_lastdim")
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_lastdim: leading shapes disagree, {tensors[0].data.shape} vs {t.data.shape}"
            )
    sizes = [t.data.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    needs = False
    for t in tensors:
        if t.requires_grad:
            needs = True
            break
    return apply_op(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), bwd, needs)


def sigmoid(a: Tensor) -> Tensor:
    y = _expit(a.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return apply_op(y, (a,), bwd, a.requires_grad)


def mean_all(a: Tensor) -> Tensor:
    """Mean over every element, producing a 0-d tensor."""
    ad = a.data
    n = ad.size
    shape = ad.shape

    def bwd(g):
        return (np.full(shape, g / n, dtype=ad.dtype),)

    return apply_op(ad.mean(), (a,), bwd, a.requires_grad)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis.

    -inf entries (additive masks) map to exactly 0. A row that is entirely
    -inf has no valid distribution and raises.
    """
    ad = a.data
    if ad.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last axis")
    m = np.maximum.reduce(ad, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ShapeError("softmax_lastdim: a row is entirely -inf (degenerate distribution)")
    e = np.exp(ad - m)
    y = e / np.add.reduce(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.add.reduce(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return apply_op(y, (a,), bwd, a.requires_grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (population variance), then apply gamma/beta."""
    _check_same_dtype(x, gamma, "layer_norm")
    _check_same_dtype(x, beta, "layer_norm")
    xd = x.data
    d = xd.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be shape ({d},), got {gamma.data.shape} and {beta.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    inv_d = 1.0 / d
    mu = np.add.reduce(xd, axis=-1, keepdims=True) * inv_d
    xc = xd - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gamma.data
    x_needs, g_needs, b_needs = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bwd(g):
        dg = db = dx = None
        if g_needs:
            dg = (g * xh).reshape(-1, d).sum(axis=0)
        if b_needs:
            db = g.reshape(-1, d).sum(axis=0)
        if x_needs:
            gy = g * gd
            m1 = np.add.reduce(gy, axis=-1, keepdims=True) * inv_d
            m2 = np.add.reduce(gy * xh, axis=-1, keepdims=True) * inv_d
            dx = inv * (gy - m1 - xh * m2)
        return dx, dg, db

    return apply_op(xh * gd + beta.data, (x, gamma, beta), bwd, x_needs or g_needs or b_needs)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF (erf form, no tanh approximation)."""
    xd = a.data
    phi_cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))
    y = xd * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi_cdf + xd * pdf),)

    return apply_op(y, (a,), bwd, a.requires_grad)


def gap(a: Tensor) -> Tensor:
    """Global average pool: mean over the token axis (second-to-last)."""
    ad = a.data
    if ad.ndim < 2:
        raise ShapeError(f"gap: need at least 2 axes (tokens, features), got {ad.shape}")
    n = ad.shape[-2]
    if n < 1:
        raise ShapeError("gap: zero tokens")
    shape = ad.shape

    def bwd(g):
        return (np.broadcast_to(g[..., None, :] / n, shape).copy(),)

    return apply_op(np.add.reduce(ad, axis=-2) * (1.0 / n), (a,), bwd, a.requires_grad)


def roll_grid(a: Tensor, shift_rows: int, shift_cols: int, axes: tuple[int, int]) -> Tensor:
    """Torus roll of two axes; the exact inverse is the negated roll."""
    ad = a.data

    def bwd(g):
        return (np.roll(g, (-shift_rows, -shift_cols), axis=axes),)

    return apply_op(np.roll(ad, (shift_rows, shift_cols), axis=axes), (a,), bwd, a.requires_grad)
