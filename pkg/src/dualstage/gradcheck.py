"""Finite-difference verification of the autodiff backward pass.

Every live parameter scalar is probed with the central difference
``(f(x+h) - f(x-h)) / 2h``; errors use ``|a - b| / max(1e-8, |a| + |b|)``.
Probing runs outside any tape, so each evaluation is a plain forward pass.

Two granularities are reported. Per parameter, the formula is applied to
the gradient vectors (Euclidean norms), which is the robust headline
number. Per scalar, the same formula on individual entries is stricter but
bottoms out at the probe's noise floor: a scalar whose true gradient is
below ~1e-7 cannot be resolved relative to central-difference roundoff
(~1e-11 absolute at h=1e-5 in float64), so on models with many parameters
a handful of near-zero-gradient scalars always shows relative errors near
1e-4..1e-3 even for a perfect backward pass. Small functions and single
ops, where gradients are generically healthy, should assert the scalar
number; whole models should gate on the per-parameter number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import NumericsError
from .rng import Rng, derive_seed
from .tensor import Tape, Tensor, backward, zero_grads


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0          # worst per-parameter (vector-norm) error
    max_scalar_rel_error: float = 0.0   # worst single-scalar error, diagnostic
    scalars_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)
    per_param_scalar: dict[str, float] = field(default_factory=dict)

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    def record(self, name: str, analytic: np.ndarray, numeric: np.ndarray) -> None:
        a, n = analytic.reshape(-1), numeric.reshape(-1)
        norm_rel = rel_error_vec(a, n)
        scalar_rel = max((rel_error(float(x), float(y)) for x, y in zip(a, n)), default=0.0)
        self.per_param[name] = norm_rel
        self.per_param_scalar[name] = scalar_rel
        self.scalars_checked += a.size
        self.max_rel_error = max(self.max_rel_error, norm_rel)
        self.max_scalar_rel_error = max(self.max_scalar_rel_error, scalar_rel)


def rel_error_vec(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(b)))


def perturb_params(params: Iterable[tuple[str, Tensor]], seed: int, amplitude: float = 0.05) -> None:
    """Add uniform noise to every parameter, in place.

    Fresh initializations sit at symmetric points (zeroed tables, unit norm
    gains, a zeroed classifier) where several exact cancellations make true
    gradients vanish; finite differences cannot resolve a zero gradient from
    roundoff. Checking at a perturbed, generic point avoids that.
    """
    for name, t in params:
        rng = Rng(derive_seed(seed, "gradcheck-perturb", name))
        t.data += rng.fill_uniform(t.data.shape, -amplitude, amplitude, dtype=t.data.dtype)


def _eval_scalar(f: Callable[[], Tensor]) -> float:
    v = float(f().data)
    if not math.isfinite(v):
        raise NumericsError(f"grad check: objective evaluated to non-finite value {v}")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f`` against central differences.

    ``f`` must close over ``params`` and return a scalar tensor. Only
    parameters with ``requires_grad=True`` are probed; frozen ones are
    excluded from the report. All live parameters must be float64.
    """
    if step <= 0:
        raise ValueError("grad check: step must be positive")
    live = [(name, t) for name, t in params if t.requires_grad]
    for name, t in live:
        if t.data.dtype != np.float64:
            raise NumericsError(
                f"grad check requires float64 parameters, got {t.data.dtype} for {name!r}"
            )

    zero_grads(t for _, t in live)
    with Tape() as tape:
        loss = f()
    _ = _eval_scalar(lambda: loss)
    backward(loss, tape)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in live
    }

    report = GradCheckReport()
    for name, t in live:
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _eval_scalar(f)
            flat[i] = orig - step
            fm = _eval_scalar(f)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        report.record(name, analytic[name], numeric)
    return report
