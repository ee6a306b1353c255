"""Full-model finite-difference gradient verification.

A plain sweep re-runs the whole forward pass twice per parameter scalar,
which is needlessly quadratic in depth: the model is a chain, and a
parameter in segment i cannot change any activation entering segment i.
This checker therefore caches the base activations once and, per probe,
recomputes only the suffix the perturbed parameter can reach (the sibling
branch's pooled feature is likewise reused). The probed objective value is
bit-identical to the full forward pass: the suffix runs the same ops on the
same numbers, and a sampled bitwise cross-check against the unstaged
forward enforces that on every run.

The analytic side is one reverse-mode pass over the full tape; comparisons
use the same relative-error measure as the generic checker.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import fusion
from .errors import NumericsError
from .gradcheck import GradCheckReport
from .rng import Rng, derive_seed
from .swin import swin_steps
from .tensor import Tape, Tensor, add, backward, matmul, zero_grads
from .train import bce_with_logits
from .vit import vit_steps


def _match_step(name: str, steps) -> int:
    for idx, (prefixes, _) in enumerate(steps):
        for p in prefixes:
            if name == p or name.startswith(p + "."):
                return idx
    raise KeyError(f"parameter {name!r} not claimed by any step")


def _run_suffix(steps, activations, start: int) -> Tensor:
    x = activations[start]
    for _, fn in steps[start:]:
        x = fn(x)
    return x


def full_model_grad_check(
    model: fusion.DualStageModel,
    images: Tensor,
    targets: Tensor,
    step: float = 1e-5,
    spot_checks: int = 1,
) -> GradCheckReport:
    """Check every live parameter scalar of the dual-backbone model.

    ``spot_checks`` probes per parameter tensor are re-evaluated through the
    plain (unstaged) forward pass and must agree bitwise with the staged
    value; a disagreement means the step chain no longer mirrors the real
    forward pass and is raised as an error.
    """
    live = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for name, p in live:
        if p.data.dtype != np.float64:
            raise NumericsError(f"grad check requires float64 parameters, got {p.data.dtype} for {name!r}")

    def full_loss() -> float:
        return float(bce_with_logits(fusion.forward(images, model), targets).data)

    # analytic gradients from one taped pass
    zero_grads(p for _, p in live)
    with Tape() as tape:
        loss = bce_with_logits(fusion.forward(images, model), targets)
    if not math.isfinite(float(loss.data)):
        raise NumericsError("grad check: loss is non-finite at the base point")
    backward(loss, tape)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in live}

    v_steps = vit_steps(model.vit, model.vit_config)
    s_steps = swin_steps(model.swin, model.swin_config)

    def head_loss(f_v: Tensor, f_s: Tensor) -> float:
        fused = fusion.fuse(fusion.project_vit(f_v, model.proj_w, model.proj_b), f_s)
        logits = add(matmul(fused, model.head_w), model.head_b)
        return float(bce_with_logits(logits, targets).data)

    def base_activations():
        v_acts = [images]
        for _, fn in v_steps:
            v_acts.append(fn(v_acts[-1]))
        s_acts = [images]
        for _, fn in s_steps:
            s_acts.append(fn(s_acts[-1]))
        return v_acts, s_acts

    v_acts, s_acts = base_activations()
    base_staged = head_loss(v_acts[-1], s_acts[-1])
    if base_staged != full_loss():
        raise NumericsError("grad check: staged forward diverged from the plain forward")

    def probe_fn(name: str) -> Callable[[], float]:
        if name.startswith("vit."):
            idx = _match_step(name[len("vit."):], v_steps)
            return lambda: head_loss(_run_suffix(v_steps, v_acts, idx), s_acts[-1])
        if name.startswith("swin."):
            idx = _match_step(name[len("swin."):], s_steps)
            return lambda: head_loss(v_acts[-1], _run_suffix(s_steps, s_acts, idx))
        return lambda: head_loss(v_acts[-1], s_acts[-1])

    report = GradCheckReport()
    for name, p in live:
        f = probe_fn(name)
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        spot = {int(i) for i in np.linspace(0, flat.size - 1, num=min(spot_checks, flat.size))}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            if i in spot and fp != full_loss():
                flat[i] = orig
                raise NumericsError(f"grad check: staged probe of {name}[{i}] is not bit-exact")
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericsError(f"grad check: non-finite probe at {name}[{i}]")
            numeric[i] = (fp - fm) / (2.0 * step)
        report.record(name, analytic[name], numeric)
    return report


def gradcheck_batch(model: fusion.DualStageModel, seed: int, batch: int = 2) -> tuple[Tensor, Tensor]:
    """Deterministic random images and binary targets for a check run."""
    s = model.vit_config.image_size
    k = model.num_labels
    rng = Rng(derive_seed(seed, "gradcheck-batch"))
    images = Tensor(rng.fill_uniform((batch, 3, s, s), -1.0, 1.0, dtype=np.float64))
    targets = Tensor(
        np.array([[1.0 if rng.coin(0.5) else 0.0 for _ in range(k)] for _ in range(batch)])
    )
    return images, targets
