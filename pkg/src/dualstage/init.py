"""Parameter initialization.

Every parameter gets its own RNG stream derived from (seed, "init", name),
so init values do not depend on construction order. Weights are Glorot
uniform, bounds sqrt(6 / (fan_in + fan_out)); biases, positional tables and
attention-bias tables start at zero; norm gains start at one.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng, derive_seed
from .tensor import Tensor


def xavier(seed: int, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = Rng(derive_seed(seed, "init", name))
    return Tensor(rng.fill_uniform(shape, -bound, bound, dtype=dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
