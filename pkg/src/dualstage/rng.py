"""Seedable random number generation with a contractual draw order.

The generator is xoshiro256** seeded through splitmix64. Reproducibility is
part of the package contract, so the draw order is pinned here and relied on
by tests:

- ``next_u64()`` advances the state exactly once.
- ``uniform()`` consumes one ``next_u64`` and returns ``(u >> 11) * 2**-53``,
  a float64 in [0, 1).
- ``coin(p)`` consumes one ``uniform`` and returns ``uniform() < p``.
- ``below(n)`` consumes one ``next_u64`` and returns ``u % n``.
- ``shuffle(seq)`` is an in-place Fisher-Yates walk from the last index down
  to 1, consuming one ``below(i + 1)`` per step.
- ``fill_uniform(shape, low, high)`` draws ``prod(shape)`` uniforms in
  row-major element order.

Independent streams are derived from a base seed plus a tag path via
``derive_seed``; string tags are hashed with SHA-256 so the derivation is
stable across platforms and Python versions.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 output function."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag_to_u64(tag: int | str) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")
    return tag & _MASK64


def derive_seed(base_seed: int, *tags: int | str) -> int:
    """Fold a tag path into a base seed, one splitmix64 round per tag."""
    x = base_seed & _MASK64
    for tag in tags:
        x = _mix64((x + _GOLDEN) & _MASK64 ^ _tag_to_u64(tag))
    return x


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator, seeded by four splitmix64 outputs."""

    __slots__ = ("s",)

    def __init__(self, seed: int):
        sm = seed & _MASK64
        state = []
        for _ in range(4):
            sm = (sm + _GOLDEN) & _MASK64
            state.append(_mix64(sm))
        self.s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def coin(self, p: float) -> bool:
        return self.uniform() < p

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def fill_uniform(self, shape, low: float, high: float, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        span = high - low
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = low + span * self.uniform()
        return out.reshape(shape).astype(dtype)

    def state(self) -> list[int]:
        return list(self.s)

    def set_state(self, state: list[int]) -> None:
        if len(state) != 4 or any(not (0 <= v <= _MASK64) for v in state):
            raise ValueError("xoshiro256 state must be four u64 words")
        self.s = list(state)
