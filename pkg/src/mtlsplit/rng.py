"""Seedable xoshiro256** generator (splitmix64-seeded) and sub-seed derivation."""

from __future__ import annotations

import hashlib

import numpy as np

from . import _kernels

MASK64 = _kernels.MASK64


def derive_seed(seed: int, tag: str) -> int:
    """Sub-seed for one purpose: ``seed XOR first-8-bytes-LE(sha256(tag))``."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (seed & MASK64) ^ int.from_bytes(digest[:8], "little")


class Rng:
    """xoshiro256** stream. Identical seed gives an identical stream everywhere."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = np.asarray(_kernels.splitmix64_seed(np.uint64(self.seed)), dtype=np.uint64).copy()

    @classmethod
    def for_purpose(cls, seed: int, tag: str) -> "Rng":
        return cls(derive_seed(seed, tag))

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _kernels.xoshiro_fill(self.state, out)
        return out

    def random(self, n: int) -> np.ndarray:
        """Uniform float64 in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _kernels.INV_2_53

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def bits(self, n: int) -> np.ndarray:
        """One fair bit per draw (the top bit)."""
        return (self.next_u64(n) >> np.uint64(63)).astype(np.uint8)

    def integers(self, bound: int, n: int) -> np.ndarray:
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return np.floor(self.random(n) * bound).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        arr = np.arange(n, dtype=np.int64)
        if n > 1:
            _kernels.partial_shuffle(self.state, arr, n - 1)
        return arr

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        arr = np.arange(n, dtype=np.int64)
        if k:
            _kernels.partial_shuffle(self.state, arr, k)
        return arr[:k].copy()
