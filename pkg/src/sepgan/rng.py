"""Deterministic counter-based random number generation.

Every stream is a pure function of (key, counter), so any point in a run can
be reconstructed from two integers.  Child streams are derived by name, which
keeps independent consumers (weight init, batch shuffling, target labels,
renderer) from stealing numbers from each other.
"""
from __future__ import annotations

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_FNV_OFFSET = _U64(0xCBF29CE484222325)
_FNV_PRIME = _U64(0x100000001B3)

_INV_2_53 = float(2.0**-53)


def _mix(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; wraps on uint64 overflow by construction."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _hash_tag(tag: str) -> np.uint64:
    h = _FNV_OFFSET
    for b in tag.encode("utf-8"):
        h = (h ^ _U64(b)) * _FNV_PRIME
    return h


class Rng:
    """Seedable counter-based generator with bit-exact replay.

    The state is the pair (key, counter).  ``raw`` hands out uint64 words by
    hashing successive counter values, so identical seeds give identical
    streams regardless of how draws were batched.
    """

    def __init__(self, seed: int, _key: np.uint64 | None = None, _counter: int = 0):
        if _key is None:
            _key = _mix(_U64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        self._key = _U64(_key)
        self._counter = int(_counter)
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    @property
    def state(self) -> tuple[int, int]:
        return (int(self._key), self._counter)

    @classmethod
    def from_state(cls, key: int, counter: int) -> "Rng":
        return cls(0, _key=_U64(key), _counter=counter)

    def derive(self, tag: str) -> "Rng":
        """Independent child stream; does not consume from this stream."""
        child_key = _mix(self._key ^ (_hash_tag(tag) * _GOLDEN))
        return Rng(0, _key=child_key, _counter=0)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        return _mix(self._key + (idx + _U64(1)) * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        """Standard normal via Box-Muller on paired uniforms."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # shift into (0, 1] so log never sees zero
        u1 = (self.raw(m) >> _U64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * _INV_2_53
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound); modulo bias is negligible for
        the small bounds used here (domain counts, dataset sizes)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.raw(n) % _U64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n) by sorting random keys."""
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k indices from range(n) without replacement (k <= n)."""
        if k > n:
            raise ValueError(f"cannot draw {k} from {n} without replacement")
        return self.permutation(n)[:k]
