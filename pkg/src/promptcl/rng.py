"""Deterministic counter-based random number generation.

Every random draw in this package comes from a single documented generator so
that runs are bit-reproducible and the streams can be re-derived in any
language:

* Core stream: the splitmix64 output function applied to a 64-bit counter,
  ``out(i) = mix64((key + (i + 1) * GOLDEN) mod 2^64)`` where
  ``GOLDEN = 0x9E3779B97F4A7C15`` and ``mix64`` is the splitmix64 finalizer
  (xor-shift 30, mul 0xBF58476D1CE4E5B9, xor-shift 27, mul
  0x94D049BB133111EB, xor-shift 31).
* Keys: a root key is ``mix64(seed)``. Child streams are keyed by
  ``mix64(parent_key ^ fnv1a64(label))`` so that consuming one stream never
  shifts another. Label-derived streams are how per-task / per-epoch
  determinism is kept independent of execution order.
* uniform doubles: top 53 bits of a u64, ``(x >> 11) * 2^-53`` in [0, 1).
* normals: Box-Muller on consecutive uniform pairs, with the first uniform
  shifted to (0, 1] to keep log() finite.
* integers / permutations: ``floor(u * span)`` and Fisher-Yates.

Being counter-based, the generator is stateless per draw and vectorizes with
uint64 numpy arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int, mod 2^64."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK
    return z ^ (z >> 31)


def fnv1a64(label: str) -> int:
    """FNV-1a 64-bit hash of a UTF-8 string, used for stream labels."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MUL1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MUL2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Seedable counter-based stream (see module docstring for the spec)."""

    def __init__(self, seed: int, _key: int | None = None):
        self.key = mix64(seed) if _key is None else _key
        self.counter = 0

    def child(self, label: str) -> "Rng":
        """Independent stream derived from this one by a string label."""
        return Rng(0, _key=mix64(self.key ^ fnv1a64(label)))

    def u64(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit outputs as a uint64 array."""
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        return _mix64_array(np.uint64(self.key) + idx * np.uint64(GOLDEN))

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        out = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller, scaled and shifted."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        raw = self.u64(2 * pairs)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers uniform in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = (self.u64(n - 1) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, pool: np.ndarray, count: int) -> np.ndarray:
        """First `count` entries of a partial Fisher-Yates shuffle of `pool`."""
        pool = np.asarray(pool).copy()
        n = len(pool)
        if count > n:
            raise ValueError(f"cannot sample {count} from pool of {n}")
        u = (self.u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        for i in range(count):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:count]
