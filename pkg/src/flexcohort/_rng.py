"""Counter-based random streams built on the splitmix64 finalizer.

Every random draw is a pure function of ``(seed, person, stream, counter)``:

    key(seed, a, b, ...) = derive(...derive(derive(seed, a), b)..., ...)
    derive(k, n)         = splitmix64(k XOR splitmix64(n + GOLDEN))
    uniform(key)         = (splitmix64(key) >> 11 + 0.5) * 2**-53

so draws for one person never depend on how many other persons were generated
before it, or on which worker generated them.
"""

from __future__ import annotations

import zlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """Vectorised splitmix64 output function (uint64 in, uint64 out)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive(key, n):
    """Child key of ``key`` for integer label ``n`` (both broadcastable)."""
    key = np.asarray(key, dtype=np.uint64)
    n = np.asarray(n, dtype=np.uint64)
    return splitmix64(key ^ splitmix64(n))


def uniform(key):
    """Map keys to floats strictly inside (0, 1)."""
    bits = splitmix64(key) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (2.0 ** -53)


def seed_key(seed: int) -> np.uint64:
    return np.uint64(int(seed) & _MASK64)


def label_hash(label: str) -> int:
    """Stable 32-bit hash of a text label (independent of PYTHONHASHSEED)."""
    return zlib.crc32(label.encode("utf-8"))


def sub_seed(seed: int, label: str) -> int:
    """Derive an independent integer seed for a named sub-task."""
    return int(derive(seed_key(seed), label_hash(label)))


def numpy_rng(seed: int, label: str = "") -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, label) if label else int(seed) & _MASK64)
