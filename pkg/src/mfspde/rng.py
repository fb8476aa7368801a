"""Deterministic seeding.

Every random number in the package descends from one 64-bit master seed.
Stream ``i`` is seeded with ``splitmix64(seed ^ ((i + 1) * GOLDEN))`` and
drives its own :class:`numpy.random.Generator`, so particle ``i`` sees the
same draws no matter how work is split across threads.
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One SplitMix64 output for state ``x`` (state advanced by GOLDEN first)."""
    z = (int(x) + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream_seed(seed, i):
    return splitmix64(check_seed(seed) ^ (((i + 1) * GOLDEN) & MASK64))


def stream(seed, i):
    """Generator for stream ``i`` of master ``seed``."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, i)))


def streams(seed, n, offset=0):
    return [stream(seed, offset + i) for i in range(n)]


def child_seed(seed, label):
    """Derive an independent master seed for a sub-experiment (e.g. MC rep)."""
    return splitmix64(check_seed(seed) ^ splitmix64(label + 0x5EED))
