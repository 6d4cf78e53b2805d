"""Deterministic seed derivation.

Every random stream in the package is derived from one global seed by
mixing in labels and indices, so that any stage can be re-run in isolation.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One round of the SplitMix64 finalizer on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix(seed, index):
    """Combine a 64-bit seed with an integer index."""
    return splitmix64((seed & MASK64) ^ splitmix64(index & MASK64))


def _label_code(label):
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive(seed, *labels):
    """Derive a sub-seed from ``seed`` and a path of labels (str or int)."""
    out = seed & MASK64
    for label in labels:
        code = label if isinstance(label, (int, np.integer)) else _label_code(label)
        out = mix(out, int(code))
    return out


def rng_for(seed, *labels):
    return np.random.Generator(np.random.PCG64(derive(seed, *labels)))
