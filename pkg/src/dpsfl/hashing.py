"""Seeded 64-bit mixing, used for sketch hashes and sub-seed derivation.

Everything here is a pure function of its integer inputs, so any quantity
derived through it is reproducible across platforms and runs.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 increment and finalizer constants
_INC = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_S1 = np.uint64(30)
_S2 = np.uint64(27)
_S3 = np.uint64(31)


def mix64(x) -> np.ndarray:
    """splitmix64 finalizer over a uint64 scalar or array.

    Arithmetic stays in array form throughout: numpy wraps array uint64
    silently but warns on scalar overflow, and 0-d arrays decay to scalars
    after one operation, so inputs are lifted to 1-d and reshaped back.
    """
    z = np.atleast_1d(np.asarray(x, dtype=np.uint64)) + _INC
    z = (z ^ (z >> _S1)) * _MUL1
    z = (z ^ (z >> _S2)) * _MUL2
    z = z ^ (z >> _S3)
    return z.reshape(np.shape(x))


def derive_seed(*parts: int) -> int:
    """Fold integer components into one 64-bit seed.

    Components are absorbed sequentially, so (a, b) and (b, a) give
    unrelated seeds. Strings may be used as lightweight labels.
    """
    state = np.uint64(0)
    for part in parts:
        if isinstance(part, str):
            part = int.from_bytes(part.encode()[:8].ljust(8, b"\0"), "little")
        state = mix64(state ^ np.uint64(int(part) & _MASK64))[()]
    return int(state)
