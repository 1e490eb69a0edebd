"""Counter-based random number generation for reproducible filtering.

Every random draw in the filters is addressed by (master seed, epoch,
purpose, draw index) through a splitmix64-style hash, so results are
bit-identical regardless of evaluation order or compute backend. Particle
``i`` always owns a fixed slice of draw indices within its stream.
"""

from __future__ import annotations

import numpy as np

# Stream purposes. Keep values stable: they are part of the draw addressing.
INIT = 0
PREDICT = 1
RESAMPLE = 2

_PHI = np.uint64(0x9E3779B97F4A7C15)
_MU = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

_TWO_POW_NEG53 = 2.0**-53


def _mix(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; full-avalanche 64-bit mix."""
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, epoch: int, purpose: int) -> int:
    """Derive the 64-bit key of the (seed, epoch, purpose) draw stream."""
    with np.errstate(over="ignore"):
        k = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _PHI + _MU)
        k = _mix(k + np.uint64(epoch) * _PHI)
        k = _mix(k + np.uint64(purpose) * _MU)
    return int(k)


def uniforms(key: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` doubles in (0, 1), draws ``offset .. offset+n-1`` of the stream."""
    with np.errstate(over="ignore"):
        idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        x = _mix(np.uint64(key) + idx * _PHI)
    # (0, 1): keep 53 bits and center within the lattice so u is never 0.
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_NEG53


def normals(key: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` standard normals; draw ``j`` consumes uniforms ``2j`` and ``2j+1``.

    Box-Muller on the counter stream: the j-th normal is a pure function of
    (key, offset + j), independent of how many are requested at once.
    """
    u = uniforms(key, 2 * n, offset=2 * offset)
    u1 = u[0::2]
    u2 = u[1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
