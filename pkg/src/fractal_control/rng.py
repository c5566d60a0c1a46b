"""Counter-based per-path random streams (SplitMix64).

Each path owns a stream keyed by ``(master_seed, path_index)``, so a batch
gives the same draws whatever the worker count or batch split.  The
functions below operate on numpy uint64 scalars or arrays and are also
compiled with numba by :mod:`fractal_control._kernels`; both routes yield
identical bits.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_KEY = np.uint64(0xD1B54A32D192ED03)
TO_UNIT = 2.0 ** -53


def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def stream_state(seed, path):
    """Initial state of the stream for ``path`` under master ``seed``."""
    return mix64(mix64(seed * GAMMA + _KEY) ^ mix64(path + _ONE))


def unit_float(z):
    """Top 53 bits of ``z`` as a float in [0, 1)."""
    return (z >> _S11) * TO_UNIT


def path_states(seed: int, path0: int, n: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        paths = np.arange(path0, path0 + n, dtype=np.uint64)
        return stream_state(np.uint64(seed), paths)


def uniforms(seed: int, path0: int, n: int, draws: int) -> np.ndarray:
    """``(n, draws)`` uniforms from the per-path streams (test helper)."""
    s = path_states(seed, path0, n)
    out = np.empty((n, draws))
    with np.errstate(over="ignore"):
        for j in range(draws):
            s = s + GAMMA
            out[:, j] = unit_float(mix64(s))
    return out
