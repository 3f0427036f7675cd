"""Counter-based per-path random streams.

Path ``i`` of stream ``s`` under master seed ``m`` starts from
``path_state(m, s, i)`` and then runs a SplitMix64 sequence, so a path's
normals do not depend on how paths are scheduled across threads.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

U_GOLDEN = np.uint64(GOLDEN)
U_M1 = np.uint64(_M1)
U_M2 = np.uint64(_M2)
TWO_PI = 2.0 * math.pi
INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * U_M1
    z = (z ^ (z >> np.uint64(27))) * U_M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def path_state(seed, stream, index):
    seed = np.uint64(seed)
    stream = np.uint64(stream)
    index = np.uint64(index)
    key = mix64(seed + U_GOLDEN * (stream + np.uint64(1)))
    return mix64(key ^ mix64(index + U_GOLDEN))


@njit(cache=True)
def next_uniform(state):
    """Advance ``state``; return ``(state, u)`` with ``u`` in (0, 1)."""
    state = np.uint64(state) + U_GOLDEN
    out = mix64(state)
    return state, (float(out >> np.uint64(11)) + 0.5) * INV_2_53


@njit(cache=True)
def next_normal_pair(state):
    """Box-Muller pair of independent standard normals."""
    state, u1 = next_uniform(state)
    state, u2 = next_uniform(state)
    rad = math.sqrt(-2.0 * math.log(u1))
    return state, rad * math.cos(TWO_PI * u2), rad * math.sin(TWO_PI * u2)


@njit(cache=True)
def normals(seed, stream, index, count):
    """``count`` normals from the stream of one path (testing and inspection)."""
    state = path_state(seed, stream, index)
    out = np.empty(count)
    k = 0
    while k < count:
        state, a, b = next_normal_pair(state)
        out[k] = a
        if k + 1 < count:
            out[k + 1] = b
        k += 2
    return out


# Pure-Python reference of the same construction.


def py_mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def py_path_state(seed: int, stream: int, index: int) -> int:
    key = py_mix64(seed + GOLDEN * (stream + 1))
    return py_mix64(key ^ py_mix64(index + GOLDEN))


def py_uniforms(seed: int, stream: int, index: int, count: int) -> list[float]:
    state = py_path_state(seed, stream, index)
    out = []
    for _ in range(count):
        state = (state + GOLDEN) & MASK
        out.append(((py_mix64(state) >> 11) + 0.5) * INV_2_53)
    return out


def as_seed(seed) -> np.uint64:
    seed = int(seed)
    if not 0 <= seed <= MASK:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.uint64(seed)
