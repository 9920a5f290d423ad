"""Counter-based random number streams for reproducible parallel transport.

Philox2x64-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3",
SC'11).  The key is the run seed and the 128-bit counter is split into
(photon index, draw index), so every photon owns a statistically independent
stream addressed purely by integers.  Draws are therefore identical no matter
which worker executes the photon or in what order photons are scheduled.

Each draw consumes one counter tick and returns the first 64-bit lane mapped
to a double in the half-open-at-zero interval (0, 1].
"""

from __future__ import annotations

import numpy as np
from numba import njit

PHILOX_M = np.uint64(0xD2B74407B1CE6E93)
PHILOX_W = np.uint64(0x9E3779B97F4A7C15)
_MASK32 = np.uint64(0xFFFFFFFF)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2^-53


@njit(cache=True)
def _mulhilo64(a, b):
    # 64x64 -> 128 bit product via 32-bit limbs; uint64 arithmetic wraps.
    a = np.uint64(a)
    b = np.uint64(b)
    lo = a * b
    a_lo = a & _MASK32
    a_hi = a >> np.uint64(32)
    b_lo = b & _MASK32
    b_hi = b >> np.uint64(32)
    t = a_hi * b_lo + ((a_lo * b_lo) >> np.uint64(32))
    carry = ((t & _MASK32) + a_lo * b_hi) >> np.uint64(32)
    hi = a_hi * b_hi + (t >> np.uint64(32)) + carry
    return hi, lo


@njit(cache=True)
def philox2x64(c0, c1, key):
    """One Philox2x64-10 block: counter (c0, c1) under ``key`` -> two u64."""
    x0 = np.uint64(c0)
    x1 = np.uint64(c1)
    k = np.uint64(key)
    for _ in range(10):
        hi, lo = _mulhilo64(PHILOX_M, x0)
        x0 = hi ^ k ^ x1
        x1 = lo
        k = k + PHILOX_W
    return x0, x1


@njit(cache=True)
def uniform_draw(seed, photon_index, draw_index):
    """Deterministic uniform double in (0, 1] for one (stream, tick)."""
    r0, _ = philox2x64(photon_index, draw_index, seed)
    return ((r0 >> np.uint64(11)) + np.uint64(1)) * _INV_2_53


@njit(cache=True)
def fill_uniforms(out, seed, photon_index, start):
    for i in range(out.shape[0]):
        out[i] = uniform_draw(np.uint64(seed), np.uint64(photon_index),
                              np.uint64(start + i))


class RngStream:
    """Sequential view of one photon's counter-based stream.

    Same (seed, index) always reproduces the same sequence; distinct indices
    give independent streams of the keyed generator.
    """

    def __init__(self, seed: int, index: int):
        self.seed = np.uint64(seed)
        self.index = np.uint64(index)
        self._pos = 0

    def uniform(self) -> float:
        u = uniform_draw(self.seed, self.index, np.uint64(self._pos))
        self._pos += 1
        return float(u)

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        fill_uniforms(out, self.seed, self.index, self._pos)
        self._pos += n
        return out


def rng_stream(seed: int, photon_index: int) -> RngStream:
    """Stream factory matching the engine's per-photon keying."""
    return RngStream(seed, photon_index)
