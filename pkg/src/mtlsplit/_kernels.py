"""Sequential integer kernels with a numba fast path and a pure-Python fallback.

Set ``MTLSPLIT_DISABLE_NUMBA=1`` to force the fallback.  Both paths produce
bitwise-identical outputs; float math in here is restricted to plain IEEE
arithmetic (no fastmath, no transcendental calls) so that holds.
"""

from __future__ import annotations

import logging
import os

import numpy as np

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
INV_2_53 = 1.0 / 9007199254740992.0

SHAPE_SQUARE = 0
SHAPE_CIRCLE = 1
SHAPE_TRIANGLE = 2
SHAPE_CROSS = 3


def _env_disabled() -> bool:
    return os.environ.get("MTLSPLIT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# pure-Python reference path


def py_splitmix64_seed(seed: int) -> np.ndarray:
    x = int(seed) & MASK64
    out = np.empty(4, dtype=np.uint64)
    for i in range(4):
        x = (x + 0x9E3779B97F4A7C15) & MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out[i] = z ^ (z >> 31)
    return out


def py_xoshiro_fill(state: np.ndarray, out: np.ndarray) -> None:
    s0, s1, s2, s3 = (int(v) for v in state)
    for i in range(out.shape[0]):
        r = (s1 * 5) & MASK64
        r = ((r << 7) | (r >> 57)) & MASK64
        out[i] = (r * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


def py_partial_shuffle(state: np.ndarray, arr: np.ndarray, k: int) -> None:
    n = arr.shape[0]
    draws = np.empty(k, dtype=np.uint64)
    py_xoshiro_fill(state, draws)
    for i in range(k):
        u = float(int(draws[i]) >> 11) * INV_2_53
        j = i + int(u * (n - i))
        arr[i], arr[j] = arr[j], arr[i]


def py_raster_mask(kind: int, w: int, h: int, radius: float) -> np.ndarray:
    mask = np.zeros((w, h), dtype=np.bool_)
    cx = w / 2.0
    cy = h / 2.0
    bar = radius / 3.0
    for i in range(w):
        dx = i + 0.5 - cx
        for j in range(h):
            dy = j + 0.5 - cy
            mask[i, j] = _inside(kind, dx, dy, radius, bar)
    return mask


def _inside(kind, dx, dy, r, bar):
    adx = abs(dx)
    ady = abs(dy)
    if kind == SHAPE_SQUARE:
        return adx <= r and ady <= r
    if kind == SHAPE_CIRCLE:
        return dx * dx + dy * dy <= r * r
    if kind == SHAPE_TRIANGLE:
        # apex at -r on the second axis, base at +r
        return -r <= dy <= r and adx <= (dy + r) * 0.5
    return (adx <= bar and ady <= r) or (ady <= bar and adx <= r)


# ---------------------------------------------------------------------------
# numba path

nb_splitmix64_seed = nb_xoshiro_fill = nb_partial_shuffle = nb_raster_mask = None
HAVE_NUMBA = False

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)

    _U = np.uint64

    @numba.njit(cache=True)
    def _nb_rotl(x, k):
        return (x << _U(k)) | (x >> _U(64 - k))

    @numba.njit(cache=True)
    def nb_splitmix64_seed(seed):
        x = _U(seed)
        out = np.empty(4, dtype=np.uint64)
        for i in range(4):
            x = x + _U(0x9E3779B97F4A7C15)
            z = x
            z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
            out[i] = z ^ (z >> _U(31))
        return out

    @numba.njit(cache=True)
    def nb_xoshiro_fill(state, out):
        s0 = state[0]
        s1 = state[1]
        s2 = state[2]
        s3 = state[3]
        for i in range(out.shape[0]):
            out[i] = _nb_rotl(s1 * _U(5), 7) * _U(9)
            t = s1 << _U(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _nb_rotl(s3, 45)
        state[0] = s0
        state[1] = s1
        state[2] = s2
        state[3] = s3

    @numba.njit(cache=True)
    def nb_partial_shuffle(state, arr, k):
        n = arr.shape[0]
        draws = np.empty(k, dtype=np.uint64)
        nb_xoshiro_fill(state, draws)
        for i in range(k):
            u = float(draws[i] >> _U(11)) * INV_2_53
            j = i + int(u * (n - i))
            tmp = arr[i]
            arr[i] = arr[j]
            arr[j] = tmp

    @numba.njit(cache=True)
    def _nb_inside(kind, dx, dy, r, bar):
        adx = abs(dx)
        ady = abs(dy)
        if kind == 0:
            return adx <= r and ady <= r
        if kind == 1:
            return dx * dx + dy * dy <= r * r
        if kind == 2:
            return -r <= dy and dy <= r and adx <= (dy + r) * 0.5
        return (adx <= bar and ady <= r) or (ady <= bar and adx <= r)

    @numba.njit(cache=True)
    def nb_raster_mask(kind, w, h, radius):
        mask = np.zeros((w, h), dtype=np.bool_)
        cx = w / 2.0
        cy = h / 2.0
        bar = radius / 3.0
        for i in range(w):
            dx = i + 0.5 - cx
            for j in range(h):
                dy = j + 0.5 - cy
                mask[i, j] = _nb_inside(kind, dx, dy, radius, bar)
        return mask

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    log.debug("numba unavailable, using pure-Python kernels")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

if USE_NUMBA:
    splitmix64_seed = nb_splitmix64_seed
    xoshiro_fill = nb_xoshiro_fill
    partial_shuffle = nb_partial_shuffle
    raster_mask = nb_raster_mask
else:
    splitmix64_seed = py_splitmix64_seed
    xoshiro_fill = py_xoshiro_fill
    partial_shuffle = py_partial_shuffle
    raster_mask = py_raster_mask
