"""Intensity and local-binary-pattern histograms.

LBP here is the classic 3x3 operator: 8 neighbours at radius 1 on the pixel
grid (no interpolation), bit set when ``neighbour >= centre``, borders
edge-replicated. Codes are folded into the 59 "uniform" bins: one per
pattern with at most two circular 0/1 transitions (58 of them) plus a
shared bin for everything else.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

N_INTENSITY_BINS = 32
N_LBP_BINS = 59

# clockwise from the top-left neighbour; bit i <-> _OFFSETS[i]
_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _build_uniform_table() -> np.ndarray:
    table = np.full(256, N_LBP_BINS - 1, dtype=np.int64)
    nxt = 0
    for code in range(256):
        if _transitions(code) <= 2:
            table[code] = nxt
            nxt += 1
    assert nxt == N_LBP_BINS - 1
    return table


UNIFORM_TABLE = _build_uniform_table()


@njit(cache=True)
def _lbp_numba(img, table):
    h, w = img.shape
    out = np.empty((h, w), dtype=np.int64)
    dy = (-1, -1, -1, 0, 1, 1, 1, 0)
    dx = (-1, 0, 1, 1, 1, 0, -1, -1)
    for y in range(h):
        for x in range(w):
            c = img[y, x]
            code = 0
            for b in range(8):
                yy = min(max(y + dy[b], 0), h - 1)
                xx = min(max(x + dx[b], 0), w - 1)
                if img[yy, xx] >= c:
                    code |= 1 << b
            out[y, x] = table[code]
    return out


def _lbp_numpy(img, table):
    h, w = img.shape
    pad = np.pad(img, 1, mode="edge")
    centre = pad[1 : h + 1, 1 : w + 1]
    code = np.zeros((h, w), dtype=np.int64)
    for bit, (dy, dx) in enumerate(_OFFSETS):
        nb = pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        code |= (nb >= centre).astype(np.int64) << bit
    return table[code]


def lbp_codes(image: np.ndarray) -> np.ndarray:
    """Uniform-LBP bin index (0..58) for every pixel."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if _accel.USE_NUMBA:
        return _lbp_numba(img, UNIFORM_TABLE)
    return _lbp_numpy(img, UNIFORM_TABLE)


def intensity_histogram(pixels: np.ndarray, bins: int = N_INTENSITY_BINS) -> np.ndarray:
    """Unit-sum histogram of 8-bit intensities in ``bins`` equal-width bins."""
    px = np.asarray(pixels, dtype=np.uint8).ravel()
    counts = np.bincount(px.astype(np.int64) * bins // 256, minlength=bins)
    return counts / px.size


def lbp_histogram(codes: np.ndarray) -> np.ndarray:
    """Unit-sum histogram of precomputed LBP bin indices."""
    c = np.asarray(codes).ravel()
    return np.bincount(c, minlength=N_LBP_BINS) / c.size
