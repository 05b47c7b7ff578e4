"""Deterministic hand-crafted patch descriptor (the default embedding)."""
from __future__ import annotations

import math

import numpy as np

from ..texture import intensity_histogram, lbp_codes, lbp_histogram

GRID = 4
RAW_DIM = 32 + 59 + GRID * GRID * 2 + 1


def _l2_normalise(v: np.ndarray) -> np.ndarray:
    norm = math.sqrt(math.fsum((v * v).tolist()))
    return v / norm if norm > 0 else v.copy()


def _grid_stats(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean and population std on a 4x4 grid, from exact integer sums."""
    img = patch.astype(np.int64)
    rows = np.array_split(np.arange(img.shape[0]), GRID)
    cols = np.array_split(np.arange(img.shape[1]), GRID)
    means = np.empty(GRID * GRID)
    stds = np.empty(GRID * GRID)
    k = 0
    for r in rows:
        for c in cols:
            cell = img[r[0] : r[-1] + 1, c[0] : c[-1] + 1]
            n = cell.size
            s1 = int(cell.sum())
            s2 = int((cell * cell).sum())
            means[k] = s1 / n
            stds[k] = math.sqrt(n * s2 - s1 * s1) / n
            k += 1
    return means, stds


def descriptor_embed(patch: np.ndarray, density: float = 0.0, dim: int = 128) -> np.ndarray:
    """Concatenated intensity histogram, LBP histogram, grid means, grid stds, density.

    Histograms sum to one, grid blocks have unit L2 norm (all-zero blocks stay
    zero), ``density`` is the patch's foreground fraction. The 124 raw values
    are zero-padded or truncated to ``dim``.
    """
    p = np.asarray(patch, dtype=np.uint8)
    if p.ndim != 2 or min(p.shape) < GRID:
        raise ValueError(f"patch must be 2-D and at least {GRID}x{GRID}, got {p.shape}")
    means, stds = _grid_stats(p)
    raw = np.concatenate(
        [
            intensity_histogram(p),
            lbp_histogram(lbp_codes(p)),
            _l2_normalise(means),
            _l2_normalise(stds),
            [float(density)],
        ]
    )
    out = np.zeros(dim, dtype=np.float64)
    n = min(dim, raw.size)
    out[:n] = raw[:n]
    return out
