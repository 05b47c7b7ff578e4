"""Time-series segment sampling: interval model, snippet sampling, bag weights."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..core import EmbeddingSequence, Rng


def round_half_up(x: float) -> int:
    """Nearest integer, halves away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def expected_interval(timestamps: Sequence[float]) -> int | None:
    """Rounded mean frame spacing in hours; ``None`` for single-frame sequences.

    The mean of consecutive differences telescopes to (T_N - T_1) / (N - 1).
    Spacings under half an hour still count as 1.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size < 2:
        return None
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    return max(1, round_half_up((ts[-1] - ts[0]) / (ts.size - 1)))


@dataclass(frozen=True)
class IntervalModel:
    sigma: float
    candidates: tuple[int, ...]  # sorted distinct per-sequence intervals

    def mu(self, timestamps: Sequence[float]) -> int:
        m = expected_interval(timestamps)
        return self.candidates[0] if m is None else m


def build_interval_model(timestamp_sets: Iterable[Sequence[float]]) -> IntervalModel:
    """Population std of per-sequence expected intervals, plus their distinct values."""
    mus = [m for m in (expected_interval(ts) for ts in timestamp_sets) if m is not None]
    if not mus:
        return IntervalModel(0.0, (1,))
    return IntervalModel(float(np.std(np.asarray(mus, dtype=np.float64))), tuple(sorted(set(mus))))


def snap(value: float, candidates: Sequence[int]) -> int:
    """Closest candidate; ties go to the smaller one."""
    c = np.asarray(candidates, dtype=np.float64)
    return int(candidates[int(np.argmin(np.abs(c - value)))])


def sample_interval(model: IntervalModel, mu_s: int, rng: Rng) -> int:
    """Draw from N(mu_s, sigma^2) and snap to the candidate set.

    Exactly one normal variate is consumed per call, whatever sigma is.
    """
    z = float(rng.generator.standard_normal())
    return snap(mu_s + model.sigma * z, model.candidates)


@dataclass(frozen=True)
class SampledSequence:
    embeddings: EmbeddingSequence
    indices: tuple[int, ...]
    sampled: bool

    @property
    def timestamps(self) -> np.ndarray:
        return self.embeddings.timestamps

    def __len__(self) -> int:
        return len(self.indices)


def segment_bounds(n_frames: int, chunk: int) -> list[tuple[int, int]]:
    """Consecutive ``[start, stop)`` chunks of length ``chunk``; the last may be shorter."""
    return [(s, min(s + chunk, n_frames)) for s in range(0, n_frames, chunk)]


def tss_indices(n_frames: int, interval: int, mu_s: int, rng: Rng) -> tuple[tuple[int, ...], bool]:
    if interval <= mu_s:
        return tuple(range(n_frames)), False
    chunk = interval // mu_s
    gen = rng.generator
    return tuple(int(gen.integers(a, b)) for a, b in segment_bounds(n_frames, chunk)), True


def tss_sample(seq: EmbeddingSequence, interval: int, mu_s: int, rng: Rng) -> SampledSequence:
    """One random frame per segment, or the full sequence when ``interval <= mu_s``."""
    idx, sampled = tss_indices(len(seq), interval, mu_s, rng)
    return SampledSequence(seq.take(idx) if sampled else seq, idx, sampled)


def reweight(
    sampled: SampledSequence | None,
    n_frames: int,
    mu_s: int,
    interval: int,
    alpha1: int = 1,
    alpha2: int = 1,
    *,
    n_kept: int | None = None,
    kept_timestamps: Sequence[float] | None = None,
    was_sampled: bool | None = None,
) -> float:
    """Bag weight: ``alpha1 * V/N + alpha2 * (mu(kept) - mu_s) / (interval - mu_s)``.

    Unsampled bags always weigh 1, as do all bags when both alphas are 0. The
    second term is 0 when it is undefined (unsampled, ``interval == mu_s`` or
    fewer than two kept frames) and is not clamped above.
    """
    if sampled is not None:
        n_kept = len(sampled)
        kept_timestamps = sampled.timestamps
        was_sampled = sampled.sampled
    if not was_sampled or (alpha1 == 0 and alpha2 == 0):
        return 1.0
    w = alpha1 * n_kept / n_frames
    if alpha2 and interval != mu_s:
        mu_hat = expected_interval(kept_timestamps)
        if mu_hat is not None:
            w += alpha2 * (mu_hat - mu_s) / (interval - mu_s)
    return float(w)
