"""Splits, sequence/batch-level metrics, voting, and the truncation study."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import DatasetManifest, EmbeddingSequence, Rng

STRATEGIES = ("separated", "stratified")
TRUNCATION_FRACTIONS = (0.01, 0.25, 0.5, 0.75, 1.0)


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    strategy: str
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def batches(self, manifest: DatasetManifest) -> tuple[set[str], set[str]]:
        by_id = {s.sequence_id: s.batch_id for s in manifest.sequences}
        return {by_id[i] for i in self.train}, {by_id[i] for i in self.test}


def _allocate(total: int, caps: Sequence[int], lows: Sequence[int], gen) -> list[int]:
    """Spread ``total`` across bins proportionally to ``caps``, within [low, cap - 1]."""
    n_all = sum(caps)
    exact = [total * c / n_all for c in caps]
    alloc = [min(max(int(math.floor(e)), lo), c - 1) for e, lo, c in zip(exact, lows, caps)]
    remainder = total - sum(alloc)
    order = list(gen.permutation(len(caps)))
    order.sort(key=lambda i: -(exact[i] - math.floor(exact[i])))
    for i in order:
        if remainder <= 0:
            break
        if alloc[i] < caps[i] - 1:
            alloc[i] += 1
            remainder -= 1
    return alloc


def make_split(manifest: DatasetManifest, strategy: str, rng: Rng) -> Split:
    """Batch-separated: one random training batch per class, all other batches test.

    Batch-stratified: every batch is split between train and test, with the
    training total matched to the expected batch-separated training size.
    """
    if strategy not in STRATEGIES:
        raise SplitError(f"unknown strategy {strategy!r}")
    gen = rng.generator
    per_class: dict[int, list[str]] = {c: [] for c in range(len(manifest.classes))}
    for b in manifest.batches:
        per_class[b.class_label].append(b.batch_id)
    for c, bs in per_class.items():
        if not bs:
            raise SplitError(f"class {c} ({manifest.classes[c]!r}) has no batches")
    seqs_of = {b.batch_id: [s.sequence_id for s in manifest.sequences_in(b.batch_id)] for b in manifest.batches}
    if strategy == "separated":
        if all(len(bs) < 2 for bs in per_class.values()):
            raise SplitError("batch-separated split needs a class with at least 2 batches")
        train_batches = {bs[int(gen.integers(len(bs)))] for bs in per_class.values()}
        train = [i for b in manifest.batches if b.batch_id in train_batches for i in seqs_of[b.batch_id]]
        test = [i for b in manifest.batches if b.batch_id not in train_batches for i in seqs_of[b.batch_id]]
        return Split(strategy, tuple(train), tuple(test), rng.seed)

    batch_ids = [b.batch_id for b in manifest.batches]
    caps = [len(seqs_of[b]) for b in batch_ids]
    for b, c in zip(batch_ids, caps):
        if c < 2:
            raise SplitError(f"batch {b!r} has {c} sequence(s); a stratified split needs >= 2")
    # expected training size of a batch-separated split: mean batch size per class
    target = 0.0
    for bs in per_class.values():
        target += np.mean([len(seqs_of[b]) for b in bs])
    alloc = _allocate(int(round(target)), caps, [1] * len(caps), gen)
    train, test = [], []
    for b, k in zip(batch_ids, alloc):
        ids = list(seqs_of[b])
        chosen = set(gen.permutation(len(ids))[:k].tolist())
        train += [ids[i] for i in range(len(ids)) if i in chosen]
        test += [ids[i] for i in range(len(ids)) if i not in chosen]
    return Split(strategy, tuple(train), tuple(test), rng.seed)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def confusion(pred: Sequence[int], labels: Sequence[int], n_classes: int | None = None) -> np.ndarray:
    p = np.asarray(pred, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    c = n_classes or int(max(p.max(), y.max())) + 1
    m = np.zeros((c, c), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    return m


def seq_metrics(pred: Sequence[int], labels: Sequence[int]) -> tuple[float, float]:
    """Top-1 accuracy and macro F1 over the classes present in ``labels``."""
    p = np.asarray(pred, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("need equal-length, non-empty predictions and labels")
    acc = float(np.mean(p == y))
    f1s = []
    for c in np.unique(y):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return acc, float(np.mean(f1s))


def batch_metrics(
    probs: Mapping[str, np.ndarray], manifest: DatasetManifest, soft: bool = True
) -> tuple[float, float]:
    """Accuracy/F1 over batches; each batch predicts from its sequences' outputs.

    ``soft``: argmax of the mean probability vector. Otherwise a majority
    vote of per-sequence argmaxes.
    """
    groups: dict[str, list[np.ndarray]] = {}
    for sid, pv in probs.items():
        groups.setdefault(manifest.sequence(sid).batch_id, []).append(np.asarray(pv, dtype=np.float64))
    if not groups:
        raise ValueError("no predictions")
    pred, labels = [], []
    for b in manifest.batches:
        if b.batch_id not in groups:
            continue
        vs = groups[b.batch_id]
        if soft:
            pred.append(int(np.argmax(np.mean(vs, axis=0))))
        else:
            pred.append(majority_vote([int(np.argmax(v)) for v in vs]))
        labels.append(b.class_label)
    return seq_metrics(pred, labels)


def majority_vote(votes: Sequence[int]) -> int:
    """Most frequent class; ties go to the smallest class index."""
    v = np.asarray(votes, dtype=np.int64)
    if v.size == 0:
        raise ValueError("no votes")
    return int(np.argmax(np.bincount(v)))


@dataclass
class EvalReport:
    seq_acc: float
    batch_acc: float
    seq_f1: float
    batch_f1: float
    n_sequences: int = 0
    n_batches: int = 0
    per_class: dict[int, tuple[int, int]] = field(default_factory=dict)  # class -> (correct, total)

    def row(self) -> list[float]:
        return [self.seq_acc, self.batch_acc, self.seq_f1, self.batch_f1]


METRIC_NAMES = ("seq_acc", "batch_acc", "seq_f1", "batch_f1")


def evaluate_probs(probs: Mapping[str, np.ndarray], manifest: DatasetManifest, soft: bool = True) -> EvalReport:
    ids = list(probs)
    labels = [manifest.sequence(i).class_label for i in ids]
    pred = [int(np.argmax(probs[i])) for i in ids]
    sa, sf = seq_metrics(pred, labels)
    ba, bf = batch_metrics(probs, manifest, soft)
    per_class: dict[int, tuple[int, int]] = {}
    for p, y in zip(pred, labels):
        ok, tot = per_class.get(y, (0, 0))
        per_class[y] = (ok + int(p == y), tot + 1)
    n_batches = len({manifest.sequence(i).batch_id for i in ids})
    return EvalReport(sa, ba, sf, bf, len(ids), n_batches, dict(sorted(per_class.items())))


def summarize(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std of each metric across replicates."""
    arr = np.array([r.row() for r in reports], dtype=np.float64)
    return {name: (float(arr[:, k].mean()), float(arr[:, k].std())) for k, name in enumerate(METRIC_NAMES)}


def table_csv(rows: Mapping[str, Mapping[str, Sequence[EvalReport]]]) -> str:
    """CSV shaped like a comparison table: method x (strategy, metric) as mean and std."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "strategy", *(f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std"))])
    for method, by_strategy in rows.items():
        for strategy, reports in by_strategy.items():
            summ = summarize(reports)
            w.writerow([method, strategy, *(f"{v:.6f}" for m in METRIC_NAMES for v in summ[m])])
    return out.getvalue()


# --------------------------------------------------------------------------
# truncation study
# --------------------------------------------------------------------------


def truncation_length(n_frames: int, fraction: float) -> int:
    """ceil(fraction * n_frames), at least 1; exact for decimal fractions."""
    k = math.ceil(Fraction(str(fraction)) * n_frames)
    return min(max(k, 1), n_frames)


def truncate(seq: EmbeddingSequence, fraction: float, order: str = "natural") -> EmbeddingSequence:
    k = truncation_length(len(seq), fraction)
    if order == "natural":
        return seq.take(range(k))
    if order == "reverse":
        return seq.take(range(len(seq) - k, len(seq)))
    raise ValueError(f"order must be 'natural' or 'reverse', got {order!r}")


def truncation_study(
    predict_fn: Callable[[EmbeddingSequence], np.ndarray],
    test_sequences: Mapping[str, EmbeddingSequence],
    manifest: DatasetManifest,
    fractions: Sequence[float] = TRUNCATION_FRACTIONS,
    order: str = "natural",
) -> dict[float, EvalReport]:
    for f in fractions:
        if f not in TRUNCATION_FRACTIONS:
            raise ValueError(f"fraction {f} not in {TRUNCATION_FRACTIONS}")
    out = {}
    for f in fractions:
        probs = {sid: predict_fn(truncate(seq, f, order)) for sid, seq in test_sequences.items()}
        out[f] = evaluate_probs(probs, manifest)
    return out
