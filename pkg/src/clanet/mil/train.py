"""Epoch loop: per-sequence interval draws, snippet sampling, weighted accumulation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..core import EmbeddingSequence, Rng
from ..optim import make_optimizer
from .model import MILDivergence, MILModel, init_model, loss_and_grads
from .tss import IntervalModel, build_interval_model, reweight, sample_interval, tss_indices

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch: int = 32
    lr: float = 5e-4
    alpha1: int = 1
    alpha2: int = 1
    optimizer: str = "sgd"
    hidden: int = 128
    aggregator: str = "gated"
    use_tss: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.alpha1 not in (0, 1) or self.alpha2 not in (0, 1):
            raise ValueError("alpha1 and alpha2 must be 0 or 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class _Bag:
    """Training-time view of one sequence with its instance rows pre-stacked."""

    def __init__(self, seq: EmbeddingSequence, label: int, interval_model: IntervalModel):
        self.X = seq.instances().astype(np.float64)
        sizes = np.array([f.shape[0] for f in seq.frames])
        self.bounds = np.concatenate(([0], np.cumsum(sizes)))
        self.timestamps = seq.timestamps
        self.n_frames = len(seq)
        self.label = int(label)
        self.mu = interval_model.mu(seq.timestamps)

    def rows(self, frame_idx: Sequence[int]) -> np.ndarray:
        if len(frame_idx) == self.n_frames:
            return self.X
        return np.concatenate([self.X[self.bounds[i] : self.bounds[i + 1]] for i in frame_idx], axis=0)


def train(
    model: MILModel | None,
    sequences: Sequence[EmbeddingSequence],
    labels: Sequence[int],
    config: TrainConfig,
    rng: Rng,
    n_classes: int | None = None,
) -> tuple[MILModel, list[float]]:
    """Train (a copy of) ``model``; a fresh one is initialised when ``model`` is None.

    Returns the trained model and the mean weighted loss of every epoch.
    """
    if not sequences:
        raise ValueError("no training sequences")
    dims = {s.dim for s in sequences}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
    init_rng, order_rng, tss_rng = rng.spawn(3)
    if model is None:
        c = n_classes if n_classes is not None else int(max(labels)) + 1
        model = init_model(dims.pop(), c, config.hidden, init_rng.generator, config.aggregator)
    else:
        model = model.copy()
    imodel = build_interval_model(s.timestamps for s in sequences)
    bags = [_Bag(s, y, imodel) for s, y in zip(sequences, labels)]
    opt = make_optimizer(config.optimizer, config.lr)
    keys = model.trainable()
    history = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(bags))
        epoch_loss, n_steps = 0.0, 0
        for start in range(0, len(order), config.batch):
            batch_x, batch_y, batch_w = [], [], []
            for i in order[start : start + config.batch]:
                bag = bags[i]
                if config.use_tss:
                    interval = sample_interval(imodel, bag.mu, tss_rng)
                    idx, sampled = tss_indices(bag.n_frames, interval, bag.mu, tss_rng)
                    w = reweight(None, bag.n_frames, bag.mu, interval, config.alpha1, config.alpha2,
                                 n_kept=len(idx), kept_timestamps=bag.timestamps[list(idx)],
                                 was_sampled=sampled)
                else:
                    idx, w = range(bag.n_frames), 1.0
                batch_x.append(bag.rows(list(idx)))
                batch_y.append(bag.label)
                batch_w.append(w)
            if not sum(batch_w) > 0:
                batch_w = [1.0] * len(batch_w)
            try:
                loss, grads = loss_and_grads(model, batch_x, batch_y, batch_w)
            except MILDivergence as exc:
                raise MILDivergence(f"epoch {epoch}, step {n_steps}: {exc}") from None
            opt.step(model.params, {k: grads[k] for k in keys})
            epoch_loss += loss
            n_steps += 1
        history.append(epoch_loss / n_steps)
        if (epoch + 1) % 250 == 0:
            log.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1])
    model.meta = {"sigma": imodel.sigma, "candidates": list(imodel.candidates)}
    return model, history
