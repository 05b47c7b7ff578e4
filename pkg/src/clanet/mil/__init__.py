"""Multiple-instance learning head with time-series segment sampling."""
from .model import (
    AGGREGATORS,
    MILDivergence,
    MILModel,
    aggregate,
    init_model,
    load_checkpoint,
    loss_and_grads,
    pool,
    predict,
    save_checkpoint,
)
from .train import TrainConfig, train
from .tss import (
    IntervalModel,
    SampledSequence,
    build_interval_model,
    expected_interval,
    reweight,
    sample_interval,
    segment_bounds,
    snap,
    tss_sample,
)

__all__ = [
    "AGGREGATORS",
    "IntervalModel",
    "MILDivergence",
    "MILModel",
    "SampledSequence",
    "TrainConfig",
    "aggregate",
    "build_interval_model",
    "expected_interval",
    "init_model",
    "load_checkpoint",
    "loss_and_grads",
    "pool",
    "predict",
    "reweight",
    "sample_interval",
    "save_checkpoint",
    "segment_bounds",
    "snap",
    "train",
    "tss_sample",
]
