"""Cross-batch cell-line identification from brightfield time-lapse sequences.

Stages: segmentation and cluster-level patch selection (``ccs``), patch
embedding (``embedding``), time-series-sampled gated-attention MIL (``mil``),
evaluation under batch-aware splits (``evaluation``), a synthetic corpus
generator (``synth``) and the ``clanet`` command line (``cli``).
"""
from ._accel import HAS_NUMBA, backend

__version__ = "0.1.0"

__all__ = ["HAS_NUMBA", "__version__", "backend"]
