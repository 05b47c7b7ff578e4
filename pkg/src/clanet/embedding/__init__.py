"""Patch embedding providers.

A provider maps one patch (plus its foreground fraction) to a fixed-length
vector. ``descriptor`` is the deterministic default, ``ssl`` wraps a trained
teacher encoder, and ``archive`` passes through embeddings computed
elsewhere and stored in ``.clae`` archives.
"""
from __future__ import annotations

from pathlib import Path
from typing import Protocol

import numpy as np

from ..core import EmbeddingSequence, read_embedding_dir
from .descriptor import descriptor_embed
from .ssl import (
    CropConfig,
    CropSet,
    SslConfig,
    SslModel,
    dino_loss,
    ema_update,
    load_ssl_model,
    multi_crop,
    save_ssl_model,
    ssl_embed,
    train_ssl,
)


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed(self, patch: np.ndarray, density: float = 0.0) -> np.ndarray: ...


class DescriptorProvider:
    name = "descriptor"

    def __init__(self, dim: int = 128):
        self.dim = dim

    def embed(self, patch: np.ndarray, density: float = 0.0) -> np.ndarray:
        return descriptor_embed(patch, density, self.dim)


class SslProvider:
    name = "ssl"

    def __init__(self, model: SslModel):
        self.model = model
        self.dim = model.dim

    def embed(self, patch: np.ndarray, density: float = 0.0) -> np.ndarray:
        return ssl_embed(self.model, patch)


class ArchiveProvider:
    """Serves whole precomputed sequences; it never embeds single patches."""

    name = "archive"

    def __init__(self, directory: str | Path):
        self.sequences = read_embedding_dir(directory)
        if not self.sequences:
            raise FileNotFoundError(f"no .clae archives in {directory}")
        dims = {s.dim for s in self.sequences.values()}
        if len(dims) != 1:
            raise ValueError(f"archives disagree on embedding dimension: {sorted(dims)}")
        self.dim = dims.pop()

    def embed(self, patch, density=0.0):
        raise TypeError("archive provider serves whole sequences; use .get(sequence_id)")

    def get(self, sequence_id: str) -> EmbeddingSequence:
        return self.sequences[sequence_id]


__all__ = [
    "ArchiveProvider",
    "CropConfig",
    "CropSet",
    "DescriptorProvider",
    "EmbeddingProvider",
    "SslConfig",
    "SslModel",
    "SslProvider",
    "descriptor_embed",
    "dino_loss",
    "ema_update",
    "load_ssl_model",
    "multi_crop",
    "save_ssl_model",
    "ssl_embed",
    "train_ssl",
]
