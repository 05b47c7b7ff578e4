"""Gated-attention MIL aggregator, classifier, losses and checkpoints.

Parameters (``L`` hidden, ``D`` embedding dim, ``C`` classes):

* ``theta`` (L, D), ``phi`` (L, D), ``psi`` (L,) for the attention scores
  ``psi . (tanh(theta f) * sigmoid(phi f))``;
* ``Wc`` (C, D), ``bc`` (C,) for the linear classifier on the pooled bag.

``max`` and ``avg`` aggregators pool instances without attention and only
use the classifier.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..optim import glorot_uniform

AGGREGATORS = ("gated", "max", "avg")
ATTENTION_KEYS = ("theta", "phi", "psi")
CLASSIFIER_KEYS = ("Wc", "bc")

CHECKPOINT_MAGIC = b"CLAM"
CHECKPOINT_VERSION = 1


class MILDivergence(RuntimeError):
    pass


@dataclass
class MILModel:
    params: dict[str, np.ndarray]
    aggregator: str = "gated"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    @property
    def dim(self) -> int:
        return self.params["Wc"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["Wc"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["theta"].shape[0]

    def trainable(self) -> tuple[str, ...]:
        return ATTENTION_KEYS + CLASSIFIER_KEYS if self.aggregator == "gated" else CLASSIFIER_KEYS

    def copy(self) -> "MILModel":
        return MILModel({k: v.copy() for k, v in self.params.items()}, self.aggregator, dict(self.meta))


def init_model(dim: int, n_classes: int, hidden: int = 128, gen: np.random.Generator | None = None,
               aggregator: str = "gated") -> MILModel:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero classifier bias."""
    if min(dim, n_classes, hidden) < 1:
        raise ValueError("dim, n_classes and hidden must be >= 1")
    gen = gen if gen is not None else np.random.default_rng(0)
    params = {
        "theta": glorot_uniform(gen, hidden, dim),
        "phi": glorot_uniform(gen, hidden, dim),
        "psi": glorot_uniform(gen, 1, hidden)[0],
        "Wc": glorot_uniform(gen, n_classes, dim),
        "bc": np.zeros(n_classes),
    }
    return MILModel(params, aggregator)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _instances(bag) -> np.ndarray:
    if hasattr(bag, "instances"):
        bag = bag.instances()
    elif isinstance(bag, (list, tuple)):
        bag = np.concatenate([np.asarray(f) for f in bag], axis=0)
    return np.asarray(bag, dtype=np.float64)


def attention_scores(model: MILModel, X: np.ndarray) -> np.ndarray:
    p = model.params
    return (np.tanh(X @ p["theta"].T) * _sigmoid(X @ p["phi"].T)) @ p["psi"]


def aggregate(model: MILModel, bag) -> tuple[np.ndarray, np.ndarray]:
    """Gated-attention pooling: (bag representation (D,), attention over instances).

    Attention is flat in frame-then-patch order and sums to one.
    """
    X = _instances(bag)
    if X.shape[0] == 0:
        raise ValueError("bag has no instances")
    if X.shape[1] != model.dim:
        raise ValueError(f"instance dimension {X.shape[1]} != model dimension {model.dim}")
    s = attention_scores(model, X)
    e = np.exp(s - s.max())
    A = e / e.sum()
    return A @ X, A


def pool(model: MILModel, bag) -> np.ndarray:
    X = _instances(bag)
    if X.shape[0] == 0:
        raise ValueError("bag has no instances")
    if X.shape[1] != model.dim:
        raise ValueError(f"instance dimension {X.shape[1]} != model dimension {model.dim}")
    if model.aggregator == "gated":
        return aggregate(model, X)[0]
    if model.aggregator == "max":
        return X.max(axis=0)
    return X.mean(axis=0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: MILModel, bag) -> np.ndarray:
    """Class probabilities for the complete bag (no sampling at inference)."""
    z = pool(model, bag)
    return softmax(model.params["Wc"] @ z + model.params["bc"])


def loss_and_grads(
    model: MILModel,
    bags: Sequence,
    labels: Sequence[int],
    weights: Sequence[float] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted cross-entropy over a minibatch and its gradients.

    Bag ``b`` contributes ``W_b / sum(W)`` of its cross-entropy. All bags are
    processed in one pass over the concatenated instances, with per-bag
    softmax over attention scores.
    """
    B = len(bags)
    if B < 1 or len(labels) != B:
        raise ValueError("need one label per bag and at least one bag")
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    total_w = w.sum()
    if not total_w > 0:
        raise ValueError("bag weights must have a positive sum")
    omega = w / total_w
    mats = [_instances(b) for b in bags]
    sizes = np.array([m.shape[0] for m in mats])
    if np.any(sizes == 0):
        raise ValueError("bag has no instances")
    X = np.concatenate(mats, axis=0)
    if X.shape[1] != model.dim:
        raise ValueError(f"instance dimension {X.shape[1]} != model dimension {model.dim}")
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    bag_of = np.repeat(np.arange(B), sizes)
    p = model.params
    y = np.asarray(labels, dtype=np.int64)

    gated = model.aggregator == "gated"
    if gated:
        a = np.tanh(X @ p["theta"].T)
        g = _sigmoid(X @ p["phi"].T)
        h = a * g
        s = h @ p["psi"]
        e = np.exp(s - np.maximum.reduceat(s, starts)[bag_of])
        A = e / np.add.reduceat(e, starts)[bag_of]
        Z = np.add.reduceat(A[:, None] * X, starts, axis=0)
    elif model.aggregator == "max":
        Z = np.maximum.reduceat(X, starts, axis=0)
    else:
        Z = np.add.reduceat(X, starts, axis=0) / sizes[:, None]

    logits = Z @ p["Wc"].T + p["bc"]
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ce = lse - logits[np.arange(B), y]
    loss = float(omega @ ce)
    if not np.isfinite(loss):
        raise MILDivergence(f"non-finite loss {loss}")

    d_logits = softmax(logits)
    d_logits[np.arange(B), y] -= 1.0
    d_logits *= omega[:, None]
    grads = {"Wc": d_logits.T @ Z, "bc": d_logits.sum(axis=0)}
    if gated:
        dZ = d_logits @ p["Wc"]  # (B, D)
        dA = np.einsum("nd,nd->n", X, dZ[bag_of])
        ds = A * (dA - np.add.reduceat(A * dA, starts)[bag_of])
        grads["psi"] = h.T @ ds
        dh = ds[:, None] * p["psi"][None, :]
        du = dh * g * (1.0 - a * a)
        dv = dh * a * g * (1.0 - g)
        grads["theta"] = du.T @ X
        grads["phi"] = dv.T @ X
    return loss, grads


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_BLOCK_ORDER = ATTENTION_KEYS + CLASSIFIER_KEYS


def save_checkpoint(model: MILModel, path: str | Path, config: dict | None = None) -> None:
    """Versioned little-endian binary: header, JSON config, float64 parameter blocks."""
    meta = {"aggregator": model.aggregator, "config": config or {}, "meta": model.meta}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(_BLOCK_ORDER))]
    for name in _BLOCK_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        nb = name.encode("ascii")
        parts.append(struct.pack("<B", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[MILModel, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a MIL checkpoint")
    version, n_meta = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(buf[pos : pos + n_meta].decode("utf-8"))
    pos += n_meta
    (n_blocks,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(n_blocks):
        (ln,) = struct.unpack_from("<B", buf, pos)
        name = buf[pos + 1 : pos + 1 + ln].decode("ascii")
        pos += 1 + ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model = MILModel(params, meta["aggregator"], meta.get("meta", {}))
    return model, meta.get("config", {})
