"""Toy-scale self-distillation (student/teacher with EMA) on patch crops.

The encoder is a small perceptron (16x16 input, two tanh hidden layers,
linear head) with hand-written backprop. The teacher sees the global crops,
the student sees every crop, and the student is trained to match the
teacher's sharpened, centred distribution under cross-entropy. The teacher
is only ever moved by EMA of the student.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..core import Rng
from ..optim import glorot_uniform, make_optimizer

Params = dict[str, np.ndarray]


class SslDivergence(RuntimeError):
    pass


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CropConfig:
    n_global: int = 2
    n_local: int = 8
    global_size: int | None = None  # defaults to the patch side
    local_size: int = 32
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter: float = 0.4
    flip_p: float = 0.5

    def __post_init__(self):
        if self.n_global < 2:
            raise ValueError("need at least two global crops")


@dataclass
class CropSet:
    global_crops: list[np.ndarray]
    local_crops: list[np.ndarray]
    records: list[dict] = field(default_factory=list)

    @property
    def views(self) -> list[np.ndarray]:
        return self.global_crops + self.local_crops


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a float image (antialiased when shrinking)."""
    from PIL import Image

    src = np.asarray(img, dtype=np.float32)
    if src.shape == (out_h, out_w):
        return src.astype(np.float64)
    im = Image.fromarray(src, mode="F").resize((out_w, out_h), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)


def crop_box(h: int, w: int, scale, ratio, gen: np.random.Generator) -> tuple[int, int, int, int]:
    """(y, x, ch, cw) of a random-resized-crop window inside an h x w image."""
    area = h * w
    log_r = (np.log(ratio[0]), np.log(ratio[1]))
    for _ in range(10):
        target = area * gen.uniform(scale[0], scale[1])
        r = float(np.exp(gen.uniform(*log_r)))
        cw = int(round(np.sqrt(target * r)))
        ch = int(round(np.sqrt(target / r)))
        if 0 < cw <= w and 0 < ch <= h:
            y = int(gen.integers(0, h - ch + 1))
            x = int(gen.integers(0, w - cw + 1))
            return y, x, ch, cw
    # fallback: centred crop at the closest admissible aspect ratio
    in_r = w / h
    if in_r < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_r > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    ch, cw = max(1, min(ch, h)), max(1, min(cw, w))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _augment(patch, size, scale, cfg: CropConfig, gen) -> tuple[np.ndarray, dict]:
    h, w = patch.shape
    y, x, ch, cw = crop_box(h, w, scale, cfg.ratio, gen)
    out = resize(patch[y : y + ch, x : x + cw], size, size)
    c = gen.uniform(1 - cfg.jitter, 1 + cfg.jitter) if cfg.jitter > 0 else 1.0
    b = gen.uniform(-cfg.jitter, cfg.jitter) * 64.0 if cfg.jitter > 0 else 0.0
    if c != 1.0 or b != 0.0:
        out = np.clip((out - out.mean()) * c + out.mean() + b, 0.0, 255.0)
    vflip = bool(gen.random() < cfg.flip_p)
    hflip = bool(gen.random() < cfg.flip_p)
    if vflip:
        out = out[::-1, :]
    if hflip:
        out = out[:, ::-1]
    rec = {"y": y, "x": x, "h": ch, "w": cw, "contrast": c, "brightness": b, "vflip": vflip, "hflip": hflip}
    return np.ascontiguousarray(out), rec


def multi_crop(patch: np.ndarray, rng: Rng, cfg: CropConfig = CropConfig()) -> CropSet:
    """Global and local random-resized crops with brightness/contrast jitter and flips."""
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("patch must be 2-D")
    gen = rng.generator
    gsize = cfg.global_size or p.shape[0]
    lsize = min(cfg.local_size, gsize)
    globals_, locals_, recs = [], [], []
    for _ in range(cfg.n_global):
        out, rec = _augment(p, gsize, cfg.global_scale, cfg, gen)
        globals_.append(out)
        recs.append(dict(rec, kind="global"))
    for _ in range(cfg.n_local):
        out, rec = _augment(p, lsize, cfg.local_scale, cfg, gen)
        locals_.append(out)
        recs.append(dict(rec, kind="local"))
    return CropSet(globals_, locals_, recs)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _pairs(n_global: int, n_views: int) -> list[tuple[int, int]]:
    return [(i, v) for i in range(n_global) for v in range(n_views) if v != i]


def cross_entropy_pairs(p_teacher: np.ndarray, log_p_student: np.ndarray) -> float:
    """Mean of -sum(P_t log P_s) over (teacher view i, student view v != i)."""
    pairs = _pairs(p_teacher.shape[0], log_p_student.shape[0])
    terms = [-float(np.dot(p_teacher[i], log_p_student[v])) for i, v in pairs]
    return float(np.mean(terms))


def dino_loss(teacher_out, student_out, tau_t: float, tau_s: float, center) -> float:
    """Self-distillation loss for one source patch.

    ``teacher_out`` holds logits for the global views, ``student_out`` for all
    views with the global views first, in the same order.
    """
    loss, _ = dino_loss_and_grad(teacher_out, student_out, tau_t, tau_s, center)
    return loss


def dino_loss_and_grad(teacher_out, student_out, tau_t, tau_s, center):
    t = np.asarray(teacher_out, dtype=np.float64)
    s = np.asarray(student_out, dtype=np.float64)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise ValueError("non-finite logits")
    n_g, n_v = t.shape[0], s.shape[0]
    if n_g < 1 or n_v <= 1 or n_g > n_v:
        raise ValueError("need >= 1 teacher view and more student views than that")
    p_t = softmax((t - center) / tau_t)
    log_q = log_softmax(s / tau_s)
    n_pairs = n_g * n_v - n_g
    loss = cross_entropy_pairs(p_t, log_q)
    # d/ds_v of -P_t[i].log_softmax(s_v/tau) = (softmax(s_v/tau) - P_t[i]) / tau
    q = np.exp(log_q)
    total_t = p_t.sum(axis=0)
    counts = np.full(n_v, n_g, dtype=np.float64)
    teach_sum = np.tile(total_t, (n_v, 1))
    counts[:n_g] -= 1
    teach_sum[:n_g] -= p_t
    grad = (counts[:, None] * q - teach_sum) / (tau_s * n_pairs)
    return loss, grad


def ema_update(teacher: Params, student: Params, lam: float) -> Params:
    """Elementwise ``lam * teacher + (1 - lam) * student``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for k in teacher:
        if teacher[k].shape != student[k].shape:
            raise ValueError(f"shape mismatch for {k}: {teacher[k].shape} vs {student[k].shape}")
        out[k] = lam * teacher[k] + (1.0 - lam) * student[k]
    return out


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

INPUT_SIDE = 16


def prepare_input(img: np.ndarray) -> np.ndarray:
    """Downsample a crop to 16x16 and centre intensities around 0."""
    small = resize(np.asarray(img, dtype=np.float64), INPUT_SIDE, INPUT_SIDE)
    return (small / 255.0 - 0.5).ravel()


def init_encoder(gen: np.random.Generator, hidden: int, out_dim: int, in_dim: int = INPUT_SIDE**2) -> Params:
    return {
        "W1": glorot_uniform(gen, hidden, in_dim),
        "b1": np.zeros(hidden),
        "W2": glorot_uniform(gen, hidden, hidden),
        "b2": np.zeros(hidden),
        "W3": glorot_uniform(gen, out_dim, hidden),
        "b3": np.zeros(out_dim),
    }


def encoder_forward(p: Params, x: np.ndarray):
    h1 = np.tanh(x @ p["W1"].T + p["b1"])
    h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
    out = h2 @ p["W3"].T + p["b3"]
    return out, (x, h1, h2)


def encoder_backward(p: Params, cache, d_out: np.ndarray) -> Params:
    x, h1, h2 = cache
    g = {"W3": d_out.T @ h2, "b3": d_out.sum(0)}
    dz2 = (d_out @ p["W3"]) * (1.0 - h2 * h2)
    g["W2"] = dz2.T @ h1
    g["b2"] = dz2.sum(0)
    dz1 = (dz2 @ p["W2"]) * (1.0 - h1 * h1)
    g["W1"] = dz1.T @ x
    g["b1"] = dz1.sum(0)
    return g


@dataclass
class SslConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden: int = 256
    out_dim: int = 128
    tau_t: float = 0.04
    tau_s: float = 0.1
    center_momentum: float = 0.9
    ema: float = 0.996
    crops: CropConfig = field(default_factory=CropConfig)


@dataclass
class SslModel:
    student: Params
    teacher: Params
    center: np.ndarray
    config: SslConfig
    history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.teacher["W3"].shape[0]


def batch_inputs(crop_sets: list[CropSet]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per source patch: (teacher inputs of global views, student inputs of all views)."""
    out = []
    for cs in crop_sets:
        xs = np.stack([prepare_input(v) for v in cs.views])
        out.append((xs[: len(cs.global_crops)], xs))
    return out


def ssl_loss_and_grads(model: SslModel, inputs) -> tuple[float, Params, np.ndarray]:
    """Mean loss over source patches, student gradients, mean teacher logits."""
    cfg = model.config
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.student.items()}
    t_sum = np.zeros(model.dim)
    t_count = 0
    for x_t, x_s in inputs:
        t_out, _ = encoder_forward(model.teacher, x_t)
        s_out, cache = encoder_forward(model.student, x_s)
        loss, d_out = dino_loss_and_grad(t_out, s_out, cfg.tau_t, cfg.tau_s, model.center)
        total += loss
        for k, g in encoder_backward(model.student, cache, d_out).items():
            grads[k] += g
        t_sum += t_out.sum(0)
        t_count += t_out.shape[0]
    n = len(inputs)
    for k in grads:
        grads[k] /= n
    return total / n, grads, t_sum / max(t_count, 1)


def train_ssl(patches, config: SslConfig, rng: Rng) -> SslModel:
    """Train student/teacher encoders on a list of 2-D patches."""
    patches = [np.asarray(p) for p in patches]
    if not patches:
        raise ValueError("need at least one patch")
    init_rng, crop_rng, order_rng = rng.spawn(3)
    student = init_encoder(init_rng.generator, config.hidden, config.out_dim)
    model = SslModel(student, copy.deepcopy(student), np.zeros(config.out_dim), config)
    opt = make_optimizer(config.optimizer, config.lr)
    bs = max(1, config.batch_size)
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(patches))
        losses = []
        for start in range(0, len(order), bs):
            chunk = order[start : start + bs]
            crops = [multi_crop(patches[i], crop_rng, config.crops) for i in chunk]
            loss, grads, t_mean = ssl_loss_and_grads(model, batch_inputs(crops))
            if not np.isfinite(loss):
                raise SslDivergence(f"non-finite SSL loss at epoch {epoch}, step {start // bs}")
            opt.step(model.student, grads)
            model.teacher = ema_update(model.teacher, model.student, config.ema)
            m = config.center_momentum
            model.center = m * model.center + (1 - m) * t_mean
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
    return model


def ssl_embed(model: SslModel, patch: np.ndarray) -> np.ndarray:
    """Teacher logits (pre-softmax) for the full patch."""
    out, _ = encoder_forward(model.teacher, prepare_input(patch)[None, :])
    return out[0]


def save_ssl_model(model: SslModel, path) -> None:
    arrays = {f"student_{k}": v for k, v in model.student.items()}
    arrays.update({f"teacher_{k}": v for k, v in model.teacher.items()})
    cfg = model.config
    np.savez(
        path,
        center=model.center,
        history=np.array(model.history),
        scalars=np.array([cfg.tau_t, cfg.tau_s, cfg.center_momentum, cfg.ema]),
        **arrays,
    )


def load_ssl_model(path) -> SslModel:
    with np.load(path) as z:
        student = {k[8:]: z[k] for k in z.files if k.startswith("student_")}
        teacher = {k[8:]: z[k] for k in z.files if k.startswith("teacher_")}
        tau_t, tau_s, cm, ema = z["scalars"].tolist()
        cfg = SslConfig(
            hidden=teacher["W1"].shape[0], out_dim=teacher["W3"].shape[0],
            tau_t=tau_t, tau_s=tau_s, center_momentum=cm, ema=ema,
        )
        return SslModel(student, teacher, z["center"], cfg, z["history"].tolist())
