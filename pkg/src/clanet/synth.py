"""Synthetic brightfield time-lapse corpus with controllable batch effects.

Cells are anti-aliased ellipses on a mid-grey background: a bright membrane
ring around a darker, speckled interior. Each class fixes cell shape, size,
texture and growth rate; each batch adds the three nuisance factors the
generator exists to reproduce:

* density: initial confluency, which then follows a logistic growth curve;
* image quality: brightness offset, contrast gain and sensor noise;
* incubation timing: frame interval and total duration.

A sequence draws a pool of cells once and adds them in order until each
frame's coverage reaches the confluency target, so cells persist from frame
to frame.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Batch, DatasetManifest, Frame, ImageSequence, Rng, write_image, write_manifest

BACKGROUND = 128.0
CONFLUENCY_CAP = 0.85
MAX_CONFLUENCY = 0.95
PROTOCOL_INTERVALS = (1, 2, 4, 8)
PROTOCOL_DAYS = (3.0, 18.0)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    radius: tuple[float, float] = (7.0, 11.0)  # semi-major axis, px
    axis_ratio: tuple[float, float] = (0.6, 0.9)  # minor / major
    ring_contrast: float = 40.0  # membrane brightness above background
    ring_width: float = 1.2  # membrane half-width, px
    interior_dark: float = 15.0  # cytoplasm darkness below background
    speckle_scale: float = 1.5  # speckle blob size, px
    speckle_amp: float = 12.0
    growth_rate: float = 0.04  # logistic rate, 1/h

    def __post_init__(self):
        lo, hi = self.radius
        if not 2.0 <= lo <= hi:
            raise SynthError(f"class {self.class_id}: bad radius range {self.radius}")
        lo, hi = self.axis_ratio
        if not 0.2 <= lo <= hi <= 1.0:
            raise SynthError(f"class {self.class_id}: bad axis ratio range {self.axis_ratio}")
        if self.growth_rate < 0 or self.speckle_scale <= 0 or self.ring_width <= 0:
            raise SynthError(f"class {self.class_id}: growth rate and speckle scale must be positive")


@dataclass(frozen=True)
class BatchSpec:
    batch_id: str
    class_id: int
    initial_confluency: float = 0.2
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 4.0
    interval_hours: float = 4.0
    duration_days: float = 3.0
    sequences: int = 6

    def __post_init__(self):
        if not 0.0 < self.initial_confluency < 1.0:
            raise SynthError(f"batch {self.batch_id}: initial confluency must lie in (0, 1)")
        if self.initial_confluency > MAX_CONFLUENCY:
            raise SynthError(f"batch {self.batch_id}: confluency {self.initial_confluency} is infeasible (> {MAX_CONFLUENCY})")
        if self.interval_hours <= 0 or self.duration_days <= 0 or self.sequences < 1:
            raise SynthError(f"batch {self.batch_id}: interval, duration and sequence count must be positive")
        if self.contrast <= 0 or self.noise_sigma < 0:
            raise SynthError(f"batch {self.batch_id}: contrast must be > 0 and noise >= 0")

    @property
    def timestamps(self) -> np.ndarray:
        n = int(math.floor(self.duration_days * 24.0 / self.interval_hours + 1e-9)) + 1
        return np.arange(n, dtype=np.float64) * self.interval_hours

    def within_protocol(self) -> bool:
        """Whether interval and duration lie in the real collection protocol's range."""
        return self.interval_hours in PROTOCOL_INTERVALS and PROTOCOL_DAYS[0] <= self.duration_days <= PROTOCOL_DAYS[1]


@dataclass(frozen=True)
class CorpusSpec:
    classes: tuple[ClassSpec, ...]
    batches: tuple[BatchSpec, ...]
    image_size: tuple[int, int] = (512, 512)  # (height, width)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if sorted(ids) != list(range(len(ids))):
            raise SynthError("class ids must be 0..C-1")
        seen = set()
        for b in self.batches:
            if b.class_id not in ids:
                raise SynthError(f"batch {b.batch_id}: unknown class {b.class_id}")
            if b.batch_id in seen:
                raise SynthError(f"duplicate batch id {b.batch_id}")
            seen.add(b.batch_id)
        h, w = self.image_size
        if not (16 <= h <= 4096 and 16 <= w <= 4096):
            raise SynthError(f"image size {self.image_size} out of range")


def logistic_confluency(t, c0: float, rate: float, cap: float = CONFLUENCY_CAP):
    """Logistic growth from ``c0`` at t=0 towards ``cap``."""
    c0 = min(c0, cap)
    return cap / (1.0 + (cap / c0 - 1.0) * np.exp(-rate * np.asarray(t, dtype=np.float64)))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


@dataclass
class Cell:
    cy: float
    cx: float
    a: float  # semi-major
    b: float  # semi-minor
    angle: float
    speckle: np.ndarray  # texture tile over the cell's window
    y0: int = 0
    x0: int = 0


def _smooth_noise(gen: np.random.Generator, shape, scale: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    n = gaussian_filter(gen.standard_normal(shape), scale, mode="wrap")
    s = n.std()
    return n / s if s > 0 else n


def _cell_window(cell: Cell, shape) -> tuple[slice, slice, np.ndarray, np.ndarray]:
    h, w = shape
    r = int(math.ceil(cell.a)) + 3
    y0, y1 = max(int(cell.cy) - r, 0), min(int(cell.cy) + r + 1, h)
    x0, x1 = max(int(cell.cx) - r, 0), min(int(cell.cx) + r + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cell.cy, xx - cell.cx
    ca, sa = math.cos(cell.angle), math.sin(cell.angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    rho = np.sqrt((u / cell.a) ** 2 + (v / cell.b) ** 2)
    return slice(y0, y1), slice(x0, x1), rho, (yy, xx)


def _draw_cell(canvas: np.ndarray, cover: np.ndarray, cell: Cell, cls: ClassSpec) -> None:
    sy, sx, rho, _ = _cell_window(cell, canvas.shape)
    edge_px = (1.0 - rho) * cell.b  # signed distance to the membrane, roughly in px
    alpha = np.clip(edge_px + 0.5, 0.0, 1.0)
    ring = cls.ring_contrast * np.exp(-((edge_px / cls.ring_width) ** 2))
    tex = cell.speckle[: rho.shape[0], : rho.shape[1]]
    interior = -cls.interior_dark + cls.speckle_amp * tex
    body = BACKGROUND + np.where(rho < 1.0, interior, 0.0) + ring
    region = canvas[sy, sx]
    halo = (rho >= 1.0) & (edge_px > -2.5)
    # the ring spills slightly outside the body; blend it over what is there
    region[:] = np.where(alpha > 0, alpha * body + (1 - alpha) * region, region)
    region[halo] = np.maximum(region[halo], BACKGROUND + ring[halo] * 0.6)
    cover[sy, sx] |= rho <= 1.0


def _make_cell(gen, cls: ClassSpec, shape, placed: list[Cell], clustering: float) -> Cell:
    """Cell geometry; with probability ``clustering`` it buds off a placed cell."""
    h, w = shape
    a = gen.uniform(*cls.radius)
    b = a * gen.uniform(*cls.axis_ratio)
    angle = gen.uniform(0, math.pi)
    if placed and gen.random() < clustering:
        parent = placed[int(gen.integers(len(placed)))]
        d = (parent.b + b) * gen.uniform(0.9, 1.3)
        t = gen.uniform(0, 2 * math.pi)
        cy = min(max(parent.cy + d * math.sin(t), 0.0), h - 1.0)
        cx = min(max(parent.cx + d * math.cos(t), 0.0), w - 1.0)
    else:
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
    return Cell(cy, cx, a, b, angle, np.empty((0, 0)))


def _cell_mask(cell: Cell, shape) -> tuple[slice, slice, np.ndarray]:
    sy, sx, rho, _ = _cell_window(cell, shape)
    return sy, sx, rho <= 1.0


def render_sequence(
    cls: ClassSpec,
    batch: BatchSpec,
    shape: tuple[int, int],
    rng: Rng,
    max_overlap: float = 0.25,
    clustering: float = 0.99,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Clean (pre-batch-effect) float frames, ground-truth masks and targets.

    Cells are added from one pool until the union coverage reaches the
    logistic target at each timestamp. Most new cells bud off an existing
    one, so cells grow in colonies; placement rejects candidates that would
    overlap existing cells by more than ``max_overlap`` of their area,
    falling back to the least-overlapping of 20 tries.
    """
    gen = rng.generator
    ts = batch.timestamps
    targets = logistic_confluency(ts, batch.initial_confluency, cls.growth_rate)
    canvas = np.full(shape, BACKGROUND, dtype=np.float64)
    cover = np.zeros(shape, dtype=bool)
    total = shape[0] * shape[1]
    covered = 0
    frames, masks = [], []
    placed: list[Cell] = []
    for target in targets:
        while covered < target * total:
            best, best_ov = None, None
            for _ in range(20):
                cand = _make_cell(gen, cls, shape, placed, clustering)
                sy, sx, m = _cell_mask(cand, shape)
                area = int(m.sum())
                if area == 0:
                    continue
                ov = int((cover[sy, sx] & m).sum()) / area
                if best is None or ov < best_ov:
                    best, best_ov = cand, ov
                if ov <= max_overlap:
                    break
            if best is None:
                continue
            side = 2 * (int(math.ceil(best.a)) + 3) + 1
            best.speckle = _smooth_noise(gen, (side, side), cls.speckle_scale)
            placed.append(best)
            _draw_cell(canvas, cover, best, cls)
            covered = int(cover.sum())
        frames.append(canvas.copy())
        masks.append(cover.copy())
    return frames, masks, targets


def apply_batch_effects(clean: np.ndarray, batch: BatchSpec, gen: np.random.Generator | None) -> np.ndarray:
    """Contrast about the background level, brightness offset, then Gaussian noise."""
    img = (clean - BACKGROUND) * batch.contrast + BACKGROUND + batch.brightness
    if batch.noise_sigma > 0 and gen is not None:
        img = img + gen.normal(0.0, batch.noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


def generate_corpus(spec: CorpusSpec, rng: Rng, out_dir: str | Path, write_masks: bool = False) -> DatasetManifest:
    """Render every batch/sequence/frame under ``out_dir`` and write the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise SynthError(f"output directory {out} is not writable: {exc}") from None
    classes = {c.class_id: c for c in spec.classes}
    sequences = []
    for bi, batch in enumerate(spec.batches):
        cls = classes[batch.class_id]
        for si in range(batch.sequences):
            seq_id = f"{batch.batch_id}-s{si:02d}"
            seq_rng = rng.child(bi, si)
            layout_rng, noise_rng = seq_rng.spawn(2)
            clean, masks, _ = render_sequence(cls, batch, spec.image_size, layout_rng)
            rel_dir = Path("images") / batch.batch_id / seq_id
            (out / rel_dir).mkdir(parents=True, exist_ok=True)
            frames = []
            for n, (img, hours) in enumerate(zip(clean, batch.timestamps)):
                rel = rel_dir / f"f{n:03d}.png"
                write_image(out / rel, apply_batch_effects(img, batch, noise_rng.child(n).generator))
                if write_masks:
                    write_image(out / rel_dir / f"f{n:03d}_mask.png", masks[n].astype(np.uint8) * 255)
                frames.append(Frame(rel.as_posix(), float(hours)))
            sequences.append(ImageSequence(seq_id, batch.batch_id, batch.class_id, tuple(frames)))
    manifest = DatasetManifest(
        tuple(classes[i].name for i in range(len(classes))),
        tuple(Batch(b.batch_id, b.class_id) for b in spec.batches),
        tuple(sequences),
        out.resolve(),
    )
    write_manifest(manifest, out)
    (out / "corpus_spec.json").write_text(json.dumps(spec_to_dict(spec), indent=1) + "\n")
    return manifest


def default_class_specs(n_classes: int, rng: Rng) -> list[ClassSpec]:
    """Classes that differ mainly in fine structure: speckle grain and membrane width.

    Sizes and shapes overlap between classes, so telling them apart needs
    full-resolution detail. Four speckle grains times two membrane widths
    give eight base classes; further classes reuse them with other sizes.
    """
    gen = rng.generator
    grains = (0.5, 0.9, 1.5, 2.5)
    out = []
    for c in range(n_classes):
        cycle = c // 8
        r = 6.0 + 1.5 * cycle
        out.append(
            ClassSpec(
                class_id=c,
                name=f"line{c:02d}",
                radius=(r, r * 1.35),
                axis_ratio=(0.55, 0.95),
                ring_contrast=45.0,
                ring_width=0.8 if (c // 4) % 2 == 0 else 2.2,
                interior_dark=14.0,
                speckle_scale=grains[c % 4],
                speckle_amp=24.0,
                growth_rate=float(gen.uniform(0.005, 0.015)),
            )
        )
    return out


@dataclass(frozen=True)
class NuisanceRanges:
    """Uniform ranges the default batch specs draw their nuisance settings from."""

    confluency: tuple[float, float] = (0.05, 0.6)
    brightness: tuple[float, float] = (-20.0, 20.0)
    contrast: tuple[float, float] = (0.8, 1.25)
    noise: tuple[float, float] = (3.0, 4.0)
    intervals: tuple[float, ...] = (4.0, 8.0)
    days: tuple[float, float] = (3.0, 3.0)


def default_batch_specs(
    classes: Sequence[ClassSpec],
    batches_per_class: int,
    sequences: int,
    rng: Rng,
    ranges: NuisanceRanges = NuisanceRanges(),
    nuisance: bool = True,
) -> list[BatchSpec]:
    """Randomised nuisance settings per batch; ``nuisance=False`` makes all batches alike."""
    gen = rng.generator
    rg = ranges
    out = []
    for cls in classes:
        for k in range(batches_per_class):
            bid = f"c{cls.class_id:02d}b{k}"
            if nuisance:
                out.append(
                    BatchSpec(
                        bid,
                        cls.class_id,
                        initial_confluency=float(gen.uniform(*rg.confluency)),
                        brightness=float(gen.uniform(*rg.brightness)),
                        contrast=float(gen.uniform(*rg.contrast)),
                        noise_sigma=float(gen.uniform(*rg.noise)),
                        interval_hours=float(rg.intervals[int(gen.integers(len(rg.intervals)))]),
                        duration_days=float(gen.choice(np.arange(rg.days[0], rg.days[1] + 1e-9, 0.5))),
                        sequences=sequences,
                    )
                )
            else:
                out.append(BatchSpec(bid, cls.class_id, 0.2, 0.0, 1.0, 4.0, 4.0, rg.days[0], sequences))
    return out


def default_corpus_spec(
    n_classes: int = 8,
    batches_per_class: int = 4,
    sequences: int = 6,
    seed: int = 0,
    image_size: tuple[int, int] = (512, 512),
    nuisance: bool = True,
    ranges: NuisanceRanges = NuisanceRanges(),
) -> CorpusSpec:
    rng = Rng(seed)
    crng, brng = rng.spawn(2)
    classes = default_class_specs(n_classes, crng)
    batches = default_batch_specs(classes, batches_per_class, sequences, brng, ranges, nuisance)
    return CorpusSpec(tuple(classes), tuple(batches), image_size)


def spec_to_dict(spec: CorpusSpec) -> dict:
    return {
        "image_size": list(spec.image_size),
        "classes": [asdict(c) for c in spec.classes],
        "batches": [asdict(b) for b in spec.batches],
    }


def spec_from_dict(doc: dict) -> CorpusSpec:
    try:
        classes = tuple(
            ClassSpec(**{**c, "radius": tuple(c.get("radius", (7.0, 11.0))), "axis_ratio": tuple(c.get("axis_ratio", (0.6, 0.9)))})
            for c in doc["classes"]
        )
        batches = tuple(BatchSpec(**b) for b in doc["batches"])
        size = tuple(doc.get("image_size", (512, 512)))
    except (KeyError, TypeError) as exc:
        raise SynthError(f"bad corpus spec: {exc}") from None
    return CorpusSpec(classes, batches, size)


def load_corpus_spec(path: str | Path) -> CorpusSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


@dataclass
class CorpusStats:
    curves: dict[str, list[tuple[float, float, float, int]]] = field(default_factory=dict)  # batch -> (t, mean, std, n)
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)  # batch -> (mean, std)

    def curves_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["batch_id", "hours", "confluency_mean", "confluency_std", "n_sequences"])
        for b, rows in self.curves.items():
            for t, m, s, n in rows:
                w.writerow([b, f"{t:g}", f"{m:.6f}", f"{s:.6f}", n])
        return out.getvalue()

    def intervals_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["batch_id", "interval_mean_h", "interval_std_h"])
        for b, (m, s) in self.intervals.items():
            w.writerow([b, f"{m:.6f}", f"{s:.6f}"])
        return out.getvalue()


def corpus_stats(manifest: DatasetManifest, confluency_fn=None) -> CorpusStats:
    """Per-batch confluency (mean +- std over sequences per timestamp) and frame intervals.

    ``confluency_fn(image) -> float`` defaults to the foreground fraction of
    the default segmenter's mask.
    """
    from .core import read_image
    from .segmentation import segment

    if confluency_fn is None:
        confluency_fn = lambda img: float(segment(img).mean())  # noqa: E731
    stats = CorpusStats()
    for b in manifest.batches:
        seqs = manifest.sequences_in(b.batch_id)
        per_t: dict[float, list[float]] = {}
        gaps = []
        for s in seqs:
            for f in s.frames:
                per_t.setdefault(f.hours, []).append(confluency_fn(read_image(manifest.frame_path(f))))
            ts = s.timestamps
            if ts.size > 1:
                gaps.append(float(np.mean(np.diff(ts))))
        stats.curves[b.batch_id] = [
            (t, float(np.mean(v)), float(np.std(v)), len(v)) for t, v in sorted(per_t.items())
        ]
        stats.intervals[b.batch_id] = (float(np.mean(gaps)), float(np.std(gaps))) if gaps else (0.0, 0.0)
    return stats
