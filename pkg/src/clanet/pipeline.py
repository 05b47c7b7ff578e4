"""End-to-end orchestration: corpus -> patches -> embeddings -> MIL -> metrics.

Everything a run needs lives in :class:`PipelineConfig`; the JSON snapshot
written into each run directory replays the run exactly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ccs import PatchSet, draw_overlay, select_patches
from .core import (
    DatasetManifest,
    EmbeddingSequence,
    Rng,
    load_manifest,
    read_image,
    write_embedding_dir,
)
from .embedding import DescriptorProvider, EmbeddingProvider, SslConfig, SslProvider, train_ssl
from .evaluation import (
    METRIC_NAMES,
    STRATEGIES,
    TRUNCATION_FRACTIONS,
    EvalReport,
    evaluate_probs,
    majority_vote,
    make_split,
    summarize,
    table_csv,
    truncation_study,
)
from .mil import MILModel, TrainConfig, predict, save_checkpoint, train
from .optim import make_optimizer
from .segmentation import SegParams, segment

log = logging.getLogger(__name__)

METHODS = ("clanet", "ga_no_tss", "max_pool", "avg_pool", "majority_vote")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class SynthSettings:
    classes: int = 8
    batches_per_class: int = 4
    sequences: int = 6
    image_size: int = 512
    spec_file: str = ""


@dataclass
class SegSettings:
    window: int = 9
    close_iterations: int = 2
    min_area: int = 64
    shrink: int = 2

    def params(self) -> SegParams:
        return SegParams(self.window, self.close_iterations, self.min_area, self.shrink)


@dataclass
class CcsSettings:
    k: int = 10
    patch_size: int = 112


@dataclass
class EmbedSettings:
    provider: str = "descriptor"
    dim: int = 128
    ssl_epochs: int = 50
    ssl_batch: int = 16
    ssl_lr: float = 1e-3
    ssl_patches: int = 256  # patches sampled from the training corpus for SSL
    archive: str = ""


@dataclass
class MilSettings:
    epochs: int = 2000
    batch: int = 32
    lr: float = 5e-4
    alpha1: int = 1
    alpha2: int = 1
    optimizer: str = "sgd"
    hidden: int = 128
    standardize: bool = True

    def train_config(self, aggregator: str, use_tss: bool, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch, self.lr, self.alpha1, self.alpha2, self.optimizer,
                           self.hidden, aggregator, use_tss, seed)


@dataclass
class EvalSettings:
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    replicates: int = 3
    methods: list = field(default_factory=lambda: list(METHODS))
    soft_vote: bool = True
    truncation: list = field(default_factory=lambda: list(TRUNCATION_FRACTIONS))
    baseline_epochs: int = 100
    baseline_lr: float = 1e-3


@dataclass
class PipelineConfig:
    seed: int = 0
    manifest: str = ""  # empty: synthesise a corpus into the run directory
    threads: int = 1
    save_overlays: bool = True
    save_patches: bool = True
    synth: SynthSettings = field(default_factory=SynthSettings)
    seg: SegSettings = field(default_factory=SegSettings)
    ccs: CcsSettings = field(default_factory=CcsSettings)
    embed: EmbedSettings = field(default_factory=EmbedSettings)
    mil: MilSettings = field(default_factory=MilSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "PipelineConfig":
        try:
            self.seg.params()
            self.mil.train_config("gated", True, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.threads >= 1, "threads must be >= 1"),
            (self.ccs.k >= 1, "ccs.k must be >= 1"),
            (self.ccs.patch_size >= 4, "ccs.patch_size must be >= 4"),
            (self.embed.provider in ("descriptor", "ssl", "archive"), f"unknown embed.provider {self.embed.provider!r}"),
            (self.embed.provider != "archive" or bool(self.embed.archive), "embed.archive is required for the archive provider"),
            (self.embed.dim >= 1, "embed.dim must be >= 1"),
            (self.eval.replicates >= 1, "eval.replicates must be >= 1"),
            (all(s in STRATEGIES for s in self.eval.strategies), f"eval.strategies must be drawn from {STRATEGIES}"),
            (all(m in METHODS for m in self.eval.methods), f"eval.methods must be drawn from {METHODS}"),
            (all(f in TRUNCATION_FRACTIONS for f in self.eval.truncation), f"eval.truncation must be drawn from {TRUNCATION_FRACTIONS}"),
            (self.synth.classes >= 2 and self.synth.batches_per_class >= 1 and self.synth.sequences >= 1,
             "synth needs >= 2 classes and >= 1 batch and sequence"),
            (self.mil.optimizer in ("sgd", "momentum", "adam"), f"unknown mil.optimizer {self.mil.optimizer!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
            if default and not isinstance(default[0], str):
                value = [type(default[0])(v) for v in value]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None


def set_option(cfg: PipelineConfig, dotted: str, value) -> None:
    """Assign ``section.field`` (or a top-level field) with type coercion."""
    parts = dotted.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p) or not is_dataclass(getattr(target, p)):
            raise ConfigError(f"unknown config section {p!r} in {dotted!r}")
        target = getattr(target, p)
    name = parts[-1]
    names = {f.name for f in fields(target)}
    if name not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(target, name)
    if is_dataclass(current):
        raise ConfigError(f"{dotted!r} is a section, not a value")
    setattr(target, name, _coerce(value, current, dotted))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_from_dict(doc: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    for k, v in _flatten(doc).items():
        set_option(cfg, k, v)
    return cfg


ENV_PREFIX = "CLANET_"


def apply_env(cfg: PipelineConfig, env: dict) -> PipelineConfig:
    """``CLANET_MIL__EPOCHS=300`` sets ``mil.epochs``; unknown CLANET_ names are ignored."""
    known = set(_flatten(cfg.to_dict()))
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if key in known:
            set_option(cfg, key, env[name])
    return cfg


def load_config(path: str | Path | None, env: dict | None = None, overrides: Sequence[tuple[str, object]] = ()) -> PipelineConfig:
    """File < environment < explicit overrides, then validation."""
    cfg = PipelineConfig()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        config_from_dict(doc, cfg)
    apply_env(cfg, env if env is not None else dict(os.environ))
    for k, v in overrides:
        set_option(cfg, k, v)
    return cfg.validate()


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------


@dataclass
class SequenceFeatures:
    embeddings: EmbeddingSequence
    image_features: np.ndarray  # (n_frames, D) whole-image descriptors for the baseline
    first_patches: PatchSet


def frame_patches(image: np.ndarray, cfg: PipelineConfig, image_id: str = "") -> tuple[PatchSet, np.ndarray]:
    """CCS patches of one frame; a centre crop stands in when no region survives."""
    mask = segment(image, cfg.seg.params())
    size = cfg.ccs.patch_size
    ps = select_patches(image, mask, cfg.ccs.k, size, size, image_id)
    if len(ps) == 0:
        from .ccs import BBox

        h, w = image.shape
        y, x = (h - size) // 2, (w - size) // 2
        box = BBox(x, y, size, size, int(mask[y : y + size, x : x + size].sum()))
        ps = PatchSet(image_id, np.ascontiguousarray(image[box.slices()][None]), (box,))
    return ps, mask


def whole_image_input(image: np.ndarray, side: int) -> np.ndarray:
    """The full frame downsampled (area-averaged) to the embedding input size."""
    from PIL import Image

    return np.asarray(Image.fromarray(image).resize((side, side), Image.BOX), dtype=np.uint8)


def extract_sequence(manifest: DatasetManifest, sequence_id: str, cfg: PipelineConfig,
                     provider: EmbeddingProvider, image_provider: DescriptorProvider) -> SequenceFeatures:
    seq = manifest.sequence(sequence_id)
    area = float(cfg.ccs.patch_size ** 2)
    frames, whole, first = [], [], None
    for n, fr in enumerate(seq.frames):
        img = read_image(manifest.frame_path(fr))
        ps, mask = frame_patches(img, cfg, f"{sequence_id}/{n}")
        if first is None:
            first = ps
        frames.append(np.stack([provider.embed(p, b.density / area) for p, b in zip(ps.patches, ps.boxes)]))
        whole.append(image_provider.embed(whole_image_input(img, cfg.ccs.patch_size), float(mask.mean())))
    emb = EmbeddingSequence(sequence_id, tuple(f.astype(np.float32) for f in frames), seq.timestamps)
    return SequenceFeatures(emb, np.stack(whole), first)


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def sample_ssl_patches(manifest: DatasetManifest, cfg: PipelineConfig, rng: Rng) -> np.ndarray:
    """Patches from randomly chosen frames, for toy SSL training."""
    gen = rng.generator
    frames = [(s.sequence_id, f) for s in manifest.sequences for f in s.frames]
    picks = gen.permutation(len(frames))
    out = []
    for i in picks:
        sid, fr = frames[int(i)]
        ps, _ = frame_patches(read_image(manifest.frame_path(fr)), cfg)
        out.extend(ps.patches)
        if len(out) >= cfg.embed.ssl_patches:
            break
    return np.stack(out[: cfg.embed.ssl_patches])


def make_provider(manifest: DatasetManifest, cfg: PipelineConfig, rng: Rng, model_dir: Path | None = None):
    if cfg.embed.provider == "descriptor":
        return DescriptorProvider(cfg.embed.dim)
    if cfg.embed.provider == "ssl":
        from .embedding import save_ssl_model

        patches = sample_ssl_patches(manifest, cfg, rng.child(0))
        scfg = SslConfig(epochs=cfg.embed.ssl_epochs, batch_size=cfg.embed.ssl_batch, lr=cfg.embed.ssl_lr,
                         out_dim=cfg.embed.dim)
        model = train_ssl(patches, scfg, rng.child(1))
        if model_dir is not None:
            save_ssl_model(model, model_dir / "ssl.npz")
        return SslProvider(model)
    raise ConfigError("the archive provider serves precomputed sequences only")


def extract_features(manifest: DatasetManifest, cfg: PipelineConfig, rng: Rng, model_dir: Path | None = None) -> dict[str, SequenceFeatures]:
    ids = [s.sequence_id for s in manifest.sequences]
    if cfg.embed.provider == "archive":
        from .embedding import ArchiveProvider

        arch = ArchiveProvider(cfg.embed.archive)
        missing = [i for i in ids if i not in arch.sequences]
        if missing:
            raise ConfigError(f"archive {cfg.embed.archive} lacks sequences {missing[:3]}")
        image_provider = DescriptorProvider(cfg.embed.dim)
        out = {}
        for sid in ids:
            seq = manifest.sequence(sid)
            whole = []
            for fr in seq.frames:
                img = read_image(manifest.frame_path(fr))
                mask = segment(img, cfg.seg.params())
                whole.append(image_provider.embed(whole_image_input(img, cfg.ccs.patch_size), float(mask.mean())))
            out[sid] = SequenceFeatures(arch.get(sid), np.stack(whole), PatchSet(sid, np.zeros((0, 1, 1), np.uint8), ()))
        return out
    provider = make_provider(manifest, cfg, rng, model_dir)
    image_provider = DescriptorProvider(cfg.embed.dim)
    feats = _pmap(lambda sid: extract_sequence(manifest, sid, cfg, provider, image_provider), ids, cfg.threads)
    return dict(zip(ids, feats))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


class Standardizer:
    """Per-dimension z-scoring fitted on training instances."""

    def __init__(self, X: np.ndarray | None = None):
        if X is not None:
            self.mean = X.mean(axis=0)
            sd = X.std(axis=0)
            self.scale = np.where(sd > 1e-12, sd, 1.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        out = cls()
        out.mean = np.array(d["mean"], dtype=np.float64)
        out.scale = np.array(d["scale"], dtype=np.float64)
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def sequence(self, seq: EmbeddingSequence) -> EmbeddingSequence:
        return EmbeddingSequence(seq.sequence_id, tuple(self(f.astype(np.float64)).astype(np.float32) for f in seq.frames),
                                 seq.timestamps)


@dataclass
class MilPredictor:
    model: MILModel
    standardizer: Standardizer | None

    def __call__(self, seq: EmbeddingSequence) -> np.ndarray:
        if self.standardizer is not None:
            seq = self.standardizer.sequence(seq)
        return predict(self.model, seq)

    @classmethod
    def from_model(cls, model: MILModel) -> "MilPredictor":
        d = model.meta.get("standardizer")
        return cls(model, Standardizer.from_dict(d) if d else None)


def fit_mil(train_seqs: Sequence[EmbeddingSequence], labels: Sequence[int], n_classes: int,
            cfg: PipelineConfig, aggregator: str, use_tss: bool, rng: Rng) -> tuple[MilPredictor, TrainConfig]:
    std = None
    if cfg.mil.standardize:
        std = Standardizer(np.concatenate([s.instances() for s in train_seqs]).astype(np.float64))
        train_seqs = [std.sequence(s) for s in train_seqs]
    tc = cfg.mil.train_config(aggregator, use_tss, cfg.seed)
    model, _ = train(None, train_seqs, labels, tc, rng, n_classes=n_classes)
    if std is not None:
        model.meta["standardizer"] = std.to_dict()
    return MilPredictor(model, std), tc


@dataclass
class ImageBaseline:
    """One-hidden-layer MLP on whole-image descriptors; sequences take the frames' majority vote."""

    params: dict
    standardizer: Standardizer

    def frame_probs(self, X: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.tanh(self.standardizer(X) @ p["W1"].T + p["b1"])
        z = h @ p["W2"].T + p["b2"]
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        """Vote shares over classes; the argmax is the majority vote (ties to the lower class)."""
        votes = np.argmax(self.frame_probs(X), axis=1)
        share = np.bincount(votes, minlength=self.params["W2"].shape[0]).astype(np.float64) / len(votes)
        share[majority_vote(votes)] += 1e-9
        return share


def fit_image_baseline(X: np.ndarray, y: np.ndarray, n_classes: int, epochs: int, lr: float, rng: Rng,
                       hidden: int = 128, batch: int = 256) -> ImageBaseline:
    """Minibatch Adam on frame-level cross-entropy."""
    from .optim import glorot_uniform

    std = Standardizer(X)
    Z = std(X)
    gen = rng.generator
    params = {
        "W1": glorot_uniform(gen, hidden, Z.shape[1]),
        "b1": np.zeros(hidden),
        "W2": glorot_uniform(gen, n_classes, hidden),
        "b2": np.zeros(n_classes),
    }
    opt = make_optimizer("adam", lr)
    y = np.asarray(y, dtype=np.int64)
    for _ in range(epochs):
        order = gen.permutation(len(Z))
        for s in range(0, len(Z), batch):
            idx = order[s : s + batch]
            xb, yb = Z[idx], y[idx]
            h = np.tanh(xb @ params["W1"].T + params["b1"])
            z = h @ params["W2"].T + params["b2"]
            z -= z.max(axis=1, keepdims=True)
            P = np.exp(z)
            P /= P.sum(axis=1, keepdims=True)
            P[np.arange(len(idx)), yb] -= 1.0
            dz = P / len(idx)
            dh = (dz @ params["W2"]) * (1.0 - h * h)
            opt.step(params, {"W2": dz.T @ h, "b2": dz.sum(axis=0), "W1": dh.T @ xb, "b1": dh.sum(axis=0)})
    return ImageBaseline(params, std)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

_MIL_METHODS = {
    "clanet": ("gated", True),
    "ga_no_tss": ("gated", False),
    "max_pool": ("max", False),
    "avg_pool": ("avg", False),
}


@dataclass
class ExperimentResult:
    reports: dict  # method -> strategy -> list[EvalReport]
    truncation: dict  # strategy -> replicate -> {fraction: EvalReport}
    checkpoints: dict  # name -> (MILModel, TrainConfig)

    def metrics_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method", "strategy", "replicate", *METRIC_NAMES, "n_sequences", "n_batches"])
        for method, by_s in self.reports.items():
            for strategy, reps in by_s.items():
                for r, rep in enumerate(reps):
                    w.writerow([method, strategy, r, *(f"{v:.6f}" for v in rep.row()), rep.n_sequences, rep.n_batches])
        return out.getvalue()

    def table_csv(self) -> str:
        return table_csv(self.reports)

    def truncation_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["strategy", "replicate", "fraction", *METRIC_NAMES])
        for strategy, by_r in self.truncation.items():
            for r, by_f in by_r.items():
                for f, rep in by_f.items():
                    w.writerow([strategy, r, f"{f:g}", *(f"{v:.6f}" for v in rep.row())])
        return out.getvalue()

    def summary(self) -> dict:
        return {m: {s: summarize(reps) for s, reps in by_s.items()} for m, by_s in self.reports.items()}


def run_experiments(manifest: DatasetManifest, feats: dict[str, SequenceFeatures], cfg: PipelineConfig,
                    rng: Rng) -> ExperimentResult:
    n_classes = len(manifest.classes)
    label = {s.sequence_id: s.class_label for s in manifest.sequences}
    reports: dict = {m: {s: [] for s in cfg.eval.strategies} for m in cfg.eval.methods}
    trunc: dict = {}
    checkpoints: dict = {}
    for si, strategy in enumerate(cfg.eval.strategies):
        for r in range(cfg.eval.replicates):
            split = make_split(manifest, strategy, rng.child(1, si, r))
            tr, te = list(split.train), list(split.test)
            y_tr = [label[i] for i in tr]
            log.info("%s replicate %d: %d train / %d test sequences", strategy, r, len(tr), len(te))
            for mi, method in enumerate(cfg.eval.methods):
                if method == "majority_vote":
                    X = np.concatenate([feats[i].image_features for i in tr])
                    y = np.concatenate([[label[i]] * len(feats[i].image_features) for i in tr])
                    base = fit_image_baseline(X, y, n_classes, cfg.eval.baseline_epochs, cfg.eval.baseline_lr,
                                              rng.child(3, si, r))
                    probs = {i: base(feats[i].image_features) for i in te}
                else:
                    agg, use_tss = _MIL_METHODS[method]
                    pred, tc = fit_mil([feats[i].embeddings for i in tr], y_tr, n_classes, cfg, agg, use_tss,
                                       rng.child(2, si, r, mi))
                    probs = {i: pred(feats[i].embeddings) for i in te}
                    checkpoints[f"{method}-{strategy}-r{r}"] = (pred.model, tc)
                    if method == "clanet" and cfg.eval.truncation:
                        study = truncation_study(pred, {i: feats[i].embeddings for i in te}, manifest,
                                                 cfg.eval.truncation)
                        trunc.setdefault(strategy, {})[r] = study
                rep = evaluate_probs(probs, manifest, cfg.eval.soft_vote)
                reports[method][strategy].append(rep)
                log.info("  %-13s seq_acc %.3f batch_acc %.3f", method, rep.seq_acc, rep.batch_acc)
    return ExperimentResult(reports, trunc, checkpoints)


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------


def new_run_dir(parent: str | Path, seed: int, stamp: str | None = None) -> Path:
    import datetime

    stamp = stamp or datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(parent) / f"run-{stamp}-{seed}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def attach_log(run_dir: Path) -> logging.Handler:
    (run_dir / "logs").mkdir(exist_ok=True)
    handler = logging.FileHandler(run_dir / "logs" / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("clanet")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run_pipeline(cfg: PipelineConfig, run_dir: Path) -> ExperimentResult:
    """Synthesise or load the corpus, extract features, run every experiment, write artifacts."""
    cfg.validate()
    root = Rng(cfg.seed)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    if cfg.manifest:
        manifest = load_manifest(cfg.manifest)
    else:
        from .synth import default_corpus_spec, generate_corpus, load_corpus_spec

        s = cfg.synth
        spec = (load_corpus_spec(s.spec_file) if s.spec_file else
                default_corpus_spec(s.classes, s.batches_per_class, s.sequences, cfg.seed, (s.image_size, s.image_size)))
        log.info("synthesising %d batches into %s", len(spec.batches), run_dir / "corpus")
        manifest = generate_corpus(spec, root.child(0), run_dir / "corpus")
    model_dir = run_dir / "model"
    model_dir.mkdir(exist_ok=True)
    log.info("extracting features from %d sequences", len(manifest.sequences))
    feats = extract_features(manifest, cfg, root.child(3), model_dir)
    write_embedding_dir((f.embeddings for f in feats.values()), run_dir / "embeddings")
    if cfg.save_patches or cfg.save_overlays:
        _write_patch_artifacts(manifest, feats, cfg, run_dir)
    result = run_experiments(manifest, feats, cfg, root.child(4))
    for name, (model, tc) in sorted(result.checkpoints.items()):
        save_checkpoint(model, model_dir / f"{name}.clam", tc.to_dict())
    (run_dir / "metrics.csv").write_text(result.metrics_csv())
    (run_dir / "table.csv").write_text(result.table_csv())
    if result.truncation:
        (run_dir / "truncation.csv").write_text(result.truncation_csv())
    (run_dir / "report.txt").write_text(format_report(result))
    return result


def _write_patch_artifacts(manifest, feats, cfg, run_dir: Path) -> None:
    from .core import write_image

    if cfg.save_patches:
        (run_dir / "patches").mkdir(exist_ok=True)
    if cfg.save_overlays:
        (run_dir / "overlays").mkdir(exist_ok=True)
    for sid, f in feats.items():
        ps = f.first_patches
        if cfg.save_patches and len(ps):
            np.savez_compressed(run_dir / "patches" / f"{sid}.npz", patches=ps.patches,
                                boxes=np.array([[b.x, b.y, b.w, b.h, b.density] for b in ps.boxes], dtype=np.int64))
        if cfg.save_overlays and len(ps):
            img = read_image(manifest.frame_path(manifest.sequence(sid).frames[0]))
            draw_overlay(img, ps.boxes, run_dir / "overlays" / f"{sid}.png")


def format_report(result: ExperimentResult) -> str:
    lines = []
    for method, by_s in result.summary().items():
        for strategy, summ in by_s.items():
            cells = "  ".join(f"{k} {m:.3f}+-{s:.3f}" for k, (m, s) in summ.items())
            lines.append(f"{method:<14}{strategy:<11}{cells}")
    for strategy, by_r in result.truncation.items():
        fr = sorted(next(iter(by_r.values())))
        means = [np.mean([by_r[r][f].seq_acc for r in by_r]) for f in fr]
        lines.append(f"truncation {strategy}: " + "  ".join(f"{f:g}:{m:.3f}" for f, m in zip(fr, means)))
    return "\n".join(lines) + "\n"
