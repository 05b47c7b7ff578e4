"""``clanet`` command line.

Configuration is layered: defaults < ``--config`` JSON file < ``CLANET_*``
environment variables (``CLANET_MIL__EPOCHS=300``) < ``--set key=value`` <
dedicated flags. Exit status: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .pipeline import ConfigError, PipelineConfig, load_config

log = logging.getLogger("clanet.cli")


class UsageError(Exception):
    pass


# flag dest -> config key; dests containing a dot are routed into the config
def _opt(p: argparse.ArgumentParser, flag: str, key: str, **kw) -> None:
    p.add_argument(flag, dest=key, default=None, **kw)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    _opt(p, "--seed", "seed", type=int, help="master seed")
    _opt(p, "--threads", "threads", type=int, help="worker cap for per-sequence stages")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _seg_flags(p):
    _opt(p, "--window", "seg.window", type=int, help="local std window (odd)")
    _opt(p, "--min-area", "seg.min_area", type=int)


def _mil_flags(p):
    _opt(p, "--epochs", "mil.epochs", type=int)
    _opt(p, "--batch", "mil.batch", type=int)
    _opt(p, "--lr", "mil.lr", type=float)
    _opt(p, "--alpha1", "mil.alpha1", type=int, choices=[0, 1])
    _opt(p, "--alpha2", "mil.alpha2", type=int, choices=[0, 1])
    _opt(p, "--optimizer", "mil.optimizer", choices=["sgd", "momentum", "adam"])
    _opt(p, "--hidden", "mil.hidden", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clanet", description="Cross-batch cell-line identification pipeline.")
    ap.add_argument("--version", action="version", version=f"clanet {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-gen", help="render a synthetic corpus")
    _common(p)
    _opt(p, "--classes", "synth.classes", type=int)
    _opt(p, "--batches-per-class", "synth.batches_per_class", type=int)
    _opt(p, "--sequences", "synth.sequences", type=int, help="sequences per batch")
    _opt(p, "--image-size", "synth.image_size", type=int)
    _opt(p, "--spec", "synth.spec_file", help="JSON ClassSpec/BatchSpec file")
    p.add_argument("--masks", action="store_true", help="also write ground-truth masks")
    p.add_argument("--stats", action="store_true", help="write confluency/interval CSVs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("segment", help="foreground masks for images or a manifest")
    _common(p)
    _seg_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", action="append")
    src.add_argument("--manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("select-patches", help="cluster-level patch selection")
    _common(p)
    _seg_flags(p)
    _opt(p, "--k", "ccs.k", type=int)
    _opt(p, "--patch-size", "ccs.patch_size", type=int)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true", help="write box overlays")

    p = sub.add_parser("embed", help="embed every sequence into .clae archives")
    _common(p)
    _seg_flags(p)
    _opt(p, "--provider", "embed.provider", choices=["descriptor", "ssl", "archive"])
    _opt(p, "--d", "embed.dim", type=int, help="embedding dimension")
    _opt(p, "--k", "ccs.k", type=int)
    _opt(p, "--patch-size", "ccs.patch_size", type=int)
    _opt(p, "--archive", "embed.archive", help="directory of precomputed archives")
    p.add_argument("--ssl-model", help="trained SSL model (.npz) for --provider ssl")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-ssl", help="toy self-distillation training on CCS patches")
    _common(p)
    _seg_flags(p)
    _opt(p, "--epochs", "embed.ssl_epochs", type=int)
    _opt(p, "--batch", "embed.ssl_batch", type=int)
    _opt(p, "--lr", "embed.ssl_lr", type=float)
    _opt(p, "--d", "embed.dim", type=int)
    _opt(p, "--patches", "embed.ssl_patches", type=int)
    _opt(p, "--patch-size", "ccs.patch_size", type=int)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-mil", help="train the MIL head on embedded sequences")
    _common(p)
    _mil_flags(p)
    p.add_argument("--aggregator", choices=["gated", "max", "avg"], default="gated")
    p.add_argument("--no-tss", action="store_true", help="train on full sequences")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["separated", "stratified"], help="train on one split's training part")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="replicated split experiments")
    _common(p)
    _mil_flags(p)
    p.add_argument("--split", choices=["separated", "stratified"], action="append")
    _opt(p, "--replicates", "eval.replicates", type=int)
    _opt(p, "--methods", "eval.methods", help="comma-separated subset of methods")
    p.add_argument("--hard-vote", action="store_true", help="majority vote for batch-level results")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("truncation-study", help="accuracy on leading fractions of each sequence")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", default="0.01,0.25,0.5,0.75,1.0")
    p.add_argument("--order", choices=["natural", "reverse"], default="natural")
    p.add_argument("--split", choices=["separated", "stratified"], help="evaluate only this split's test part")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="corpus -> CCS -> embed -> train -> evaluate")
    _common(p)
    _mil_flags(p)
    _opt(p, "--manifest", "manifest", help="ingest this corpus instead of synthesising")
    _opt(p, "--replicates", "eval.replicates", type=int)
    _opt(p, "--classes", "synth.classes", type=int)
    _opt(p, "--batches-per-class", "synth.batches_per_class", type=int)
    _opt(p, "--sequences", "synth.sequences", type=int)
    _opt(p, "--image-size", "synth.image_size", type=int)
    p.add_argument("--out", default=".", help="parent directory of the run directory")
    p.add_argument("--run-dir", help="exact run directory (must not exist)")
    return ap


def _config(ns: argparse.Namespace) -> PipelineConfig:
    overrides = []
    for item in ns.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v))
    for key, val in vars(ns).items():
        if val is not None and (key in ("seed", "threads", "manifest") or "." in key):
            if key == "manifest" and ns.command != "pipeline":
                continue
            overrides.append((key, val))
    try:
        return load_config(ns.config, dict(os.environ), overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth_gen(ns, cfg: PipelineConfig) -> None:
    from .core import Rng
    from .synth import corpus_stats, default_corpus_spec, generate_corpus, load_corpus_spec

    s = cfg.synth
    spec = load_corpus_spec(s.spec_file) if s.spec_file else default_corpus_spec(
        s.classes, s.batches_per_class, s.sequences, cfg.seed, (s.image_size, s.image_size))
    out = _out_dir(ns.out)
    manifest = generate_corpus(spec, Rng(cfg.seed).child(0), out, write_masks=ns.masks)
    if ns.stats:
        st = corpus_stats(manifest)
        (out / "confluency.csv").write_text(st.curves_csv())
        (out / "intervals.csv").write_text(st.intervals_csv())
    print(f"wrote {len(manifest.sequences)} sequences to {out / 'manifest.json'}")


def cmd_segment(ns, cfg) -> None:
    from .core import load_manifest, read_image, write_image
    from .segmentation import segment

    out = _out_dir(ns.out)
    params = cfg.seg.params()
    if ns.image:
        jobs = [(Path(p), Path(p).stem) for p in ns.image]
    else:
        m = load_manifest(ns.manifest)
        jobs = [(m.frame_path(f), f"{s.sequence_id}_f{n:03d}") for s in m.sequences for n, f in enumerate(s.frames)]
    for path, name in jobs:
        write_image(out / f"{name}_mask.png", segment(read_image(path), params).astype(np.uint8) * 255)
    print(f"wrote {len(jobs)} masks to {out}")


def cmd_select_patches(ns, cfg) -> None:
    from .ccs import draw_overlay
    from .core import load_manifest, read_image
    from .pipeline import frame_patches

    m = load_manifest(ns.manifest)
    out = _out_dir(ns.out)
    n_total = 0
    for s in m.sequences:
        for n, f in enumerate(s.frames):
            img = read_image(m.frame_path(f))
            ps, _ = frame_patches(img, cfg, f"{s.sequence_id}/{n}")
            name = f"{s.sequence_id}_f{n:03d}"
            np.savez_compressed(out / f"{name}.npz", patches=ps.patches,
                                boxes=np.array([[b.x, b.y, b.w, b.h, b.density] for b in ps.boxes], dtype=np.int64))
            if ns.overlay:
                draw_overlay(img, ps.boxes, out / f"{name}_overlay.png")
            n_total += len(ps)
    print(f"wrote {n_total} patches to {out}")


def cmd_embed(ns, cfg) -> None:
    from .core import Rng, load_manifest, write_embedding_dir
    from .embedding import ArchiveProvider, DescriptorProvider, SslProvider, load_ssl_model
    from .pipeline import extract_sequence

    m = load_manifest(ns.manifest)
    out = _out_dir(ns.out)
    if cfg.embed.provider == "archive":
        arch = ArchiveProvider(cfg.embed.archive)
        seqs = [arch.get(s.sequence_id) for s in m.sequences]
    else:
        if cfg.embed.provider == "ssl":
            if not ns.ssl_model:
                raise UsageError("--provider ssl needs --ssl-model (see train-ssl)")
            provider = SslProvider(load_ssl_model(ns.ssl_model))
        else:
            provider = DescriptorProvider(cfg.embed.dim)
        image_provider = DescriptorProvider(cfg.embed.dim)
        seqs = [extract_sequence(m, s.sequence_id, cfg, provider, image_provider).embeddings for s in m.sequences]
    write_embedding_dir(seqs, out)
    print(f"wrote {len(seqs)} archives to {out}")


def cmd_train_ssl(ns, cfg) -> None:
    from .core import Rng, load_manifest
    from .embedding import save_ssl_model
    from .pipeline import make_provider

    m = load_manifest(ns.manifest)
    out = _out_dir(ns.out)
    cfg.embed.provider = "ssl"
    provider = make_provider(m, cfg, Rng(cfg.seed).child(3), out)
    hist = provider.model.history
    print(f"trained SSL encoder: loss {hist[0]:.4f} -> {hist[-1]:.4f}; saved {out / 'ssl.npz'}")


def _load_embedded(ns):
    from .core import load_manifest, read_embedding_dir

    m = load_manifest(ns.manifest, check_files=False)
    embs = read_embedding_dir(ns.embeddings)
    missing = [s.sequence_id for s in m.sequences if s.sequence_id not in embs]
    if missing:
        raise FileNotFoundError(f"embeddings missing for sequences {missing[:3]} in {ns.embeddings}")
    return m, embs


def cmd_train_mil(ns, cfg) -> None:
    from .core import Rng
    from .evaluation import make_split
    from .mil import save_checkpoint
    from .pipeline import fit_mil

    m, embs = _load_embedded(ns)
    ids = [s.sequence_id for s in m.sequences]
    if ns.split:
        si = ["separated", "stratified"].index(ns.split)
        ids = list(make_split(m, ns.split, Rng(cfg.seed).child(4).child(1, si, ns.replicate)).train)
    labels = [m.sequence(i).class_label for i in ids]
    pred, tc = fit_mil([embs[i] for i in ids], labels, len(m.classes), cfg, ns.aggregator, not ns.no_tss,
                       Rng(cfg.seed).child(5))
    out = _out_dir(ns.out)
    save_checkpoint(pred.model, out / "model.clam", tc.to_dict())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"trained on {len(ids)} sequences; saved {out / 'model.clam'}")


def cmd_evaluate(ns, cfg) -> None:
    from .core import Rng
    from .pipeline import SequenceFeatures, format_report, run_experiments

    m, embs = _load_embedded(ns)
    if ns.split:
        cfg.eval.strategies = list(dict.fromkeys(ns.split))
    cfg.eval.soft_vote = not ns.hard_vote
    if "majority_vote" in cfg.eval.methods:
        cfg.eval.methods = [x for x in cfg.eval.methods if x != "majority_vote"]
        log.warning("majority_vote needs whole images; skipped (use the pipeline command)")
    cfg.validate()
    feats = {i: SequenceFeatures(e, np.zeros((len(e), 1)), None) for i, e in embs.items()}
    result = run_experiments(m, feats, cfg, Rng(cfg.seed).child(4))
    report = Path(ns.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(format_report(result))
    report.with_suffix(".csv").write_text(result.table_csv())
    report.with_name(report.stem + "_metrics.csv").write_text(result.metrics_csv())
    sys.stdout.write(format_report(result))


def cmd_truncation(ns, cfg) -> None:
    from .core import Rng
    from .evaluation import make_split, truncation_study
    from .mil import load_checkpoint
    from .pipeline import MilPredictor

    try:
        fractions = [float(f) for f in ns.fractions.split(",") if f]
    except ValueError:
        raise UsageError(f"bad --fractions {ns.fractions!r}") from None
    m, embs = _load_embedded(ns)
    model, _ = load_checkpoint(ns.checkpoint)
    ids = [s.sequence_id for s in m.sequences]
    if ns.split:
        si = ["separated", "stratified"].index(ns.split)
        ids = list(make_split(m, ns.split, Rng(cfg.seed).child(4).child(1, si, ns.replicate)).test)
    study = truncation_study(MilPredictor.from_model(model), {i: embs[i] for i in ids}, m, fractions, ns.order)
    lines = ["fraction,seq_acc,batch_acc,seq_f1,batch_f1"]
    lines += [f"{f:g}," + ",".join(f"{v:.6f}" for v in r.row()) for f, r in study.items()]
    out = _out_dir(ns.out)
    (out / "truncation.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_pipeline(ns, cfg) -> None:
    from .pipeline import attach_log, format_report, new_run_dir, run_pipeline

    if ns.run_dir:
        run_dir = Path(ns.run_dir)
        if run_dir.exists():
            raise UsageError(f"run directory {run_dir} already exists")
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = new_run_dir(ns.out, cfg.seed)
    handler = attach_log(run_dir)
    try:
        result = run_pipeline(cfg, run_dir)
    finally:
        logging.getLogger("clanet").removeHandler(handler)
        handler.close()
    sys.stdout.write(format_report(result))
    print(f"run directory: {run_dir}")


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "segment": cmd_segment,
    "select-patches": cmd_select_patches,
    "embed": cmd_embed,
    "train-ssl": cmd_train_ssl,
    "train-mil": cmd_train_mil,
    "evaluate": cmd_evaluate,
    "truncation-study": cmd_truncation,
    "pipeline": cmd_pipeline,
}


def _origin(exc: BaseException) -> str:
    """Name of the deepest package module in the traceback (the failing stage)."""
    mod = None
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("clanet.") and name != "clanet.cli":
            mod = name
        tb = tb.tb_next
    return (mod or "clanet.cli").removeprefix("clanet.")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits 2 on usage errors, 0 on --help
    logging.basicConfig(level=getattr(logging, ns.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(ns)
        if cfg.threads:
            os.environ.setdefault("NUMBA_NUM_THREADS", str(cfg.threads))
        COMMANDS[ns.command](ns, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clanet {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - categorised report, nonzero exit
        print(f"clanet {ns.command}: {_origin(exc)} error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if ns.log_level == "DEBUG":
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
