"""Acceptance suite: one PASS/FAIL line per criterion (see the summary section of the pytest run).

The corpus-scale checks (8, 9) share one pipeline run and take several minutes.
"""
import time

import numpy as np
import pytest
from scipy.stats import norm

from clanet.ccs import BBox, select_patches, similarity
from clanet.cli import main
from clanet.core import (
    EmbeddingSequence,
    Rng,
    decode_embedding_archive,
    encode_embedding_archive,
    load_manifest,
    write_manifest,
)
from clanet.mil import (
    IntervalModel,
    build_interval_model,
    expected_interval,
    init_model,
    loss_and_grads,
    reweight,
    sample_interval,
    segment_bounds,
    tss_sample,
)
from clanet.embedding.ssl import (
    CropConfig,
    SslConfig,
    SslModel,
    batch_inputs,
    init_encoder,
    multi_crop,
    ssl_loss_and_grads,
)
from clanet.pipeline import PipelineConfig, run_pipeline
from clanet.segmentation import label_regions
from clanet.texture import lbp_codes

from oracles import (
    blob_image,
    brute_force_ccs,
    central_difference,
    flood_fill_labels,
    random_embedding_sequence,
    random_manifest,
    relative_error,
)

pytestmark = pytest.mark.acceptance


def test_labeling_oracle(verdict):
    gen = np.random.default_rng(1)
    masks = [gen.random((64, 64)) < gen.uniform(0.2, 0.8) for _ in range(1000)]
    label_regions(masks[0])  # compile outside the timed region
    t0 = time.perf_counter()
    got = [label_regions(m) for m in masks]
    elapsed = time.perf_counter() - t0
    bad = 0
    for m, r in zip(masks, got):
        want, count = flood_fill_labels(m)
        bad += r.count != count or not np.array_equal(r.labels, want)
    verdict(1, bad == 0 and elapsed < 5, f"{bad} mismatches / 1000 masks, {elapsed:.2f}s")


def test_ccs_oracle(verdict):
    gen = np.random.default_rng(2)
    images = [blob_image(gen, 256, 256, big=i % 3 == 0) for i in range(200)]
    select_patches(*images[0], k=10)
    t0 = time.perf_counter()
    got = [select_patches(img, mask, k=10, patch_w=112, patch_h=112) for img, mask in images]
    elapsed = time.perf_counter() - t0
    bad = sum(
        [(b.x, b.y, b.w, b.h, b.density) for b in ps.boxes] != brute_force_ccs(img, mask, 10, 112, 112)
        for ps, (img, mask) in zip(got, images)
    )
    verdict(2, bad == 0 and elapsed < 60, f"{bad} mismatches / 200 images, {elapsed:.2f}s")


def test_similarity_properties(verdict):
    gen = np.random.default_rng(3)
    images = [gen.integers(0, 256, (96, 96)).astype(np.uint8) for _ in range(4)]
    codes = [lbp_codes(im) for im in images]
    worst_sym = worst_self = 0.0
    lo, hi = np.inf, -np.inf
    for n in range(10_000):
        im, cd = images[n % 4], codes[n % 4]
        w1, h1, w2, h2 = (int(v) for v in gen.integers(1, 40, 4))
        x1, y1 = int(gen.integers(0, 96 - w1 + 1)), int(gen.integers(0, 96 - h1 + 1))
        # place b so that it overlaps a
        x2 = int(np.clip(gen.integers(x1 - w2 + 1, x1 + w1), 0, 96 - w2))
        y2 = int(np.clip(gen.integers(y1 - h2 + 1, y1 + h1), 0, 96 - h2))
        a, b = BBox(x1, y1, w1, h1, 0), BBox(x2, y2, w2, h2, 0)
        if a.intersection(b) == 0:
            x2, y2 = x1, y1
            b = BBox(x2, y2, w2, h2, 0)
        ab, ba = similarity(a, b, im, cd), similarity(b, a, im, cd)
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_self = max(worst_self, abs(similarity(a, a, im, cd) - 3.0))
        lo, hi = min(lo, ab), max(hi, ab)
    ok = worst_sym <= 1e-12 and worst_self <= 1e-12 and lo >= 0 and hi <= 3
    verdict(3, ok, f"asym {worst_sym:.1e}, |u(a,a)-3| {worst_self:.1e}, range [{lo:.3f}, {hi:.3f}]")


def _ssl_config(gen):
    hidden, out_dim = int(gen.integers(3, 8)), int(gen.integers(3, 7))
    cfg = SslConfig(hidden=hidden, out_dim=out_dim, crops=CropConfig(global_size=16, local_size=8))
    model = SslModel(init_encoder(gen, hidden, out_dim), init_encoder(gen, hidden, out_dim),
                     gen.normal(size=out_dim) * 0.1, cfg)
    seed = int(gen.integers(0, 2**31))
    patches = [gen.integers(0, 256, (24, 24)) for _ in range(int(gen.integers(1, 4)))]
    inputs = batch_inputs([multi_crop(p, Rng(seed).child(i), cfg.crops) for i, p in enumerate(patches)])
    return model, inputs


def test_gradient_checks(verdict):
    gen = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        d, c, hidden = (int(v) for v in gen.integers(2, 7, 3))
        m = init_model(d, c, hidden, gen)
        m.params["bc"] = gen.normal(size=c)
        bags = [gen.normal(size=(int(gen.integers(1, 7)), d)) for _ in range(int(gen.integers(1, 5)))]
        labels = gen.integers(0, c, len(bags)).tolist()
        w = gen.uniform(0.2, 2, len(bags))
        _, grads = loss_and_grads(m, bags, labels, w)
        for key in grads:
            fd = central_difference(lambda: loss_and_grads(m, bags, labels, w)[0], m.params, key)
            worst = max(worst, relative_error(grads[key], fd))

        model, inputs = _ssl_config(gen)
        _, sgrads, _ = ssl_loss_and_grads(model, inputs)
        for key in model.student:
            fd = central_difference(lambda: ssl_loss_and_grads(model, inputs)[0], model.student, key)
            worst = max(worst, relative_error(sgrads[key], fd))
    elapsed = time.perf_counter() - t0
    verdict(4, worst < 1e-4 and elapsed < 120, f"max relative error {worst:.2e} over 20 configs, {elapsed:.1f}s")


def test_weighted_linearity(verdict):
    gen = np.random.default_rng(5)
    worst_lin = worst_scale = 0.0
    for _ in range(20):
        m = init_model(5, 3, 4, gen)
        m.params["bc"] = gen.normal(size=3)
        n = int(gen.integers(2, 8))
        bags = [gen.normal(size=(int(gen.integers(1, 7)), 5)) for _ in range(n)]
        labels = gen.integers(0, 3, n).tolist()
        w = gen.uniform(0.1, 3, n)
        _, acc = loss_and_grads(m, bags, labels, w)
        _, scaled = loss_and_grads(m, bags, labels, w * gen.uniform(0.01, 100))
        for k in acc:
            want = sum(w[b] / w.sum() * loss_and_grads(m, [bags[b]], [labels[b]])[1][k] for b in range(n))
            worst_lin = max(worst_lin, float(np.abs(acc[k] - want).max()))
            worst_scale = max(worst_scale, float(np.abs(acc[k] - scaled[k]).max()))
    ok = worst_lin <= 1e-10 and worst_scale <= 1e-10
    verdict(5, ok, f"linearity {worst_lin:.1e}, scaling {worst_scale:.1e}")


def test_tss_contracts(verdict):
    gen = np.random.default_rng(6)
    failures = []
    for n in range(1, 12):
        seq = EmbeddingSequence("s", tuple(gen.normal(size=(2, 3)) for _ in range(n)), np.arange(n) * 2.0)
        for mu in (1, 2, 4):
            for interval in range(1, mu + 1):
                s = tss_sample(seq, interval, mu, Rng(n))
                if s.sampled or s.embeddings is not seq or list(s.indices) != list(range(n)):
                    failures.append(f"identity n={n} T={interval} mu={mu}")
    rng = Rng(6)
    for _ in range(10_000):
        n = int(gen.integers(1, 30))
        ts = np.cumsum(gen.uniform(0.5, 6, n))
        seq = EmbeddingSequence("x", tuple(np.zeros((1, 1)) for _ in range(n)), ts)
        s = tss_sample(seq, int(gen.integers(1, 20)), int(gen.integers(1, 5)), rng)
        got = s.timestamps
        if not (np.all(np.diff(got) > 0) and np.isin(got, ts).all()):
            failures.append("subsequence")
            break
    thirteen = EmbeddingSequence("t", tuple(np.zeros((1, 1)) for _ in range(13)), np.arange(13) * 2.0)
    s = tss_sample(thirteen, 8, 2, Rng(0))
    if not (s.sampled and len(s) == 4 and all(a <= i < b for i, (a, b) in zip(s.indices, segment_bounds(13, 4)))):
        failures.append("13-frame fixture")
    if reweight(tss_sample(thirteen, 2, 2, Rng(0)), 13, 2, 2, 1, 1) != 1.0:
        failures.append("W=1 fixture")
    if reweight(None, 8, 2, 4, 1, 1, n_kept=4, kept_timestamps=[0, 4, 8, 12], was_sampled=True) != 1.5:
        failures.append("W=1.5 fixture")
    verdict(6, not failures, ", ".join(failures) or "identity, 10^4 subsequences, 13-frame and weight fixtures")


def test_interval_model(verdict):
    failures = []
    for ts, want in (([0, 2, 4, 6], 2), ([0, 1, 5], 3), ([0, 8], 8), ([0, 3, 4, 10], 3)):
        if expected_interval(ts) != want:
            failures.append(f"mu{ts}")
    model = build_interval_model([[0, 2], [0, 2, 4], [0, 8], [0, 8, 16]])
    if model.sigma != 3.0:
        failures.append(f"sigma {model.sigma}")
    cands, mu = (2, 4, 8), 4
    rng = Rng(7)
    draws = np.array([sample_interval(IntervalModel(3.0, cands), mu, rng) for _ in range(100_000)])
    want = {2: norm.cdf(3, mu, 3), 4: norm.cdf(6, mu, 3) - norm.cdf(3, mu, 3), 8: norm.sf(6, mu, 3)}
    dev = max(abs(np.mean(draws == c) - p) for c, p in want.items())
    if dev >= 0.02:
        failures.append(f"snap deviation {dev:.4f}")
    verdict(7, not failures, ", ".join(failures) or f"mu and sigma fixtures exact, snap deviation {dev:.4f}")


def acceptance_config() -> PipelineConfig:
    cfg = PipelineConfig(seed=0, save_overlays=False, save_patches=False)
    cfg.mil.optimizer, cfg.mil.lr, cfg.mil.epochs = "adam", 1e-3, 300
    cfg.eval.methods = ["clanet", "ga_no_tss", "majority_vote"]
    cfg.eval.truncation = [0.25, 0.5, 0.75, 1.0]
    return cfg


@pytest.fixture(scope="module")
def corpus_run(tmp_path_factory):
    cfg = acceptance_config()
    assert (cfg.synth.classes, cfg.synth.batches_per_class, cfg.synth.sequences) == (8, 4, 6)
    assert cfg.eval.replicates == 3 and cfg.embed.provider == "descriptor"
    t0 = time.perf_counter()
    result = run_pipeline(cfg, tmp_path_factory.mktemp("acceptance"))
    return result, time.perf_counter() - t0


def _mean_acc(result, method, strategy):
    return float(np.mean([r.seq_acc for r in result.reports[method][strategy]]))


def test_batch_effect_reproduction(verdict, corpus_run):
    result, elapsed = corpus_run
    acc = {(m, s): _mean_acc(result, m, s) for m in ("clanet", "ga_no_tss", "majority_vote")
           for s in ("separated", "stratified")}
    strat_ok = acc["clanet", "stratified"] >= 0.95 and acc["majority_vote", "stratified"] >= 0.95
    sep_ok = (acc["clanet", "separated"] >= acc["majority_vote", "separated"] + 0.10
              and acc["clanet", "separated"] >= acc["ga_no_tss", "separated"] + 0.02)
    detail = (f"stratified clanet {acc['clanet', 'stratified']:.3f} / majority {acc['majority_vote', 'stratified']:.3f}; "
              f"separated clanet {acc['clanet', 'separated']:.3f} / majority {acc['majority_vote', 'separated']:.3f} "
              f"/ ga_no_tss {acc['ga_no_tss', 'separated']:.3f}; {elapsed / 60:.1f} min")
    verdict(8, strat_ok and sep_ok and elapsed < 1800, detail)


def test_truncation_study(verdict, corpus_run):
    result, _ = corpus_run
    parts, ok = [], True
    for strategy, by_rep in result.truncation.items():
        fractions = sorted(next(iter(by_rep.values())))
        means = [np.mean([by_rep[r][f].seq_acc for r in by_rep]) for f in fractions]
        ok &= all(b >= a for a, b in zip(means, means[1:]))
        ok &= all(by_rep[r][1.0] == result.reports["clanet"][strategy][r] for r in by_rep)
        parts.append(f"{strategy} " + " ".join(f"{f:g}:{m:.3f}" for f, m in zip(fractions, means)))
    verdict(9, bool(ok), "; ".join(parts))


def test_pipeline_determinism(verdict, tmp_path):
    small = ["--set", "synth.classes=2", "--set", "synth.batches_per_class=2", "--set", "synth.sequences=2",
             "--set", "synth.image_size=128", "--set", "ccs.patch_size=32", "--set", "ccs.k=3",
             "--set", "mil.epochs=5", "--set", "eval.replicates=1", "--set", "eval.baseline_epochs=3"]
    digests = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["pipeline", "--seed", "7", *small, "--run-dir", str(run)]) == 0
        files = sorted(p for p in run.rglob("*") if p.name == "metrics.csv" or p.suffix == ".clam")
        digests.append({p.relative_to(run).as_posix(): p.read_bytes() for p in files})
    same = digests[0] == digests[1] and any(k.endswith(".clam") for k in digests[0])
    verdict(10, same, f"{len(digests[0])} files compared byte for byte")


def test_format_round_trips(verdict, tmp_path):
    gen = np.random.default_rng(11)
    bad = 0
    for i in range(100):
        m = random_manifest(gen)
        write_manifest(m, tmp_path / f"m{i}.json")
        bad += load_manifest(tmp_path / f"m{i}.json", check_files=False) != m
        seq = random_embedding_sequence(gen)
        back = decode_embedding_archive(encode_embedding_archive(seq))
        bad += back != seq or any(a.tobytes() != b.tobytes() for a, b in zip(back.frames, seq.frames))
    verdict(11, bad == 0, f"{bad} mismatches over 100 manifests and 100 archives")
