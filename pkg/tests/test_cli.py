import json

import numpy as np
import pytest

from clanet.cli import main
from clanet.core import load_manifest, read_embedding_dir
from clanet.pipeline import ConfigError, PipelineConfig, apply_env, load_config
from clanet.synth import BatchSpec, ClassSpec, CorpusSpec, spec_to_dict


def _tiny_spec(path):
    classes = (ClassSpec(0, "grainy", speckle_scale=0.6, ring_width=0.8),
               ClassSpec(1, "smooth", speckle_scale=2.5, ring_width=2.2))
    batches = tuple(
        BatchSpec(f"c{c}b{b}", c, initial_confluency=0.3, brightness=5.0 * b, interval_hours=4,
                  duration_days=0.5, sequences=2)
        for c in range(2) for b in range(2)
    )
    path.write_text(json.dumps(spec_to_dict(CorpusSpec(classes, batches, (96, 96)))))
    return path


TINY = ["--epochs", "3", "--set", "ccs.patch_size=32", "--set", "ccs.k=3", "--set", "eval.replicates=1",
        "--set", "eval.baseline_epochs=3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = _tiny_spec(root / "spec.json")
    assert main(["synth-gen", "--spec", str(spec), "--seed", "1", "--out", str(root / "corpus"), "--stats"]) == 0
    return root


class TestUsage:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        assert "pipeline" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["pipeline", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_config_value(self, capsys):
        assert main(["pipeline", "--set", "mil.epochs=0", "--out", "/nonexistent"]) == 2

    def test_runtime_error_is_attributed(self, tmp_path, capsys):
        assert main(["segment", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "core error" in err and "ManifestError" in err


class TestConfig:
    def test_layering(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"mil": {"epochs": 10, "lr": 0.1}, "seed": 3}))
        env = {"CLANET_MIL__EPOCHS": "20", "CLANET_CCS__K": "4", "HOME": "/x"}
        cfg = load_config(tmp_path / "c.json", env, [("mil.epochs", "30")])
        assert cfg.mil.epochs == 30 and cfg.mil.lr == 0.1 and cfg.ccs.k == 4 and cfg.seed == 3

    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.ccs.k, cfg.ccs.patch_size) == (10, 112)
        assert (cfg.mil.epochs, cfg.mil.batch, cfg.mil.lr) == (2000, 32, 5e-4)
        assert (cfg.mil.alpha1, cfg.mil.alpha2) == (1, 1)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(None, {}, [("mil.nope", 1)])

    def test_env_list_coercion(self):
        cfg = apply_env(PipelineConfig(), {"CLANET_EVAL__METHODS": "clanet,max_pool"})
        assert tuple(cfg.eval.methods) == ("clanet", "max_pool")

    def test_round_trip(self, tmp_path):
        cfg = load_config(None, {}, [("mil.epochs", 7), ("eval.strategies", "separated")])
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert load_config(tmp_path / "c.json", {}).to_dict() == cfg.to_dict()


class TestStages:
    def test_synth_outputs(self, corpus):
        m = load_manifest(corpus / "corpus")
        assert m.counts == (2, 4, 8, 32)
        assert (corpus / "corpus" / "intervals.csv").exists()

    def test_segment_and_select(self, corpus):
        out = corpus / "seg"
        assert main(["segment", "--manifest", str(corpus / "corpus"), "--out", str(out)]) == 0
        assert len(list(out.rglob("*.png"))) == 32
        sel = corpus / "sel"
        args = ["select-patches", "--manifest", str(corpus / "corpus"), "--k", "3", "--patch-size", "32",
                "--out", str(sel), "--overlay"]
        assert main(args) == 0
        assert list(sel.rglob("*.npz")) and list(sel.rglob("*.png"))

    def test_embed_train_evaluate(self, corpus):
        emb = corpus / "emb"
        args = ["embed", "--manifest", str(corpus / "corpus"), "--k", "3", "--patch-size", "32",
                "--d", "64", "--out", str(emb)]
        assert main(args) == 0
        seqs = read_embedding_dir(emb)
        assert len(seqs) == 8 and {s.dim for s in seqs.values()} == {64}

        model_dir = corpus / "model"
        args = ["train-mil", "--embeddings", str(emb), "--manifest", str(corpus / "corpus"),
                "--epochs", "5", "--split", "separated", "--out", str(model_dir)]
        assert main(args) == 0
        ckpt = next(model_dir.glob("*.clam"))

        report = corpus / "report"
        args = ["evaluate", "--embeddings", str(emb), "--manifest", str(corpus / "corpus"), "--epochs", "3",
                "--replicates", "1", "--methods", "clanet,avg_pool", "--report", str(report)]
        assert main(args) == 0
        assert list(report.parent.glob("report*"))

        trunc = corpus / "trunc.csv"
        args = ["truncation-study", "--checkpoint", str(ckpt), "--embeddings", str(emb),
                "--manifest", str(corpus / "corpus"), "--fractions", "0.5,1.0", "--out", str(trunc)]
        assert main(args) == 0
        assert trunc.exists()

    def test_train_ssl(self, corpus):
        out = corpus / "ssl"
        args = ["train-ssl", "--manifest", str(corpus / "corpus"), "--epochs", "1", "--patches", "4", "--patch-size", "32",
                "--d", "8", "--out", str(out)]
        assert main(args) == 0
        assert list(out.rglob("*.npz"))


class TestPipeline:
    def test_deterministic_runs(self, corpus, tmp_path):
        spec = str(corpus / "spec.json")
        digests = []
        for name in ("a", "b"):
            run = tmp_path / name
            args = ["pipeline", "--seed", "7", "--set", f"synth.spec_file={spec}", *TINY, "--run-dir", str(run)]
            assert main(args) == 0
            for required in ("config.json", "metrics.csv", "table.csv", "logs/run.log", "report.txt"):
                assert (run / required).exists(), required
            files = sorted(p for p in run.rglob("*") if p.suffix in (".csv", ".clam"))
            digests.append({p.relative_to(run).as_posix(): p.read_bytes() for p in files})
        assert digests[0].keys() == digests[1].keys()
        assert any(k.endswith(".clam") for k in digests[0])
        for k in digests[0]:
            assert digests[0][k] == digests[1][k], k

    def test_config_snapshot_replays(self, corpus, tmp_path):
        spec = str(corpus / "spec.json")
        first = tmp_path / "first"
        assert main(["pipeline", "--seed", "3", "--set", f"synth.spec_file={spec}", *TINY,
                     "--run-dir", str(first)]) == 0
        again = tmp_path / "again"
        assert main(["pipeline", "--config", str(first / "config.json"), "--run-dir", str(again)]) == 0
        assert (first / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()

    def test_existing_run_dir_refused(self, tmp_path):
        (tmp_path / "r").mkdir()
        assert main(["pipeline", "--run-dir", str(tmp_path / "r")]) != 0
