from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clanet.core import Batch, DatasetManifest, EmbeddingSequence, Frame, ImageSequence, Rng
from clanet.evaluation import (
    SplitError,
    batch_metrics,
    evaluate_probs,
    majority_vote,
    make_split,
    seq_metrics,
    summarize,
    table_csv,
    truncate,
    truncation_length,
    truncation_study,
)


def _corpus(batches_per_class, seqs_per_batch=3):
    """``batches_per_class`` is a list, one entry per class."""
    batches, seqs = [], []
    for c, nb in enumerate(batches_per_class):
        for b in range(nb):
            bid = f"c{c}b{b}"
            batches.append(Batch(bid, c))
            for s in range(seqs_per_batch):
                seqs.append(ImageSequence(f"{bid}s{s}", bid, c, (Frame("x.png", 0.0),)))
    return DatasetManifest(tuple(f"k{c}" for c in range(len(batches_per_class))), tuple(batches), tuple(seqs))


class TestSplits:
    def test_separated_small(self):
        m = _corpus([2, 2])
        sp = make_split(m, "separated", Rng(0))
        tr, te = sp.batches(m)
        assert len(tr) == 2 and len(te) == 2 and not tr & te
        assert {m.batch_of(b).class_label for b in tr} == {0, 1}

    def test_stratified_small(self):
        m = _corpus([2, 2])
        sp = make_split(m, "stratified", Rng(0))
        tr, te = sp.batches(m)
        assert tr == te == {b.batch_id for b in m.batches}
        assert not set(sp.train) & set(sp.test)
        assert len(sp.train) == 6  # one batch's worth per class

    def test_table_mirror(self):
        per_class = [3] * 29 + [2] * 3  # 93 batches over 32 classes
        assert sum(per_class) == 93
        m = _corpus(per_class, seqs_per_batch=2)
        for r in range(3):
            tr, te = make_split(m, "separated", Rng(r)).batches(m)
            assert (len(tr), len(te)) == (32, 61)

    def test_stratified_sizes_match_separated(self):
        m = _corpus([4, 4, 4], seqs_per_batch=6)
        for r in range(5):
            sep = make_split(m, "separated", Rng(r))
            strat = make_split(m, "stratified", Rng(r))
            assert len(strat.train) == len(sep.train) == 18

    def test_replicates_differ(self):
        m = _corpus([4, 4, 4])
        splits = {make_split(m, "separated", Rng(r)).train for r in range(6)}
        assert len(splits) > 1

    def test_errors(self):
        with pytest.raises(SplitError, match="at least 2 batches"):
            make_split(_corpus([1, 1]), "separated", Rng(0))
        with pytest.raises(SplitError, match="strategy"):
            make_split(_corpus([2]), "random", Rng(0))
        with pytest.raises(SplitError, match=">= 2"):
            make_split(_corpus([2], seqs_per_batch=1), "stratified", Rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(2, 5), st.integers(0, 1000))
    def test_invariants(self, per_class, seqs, seed):
        m = _corpus(per_class, seqs)
        if max(per_class) >= 2:
            sp = make_split(m, "separated", Rng(seed))
            tr, te = sp.batches(m)
            assert not tr & te
            assert {m.batch_of(b).class_label for b in tr} == set(range(len(per_class)))
            assert sorted(sp.train + sp.test) == sorted(s.sequence_id for s in m.sequences)
        sp = make_split(m, "stratified", Rng(seed))
        tr, te = sp.batches(m)
        assert tr == te == {b.batch_id for b in m.batches}
        assert not set(sp.train) & set(sp.test)


class TestSeqMetrics:
    def test_all_correct(self):
        assert seq_metrics([0, 1, 2], [0, 1, 2]) == (1.0, 1.0)

    def test_all_wrong(self):
        assert seq_metrics([1, 2, 0], [0, 1, 2])[0] == 0.0

    def test_confusion_fixture(self):
        y = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
        p = [0, 0, 1, 2, 1, 1, 0, 2, 2, 1]
        acc, f1 = seq_metrics(p, y)
        assert acc == 0.6
        assert f1 == pytest.approx(38 / 63, abs=1e-15)

    def test_absent_classes_ignored(self):
        # class 2 predicted but never a label: only classes 0 and 1 are averaged
        acc, f1 = seq_metrics([0, 2], [0, 1])
        assert f1 == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            seq_metrics([], [])


class TestBatchMetrics:
    def test_single_sequence_batches_reduce(self):
        m = _corpus([2, 2], seqs_per_batch=1)
        gen = np.random.default_rng(0)
        probs = {s.sequence_id: gen.dirichlet(np.ones(2)) for s in m.sequences}
        rep = evaluate_probs(probs, m)
        assert (rep.batch_acc, rep.batch_f1) == (rep.seq_acc, rep.seq_f1)

    def test_soft_average(self):
        m = _corpus([1, 1], seqs_per_batch=3)
        probs = {"c0b0s0": np.array([0.6, 0.4]), "c0b0s1": np.array([0.4, 0.6]), "c0b0s2": np.array([0.9, 0.1]),
                 "c1b0s0": np.array([0.2, 0.8]), "c1b0s1": np.array([0.2, 0.8]), "c1b0s2": np.array([0.2, 0.8])}
        assert batch_metrics(probs, m) == (1.0, 1.0)

    def test_hard_vote(self):
        m = _corpus([1, 1], seqs_per_batch=3)
        probs = {"c0b0s0": np.array([0.45, 0.55]), "c0b0s1": np.array([0.45, 0.55]), "c0b0s2": np.array([1.0, 0.0]),
                 "c1b0s0": np.array([0.2, 0.8]), "c1b0s1": np.array([0.2, 0.8]), "c1b0s2": np.array([0.2, 0.8])}
        assert batch_metrics(probs, m, soft=True)[0] == 1.0
        assert batch_metrics(probs, m, soft=False)[0] == 0.5

    def test_group_by_oracle(self):
        gen = np.random.default_rng(1)
        for _ in range(20):
            m = _corpus(list(gen.integers(1, 4, 3)), int(gen.integers(1, 4)))
            probs = {s.sequence_id: gen.dirichlet(np.ones(3)) for s in m.sequences}
            sums, labels = {}, {}
            for s in m.sequences:
                sums[s.batch_id] = sums.get(s.batch_id, 0) + probs[s.sequence_id]
                labels[s.batch_id] = s.class_label
            ids = sorted(sums)
            want = seq_metrics([int(np.argmax(sums[b])) for b in ids], [labels[b] for b in ids])
            assert batch_metrics(probs, m) == pytest.approx(want, abs=1e-15)


class TestMajorityVote:
    def test_simple(self):
        assert majority_vote([1, 1, 2]) == 1

    def test_tie(self):
        assert majority_vote([2, 1]) == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=30))
    def test_counting_oracle(self, votes):
        counts = Counter(votes)
        top = max(counts.values())
        assert majority_vote(votes) == min(c for c, n in counts.items() if n == top)


class TestReports:
    def test_summary_population_std(self):
        from clanet.evaluation import EvalReport

        reps = [EvalReport(a, a, a, a) for a in (0.5, 0.7, 0.9)]
        s = summarize(reps)
        assert s["seq_acc"][0] == pytest.approx(0.7)
        assert s["seq_acc"][1] == pytest.approx(np.std([0.5, 0.7, 0.9]))
        csv = table_csv({"m": {"separated": reps}})
        assert csv.splitlines()[0].startswith("method,strategy,seq_acc_mean,seq_acc_std")
        assert csv.splitlines()[1].startswith("m,separated,0.700000")


def _emb(n, sid="c0b0s0"):
    return EmbeddingSequence(sid, tuple(np.full((1, 2), i, np.float32) for i in range(n)), np.arange(n, dtype=float))


class TestTruncation:
    def test_ceiling_rule(self):
        assert truncation_length(10, 0.25) == 3
        assert truncation_length(10, 0.01) == 1
        assert truncation_length(4, 0.5) == 2

    def test_orders(self):
        seq = _emb(10)
        np.testing.assert_array_equal(truncate(seq, 0.25).timestamps, [0, 1, 2])
        np.testing.assert_array_equal(truncate(seq, 0.25, "reverse").timestamps, [7, 8, 9])
        assert truncate(seq, 1.0) == seq and truncate(seq, 1.0, "reverse") == seq

    def test_full_fraction_equals_full_evaluation(self):
        m = _corpus([1, 1], seqs_per_batch=2)
        gen = np.random.default_rng(0)
        seqs = {s.sequence_id: _emb(int(gen.integers(1, 8)), s.sequence_id) for s in m.sequences}
        w = gen.normal(size=(2, 2))

        def fn(seq):
            z = seq.instances().mean(0) @ w
            return np.exp(z) / np.exp(z).sum()

        full = evaluate_probs({k: fn(v) for k, v in seqs.items()}, m)
        for order in ("natural", "reverse"):
            assert truncation_study(fn, seqs, m, (1.0,), order)[1.0] == full

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            truncation_study(lambda s: np.ones(1), {}, _corpus([1]), (0.3,))
