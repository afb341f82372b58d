import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pulse.model import FunctionVerdict
from pulse.verdict import (BENIGN, INDETERMINATE, MALICIOUS, Hyperplane, Metrics, SampleFeatures, aggregate_sample,
                           classify_sample, compute_metrics, fit_svm, size_class, verdict_record, write_plot_data,
                           write_verdicts)


def feats(pct, n, sid="s"):
    return SampleFeatures(sid, n, round(pct * n / 100), pct, size_class(n))


def test_aggregate_examples():
    f = aggregate_sample([FunctionVerdict(MALICIOUS, 0.9, (0.0, 1.0))] * 3, "x")
    assert (f.malicious_pct, f.size_class) == (100.0, "C1")
    assert aggregate_sample([BENIGN] * 10, "y").malicious_pct == 0.0
    f = aggregate_sample([MALICIOUS] * 100 + [BENIGN] * 150, "z")
    assert (f.malicious_pct, f.size_class) == (40.0, "C3")
    empty = aggregate_sample([], "e")
    assert empty.n_functions == 0 and empty.degenerate and empty.size_class is None


@pytest.mark.parametrize("n,cls", [(1, "C1"), (10, "C1"), (11, "C2"), (100, "C2"), (101, "C3"),
                                   (1000, "C3"), (1001, "C4")])
def test_size_class_edges(n, cls):
    assert size_class(n) == cls


def test_symmetric_two_points():
    h = fit_svm([feats(0, 10), feats(100, 10)], [BENIGN, MALICIOUS])
    w, b = h.raw_space()
    threshold = -(b + w[1] * 1.0) / w[0]
    assert abs(threshold - 50.0) <= 1.0


def test_separable_training_accuracy():
    rng = np.random.default_rng(0)
    fs, labels = [], []
    for i in range(60):
        n = int(rng.integers(3, 2000))
        mal = i % 2 == 1
        pct = rng.uniform(60, 100) if mal else rng.uniform(0, 40)
        fs.append(feats(pct, n, str(i)))
        labels.append(MALICIOUS if mal else BENIGN)
    h = fit_svm(fs, labels, seed=1)
    for f, y in zip(fs, labels):
        v, margin = classify_sample(h, f)
        assert v == y
        assert (margin > 0) == (y == MALICIOUS)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_svm([feats(0, 10), feats(10, 10)], [BENIGN, BENIGN])
    with pytest.raises(ValueError):
        fit_svm([feats(0, 10), SampleFeatures("e", 0, 0, 0.0, None)], [BENIGN, MALICIOUS])


def test_zero_variance_feature():
    h = fit_svm([feats(0, 10), feats(100, 10), feats(5, 10), feats(95, 10)], [BENIGN, MALICIOUS, BENIGN, MALICIOUS])
    assert h.feature_stds[1] == 1.0


def test_fit_deterministic():
    fs = [feats(p, n) for p, n in [(0, 5), (20, 50), (80, 7), (100, 300)]]
    labels = [BENIGN, BENIGN, MALICIOUS, MALICIOUS]
    assert fit_svm(fs, labels, seed=3) == fit_svm(fs, labels, seed=3)


def test_degenerate_is_indeterminate():
    h = Hyperplane((1.0, 0.0), 0.0, (50.0, 1.0), (10.0, 1.0))
    assert classify_sample(h, SampleFeatures("e", 0, 0, 0.0, None)) == (INDETERMINATE, None)


def test_table12_row():
    m = Metrics(tp=88, fp=1, fn=0, tn=24)
    assert round(100 * m.accuracy, 2) == 99.12
    assert round(100 * m.precision, 2) == 98.88
    assert m.recall == 1.0
    assert round(100 * m.f1, 2) == 99.44


def test_metrics_all_correct_and_coin_flip():
    truth = [MALICIOUS, BENIGN] * 500
    assert compute_metrics(truth, truth).accuracy == 1.0
    rng = np.random.default_rng(0)
    guess = [MALICIOUS if b else BENIGN for b in rng.integers(0, 2, size=1000)]
    assert abs(compute_metrics(guess, truth).accuracy - 0.5) <= 0.05


def test_metrics_undefined_are_zero():
    m = Metrics(0, 0, 0, 5)
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.0, 0.0, 0.0, 1.0)


labels = st.sampled_from([BENIGN, MALICIOUS])


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=200))
def test_metrics_brute_force(pairs):
    pred, truth = zip(*pairs)
    m = compute_metrics(list(pred), list(truth))
    tally = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, t in pairs:
        key = ("t" if p == t else "f") + ("p" if p == MALICIOUS else "n")
        tally[key] += 1
    assert (m.tp, m.fp, m.fn, m.tn) == (tally["tp"], tally["fp"], tally["fn"], tally["tn"])
    assert m.accuracy == (m.tp + m.tn) / len(pairs)


hyperplanes = st.builds(
    lambda w0, w1, b, m0, m1, s0, s1: Hyperplane((w0, w1), b, (m0, m1), (s0, s1)),
    st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), st.floats(-5, 5), st.floats(-5, 5),
    st.floats(0, 100), st.floats(0, 3), st.floats(0.1, 50), st.floats(0.1, 2))
points = st.tuples(st.floats(0, 100), st.integers(1, 5000))


@given(hyperplanes, st.floats(1e-3, 1e3), st.lists(points, min_size=1, max_size=20))
def test_scaling_invariance(h, k, pts):
    hk = h.scaled(k)
    for pct, n in pts:
        f = feats(pct, n)
        d = float(h.decision(f.vector()))
        if abs(d) > 1e-9:
            assert classify_sample(h, f)[0] == classify_sample(hk, f)[0]


@given(hyperplanes, st.lists(points, min_size=1, max_size=20))
def test_standardization_roundtrip(h, pts):
    w, b = h.raw_space()
    for pct, n in pts:
        x = feats(pct, n).vector()
        std = float(h.decision(x))
        raw = float(w @ x + b)
        assert std == pytest.approx(raw, rel=1e-9, abs=1e-9)
    assert Hyperplane.from_dict(json.loads(json.dumps(h.to_dict()))) == h


@given(st.lists(points, min_size=4, max_size=20), st.floats(0, 100), st.integers(1, 5000), st.floats(0, 50))
def test_monotone_in_pct(train_pts, pct, n, bump):
    fs = [feats(p, m) for p, m in train_pts] + [feats(0, 10), feats(100, 10)]
    ys = [MALICIOUS if p >= 50 else BENIGN for p, _ in train_pts] + [BENIGN, MALICIOUS]
    h = fit_svm(fs, ys, epochs=300)
    assert h.weights[0] > 0
    if classify_sample(h, feats(pct, n))[0] == MALICIOUS:
        assert classify_sample(h, feats(min(pct + bump, 100.0), n))[0] == MALICIOUS


def test_reports(tmp_path):
    h = Hyperplane((1.0, 0.2), -0.1, (50.0, 1.5), (30.0, 0.5))
    recs = []
    for sid, pct, n, truth in [("a", 0.0, 12, BENIGN), ("b", 90.0, 4, MALICIOUS), ("c", 0.0, 0, MALICIOUS)]:
        f = SampleFeatures(sid, n, 0, pct, size_class(n))
        v, m = classify_sample(h, f)
        recs.append(verdict_record(f, "fam", v, m, truth))
    write_verdicts(tmp_path / "v.jsonl", recs)
    lines = [json.loads(x) for x in (tmp_path / "v.jsonl").read_text().splitlines()]
    assert set(lines[0]) == {"sample_id", "family", "n_functions", "malicious_pct", "size_class", "margin",
                             "verdict", "truth"}
    assert lines[2]["verdict"] == INDETERMINATE
    write_plot_data(tmp_path / "p.csv", tmp_path / "b.json", recs, h)
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert [r["sample_id"] for r in rows] == ["a", "b"]
    assert "raw_weights" in json.loads((tmp_path / "b.json").read_text())
