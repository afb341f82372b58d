import json

import pytest

from pulse.corpus import build_labeled_corpus, fit_power_law, instruction_frequencies, zipf_rank_frequency
from pulse.normalize import filter_short, segment_functions
from pulse.synth import SyntheticSpec, generate_synthetic_corpus
from pulse.trace import load_corpus

SMALL = dict(n_benign=40, n_malicious=40, n_test_benign=8, n_test_malicious=8)


def train_corpus(manifest):
    funcs = [f for s in load_corpus(manifest, ["train"]) for f in filter_short(segment_functions(s))]
    return build_labeled_corpus(funcs)


def shared_texts(manifest):
    by = {"benign": set(), "malicious": set()}
    for s in load_corpus(manifest, ["train"]):
        by[s.label].update(f.text for f in filter_short(segment_functions(s)))
    return by["benign"] & by["malicious"]


def test_deterministic(tmp_path):
    spec = SyntheticSpec(seed=4, **SMALL)
    m1, _ = generate_synthetic_corpus(spec, tmp_path / "a")
    m2, _ = generate_synthetic_corpus(spec, tmp_path / "b")
    assert [e.sample_id for e in m1.entries] == [e.sample_id for e in m2.entries]
    for e1, e2 in zip(m1.entries, m2.entries):
        assert open(e1.path).read() == open(e2.path).read()
    assert (tmp_path / "a" / "generator_log.json").read_bytes() == (tmp_path / "b" / "generator_log.json").read_bytes()


def test_layout(tmp_path):
    spec = SyntheticSpec(seed=1, **SMALL)
    m, _ = generate_synthetic_corpus(spec, tmp_path)
    splits = {s: m.by_split(s) for s in ("train", "validation", "test")}
    assert len(splits["test"]) == 16
    assert len(splits["validation"]) == 16 and len(splits["train"]) == 64
    # test samples come from families never seen in train or validation
    seen = {e.family for e in splits["train"] + splits["validation"]}
    assert not seen & {e.family for e in splits["test"]}
    samples = load_corpus(m)
    assert all(not s.errors for s in samples)
    lo, hi = spec.functions_per_sample
    for s in samples:
        n = len(segment_functions(s))
        assert lo <= n <= hi


def test_no_overlap_removes_nothing(tmp_path):
    m, log = generate_synthetic_corpus(SyntheticSpec(overlap=0.0, seed=2, **SMALL), tmp_path)
    assert train_corpus(m).n_shared_removed == 0
    assert log.shared_in_both() == []


@pytest.mark.parametrize("seed", [0, 3])
def test_removed_functions_match_log(tmp_path, seed):
    m, log = generate_synthetic_corpus(SyntheticSpec(overlap=0.5, seed=seed), tmp_path)
    lc = train_corpus(m)
    logged = set(log.shared_in_both())
    assert logged
    assert lc.n_shared_removed == len(logged)
    assert shared_texts(m) == logged
    doc = json.loads((tmp_path / "generator_log.json").read_text())
    assert set(doc["shared_in_both_train"]) == logged


@pytest.mark.parametrize("exponent", [-1.0, -0.1])
def test_zipf_recovered(tmp_path, exponent):
    m, _ = generate_synthetic_corpus(SyntheticSpec(zipf_exponent=exponent, seed=9), tmp_path)
    fit = fit_power_law(zipf_rank_frequency(instruction_frequencies(load_corpus(m))))
    assert abs(fit.exponent - exponent) <= 0.05
    assert fit.r_squared >= 0.98


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(overlap=1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(functions_per_sample=(5, 2))
    spec = SyntheticSpec(seed=3)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
