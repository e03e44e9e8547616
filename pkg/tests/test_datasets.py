import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import formulas
from tleaf import datasets
from tleaf.automata import compile_formula, minimize, run
from tleaf.ltl import PRESETS, ComplexityParams, GenerationError, check_steps, parse


@pytest.fixture(scope="module")
def small_corpus():
    return datasets.gen_corpus(PRESETS["low"], 20, traces_per_side=4, seed=3)


def test_atom_length_one_traces(abc):
    a = minimize(compile_formula(parse("p", abc), props=(0,)))
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert datasets.sample_sat_trace(a, (1, 1), rng) == (frozenset([0]),)
        assert datasets.sample_unsat_trace(a, (1, 1), rng) == (frozenset(),)


def test_tautology_has_no_violating_trace(abc):
    a = minimize(compile_formula(parse("p | !p", abc), props=(0,)))
    with pytest.raises(GenerationError):
        datasets.sample_unsat_trace(a, (1, 5), np.random.default_rng(0))


def test_length_range_checked(abc):
    a = minimize(compile_formula(parse("p", abc), props=(0,)))
    with pytest.raises(ValueError):
        datasets.sample_sat_trace(a, (0, 3), np.random.default_rng(0))
    with pytest.raises(ValueError):
        datasets.sample_sat_trace(a, (2, 13), np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(formulas(n_props=2, max_leaves=6), st.integers(0, 2**31 - 1))
def test_sampled_traces_have_their_labels(f, seed):
    a = minimize(compile_formula(f, props=(0, 1)))
    rng = np.random.default_rng(seed)
    for sampler, want in ((datasets.sample_sat_trace, True), (datasets.sample_unsat_trace, False)):
        try:
            w = sampler(a, (1, 5), rng)
        except GenerationError:
            continue
        assert 1 <= len(w) <= 5
        assert run(a, w) == want == check_steps(w, f)


def test_corpus_counts_and_balance():
    c = datasets.gen_corpus(PRESETS["low"], 10, traces_per_side=10, seed=0)
    assert c.n_traces() == 200
    assert datasets.label_balance(c.entries) == 0.5
    assert {e.split for e in c.entries} <= set(datasets.SPLITS)
    assert [len(c.split(s)) for s in datasets.SPLITS] == [8, 1, 1]


def test_presets_verbatim():
    assert PRESETS["low"] == ComplexityParams(3, 10)
    assert PRESETS["moderate"] == ComplexityParams(3, 20)
    assert PRESETS["high"] == ComplexityParams(6, 20)


def test_formulas_distinct_and_labels_verified(small_corpus):
    assert len({e.formula for e in small_corpus.entries}) == len(small_corpus.entries)
    datasets.verify(small_corpus)
    assert datasets.verify_with_dfa(small_corpus) == 0


def test_same_seed_same_bytes():
    a = datasets.dumps(datasets.gen_corpus(PRESETS["low"], 6, traces_per_side=3, seed=11))
    b = datasets.dumps(datasets.gen_corpus(PRESETS["low"], 6, traces_per_side=3, seed=11))
    assert a == b


def test_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.json"
    datasets.save(small_corpus, str(path))
    back = datasets.load(str(path))
    assert datasets.dumps(back) == datasets.dumps(small_corpus)
    assert [e.formula for e in back.entries] == [e.formula for e in small_corpus.entries]


def test_empty_corpus_round_trip():
    c = datasets.Corpus(PRESETS["low"], 0, [])
    assert datasets.from_json(json.loads(datasets.dumps(c))).entries == []


def test_tampered_label_rejected(small_corpus):
    data = datasets.to_json(small_corpus)
    e = data["entries"][0]
    e["sat"][0], e["unsat"][0] = e["unsat"][0], e["sat"][0]
    with pytest.raises(datasets.CorpusError):
        datasets.from_json(data)


def test_bad_version_rejected(small_corpus):
    data = datasets.to_json(small_corpus)
    data["version"] = 7
    with pytest.raises(datasets.CorpusError, match="version"):
        datasets.from_json(data)


def test_length_distribution_covers_range():
    c = datasets.gen_corpus(PRESETS["low"], 60, traces_per_side=10, seed=1)
    lengths = [len(w) for e in c.entries for w in e.sat + e.unsat]
    counts = np.bincount(lengths, minlength=9)[2:9]
    assert counts.min() > 0
    # loose chi-square bound against uniform over 2..8 (6 dof; 1e-6 tail is about 37)
    expected = len(lengths) / 7
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 37, counts


def test_extra_traces_keep_labels(small_corpus):
    extra = datasets.with_extra_traces(small_corpus, 3, seed=5)
    for ex in extra:
        assert all(check_steps(w, ex.formula) for w in ex.sat)
        assert not any(check_steps(w, ex.formula) for w in ex.unsat)
