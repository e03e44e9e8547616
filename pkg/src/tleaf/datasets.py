"""Synthetic corpora of formulas with oracle-verified satisfying and violating traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .automata import Dfa, compile_formula, minimize, run
from .embedder import Example
from .ltl import Alphabet, ComplexityParams, Formula, GenerationError, canonicalize, check_steps, format_formula, parse, random_formula

CORPUS_VERSION = 1
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    pass


@dataclass
class Entry:
    formula: Formula
    split: str
    sat: list[tuple[frozenset, ...]]
    unsat: list[tuple[frozenset, ...]]


@dataclass
class Corpus:
    complexity: ComplexityParams
    seed: int
    entries: list[Entry] = field(default_factory=list)

    @property
    def props(self) -> tuple[int, ...]:
        return tuple(range(self.complexity.n_v))

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def examples(self, split: str | None = None) -> list[Example]:
        es = self.entries if split is None else self.split(split)
        return [Example(e.formula, self.props, list(e.sat), list(e.unsat)) for e in es]

    def n_traces(self) -> int:
        return sum(len(e.sat) + len(e.unsat) for e in self.entries)


def alphabet_for(n_v: int) -> Alphabet:
    return Alphabet([f"p{i}" for i in range(n_v)])


def _budget_table(a: Dfa, accepting: frozenset, max_len: int) -> np.ndarray:
    """``ok[l, q]``: some word of exactly ``l`` more symbols leads from ``q`` into ``accepting``."""
    ok = np.zeros((max_len + 1, a.n_states), dtype=bool)
    ok[0, list(accepting)] = True
    for l in range(1, max_len + 1):
        ok[l] = ok[l - 1][a.delta].any(axis=1)
    return ok


def _sample(a: Dfa, accepting: frozenset, len_range: tuple[int, int], rng: np.random.Generator) -> tuple[frozenset, ...]:
    lo, hi = len_range
    if not 1 <= lo <= hi <= 12:
        raise ValueError(f"length range {len_range} outside [1, 12]")
    ok = _budget_table(a, accepting, hi)
    lengths = [l for l in range(lo, hi + 1) if ok[l, a.initial]]
    if not lengths:
        raise GenerationError(f"no trace of length {lo}..{hi} reaches the target states")
    n = lengths[rng.integers(len(lengths))]
    q = a.initial
    out = []
    for left in range(n, 0, -1):
        good = np.nonzero(ok[left - 1][a.delta[q]])[0]
        j = good[rng.integers(len(good))]
        out.append(a.symbols[j])
        q = int(a.delta[q, j])
    return tuple(out)


def sample_sat_trace(a: Dfa, len_range: tuple[int, int], rng: np.random.Generator) -> tuple[frozenset, ...]:
    return _sample(a, a.accepting, len_range, rng)


def sample_unsat_trace(a: Dfa, len_range: tuple[int, int], rng: np.random.Generator) -> tuple[frozenset, ...]:
    return _sample(a, frozenset(range(a.n_states)) - a.accepting, len_range, rng)


def _distinct(draw, k: int, tries: int) -> list:
    seen, out = set(), []
    for _ in range(tries):
        w = draw()
        if w not in seen:
            seen.add(w)
            out.append(w)
            if len(out) == k:
                return out
    while len(out) < k:  # too few distinct words exist; repeat some
        out.append(draw())
    return out


def gen_corpus(
    params: ComplexityParams,
    n_formulas: int,
    traces_per_side: int = 10,
    len_range: tuple[int, int] = (2, 8),
    seed: int = 0,
    max_attempts: int = 200,
) -> Corpus:
    """Random formulas (distinct up to canonical form) with balanced sampled traces, split 80/10/10."""
    props = tuple(range(params.n_v))
    seen: set[Formula] = set()
    entries = []
    for i in range(n_formulas):
        for attempt in range(max_attempts):
            rng = np.random.default_rng([seed, i, attempt])
            f = random_formula(params, rng)
            c = canonicalize(f)
            if c in seen:
                continue
            a = minimize(compile_formula(c, props=props))
            try:
                sat = _distinct(lambda: sample_sat_trace(a, len_range, rng), traces_per_side, 20 * traces_per_side)
                unsat = _distinct(lambda: sample_unsat_trace(a, len_range, rng), traces_per_side, 20 * traces_per_side)
            except GenerationError:
                continue
            seen.add(c)
            entries.append(Entry(c, "", sat, unsat))
            break
        else:
            raise GenerationError(f"formula {i}: no usable distinct formula after {max_attempts} attempts")
    order = np.random.default_rng([seed, 7]).permutation(len(entries))
    n_train = int(round(0.8 * len(entries)))
    n_val = int(round(0.1 * len(entries)))
    for rank, j in enumerate(order):
        entries[j].split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    corpus = Corpus(params, seed, entries)
    verify(corpus)
    return corpus


def verify(corpus: Corpus) -> None:
    """Re-check every label with the semantic checker; raises on the first disagreement."""
    for i, e in enumerate(corpus.entries):
        if e.split not in SPLITS:
            raise CorpusError(f"entry {i}: unknown split {e.split!r}")
        if len(e.sat) != len(e.unsat):
            raise CorpusError(f"entry {i}: unbalanced trace counts")
        for w in e.sat:
            if not check_steps(w, e.formula):
                raise CorpusError(f"entry {i}: satisfying trace {[sorted(s) for s in w]} violates the formula")
        for w in e.unsat:
            if check_steps(w, e.formula):
                raise CorpusError(f"entry {i}: violating trace {[sorted(s) for s in w]} satisfies the formula")


def verify_with_dfa(corpus: Corpus) -> int:
    """Count label disagreements of the compiled automata (expected 0)."""
    bad = 0
    for e in corpus.entries:
        a = minimize(compile_formula(e.formula, props=corpus.props))
        bad += sum(not run(a, w) for w in e.sat) + sum(run(a, w) for w in e.unsat)
    return bad


def to_json(corpus: Corpus) -> dict:
    return {
        "version": CORPUS_VERSION,
        "complexity": {"n_v": corpus.complexity.n_v, "w_t": corpus.complexity.w_t},
        "seed": corpus.seed,
        "entries": [
            {
                "formula": format_formula(e.formula, alphabet_for(corpus.complexity.n_v)),
                "split": e.split,
                "sat": [[sorted(s) for s in w] for w in e.sat],
                "unsat": [[sorted(s) for s in w] for w in e.unsat],
            }
            for e in corpus.entries
        ],
    }


def from_json(data: dict) -> Corpus:
    try:
        if data["version"] != CORPUS_VERSION:
            raise CorpusError(f"unsupported corpus version {data['version']}")
        params = ComplexityParams(int(data["complexity"]["n_v"]), int(data["complexity"]["w_t"]))
        al = alphabet_for(params.n_v)
        entries = [
            Entry(
                canonicalize(parse(e["formula"], al)),
                e["split"],
                [tuple(frozenset(s) for s in w) for w in e["sat"]],
                [tuple(frozenset(s) for s in w) for w in e["unsat"]],
            )
            for e in data["entries"]
        ]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"malformed corpus: {exc}") from None
    corpus = Corpus(params, int(data["seed"]), entries)
    for e in entries:
        for w in e.sat + e.unsat:
            if not w or any(not 0 <= p < params.n_v for s in w for p in s):
                raise CorpusError("trace outside the corpus alphabet")
    verify(corpus)
    return corpus


def dumps(corpus: Corpus) -> str:
    return json.dumps(to_json(corpus), sort_keys=True, separators=(",", ":")) + "\n"


def save(corpus: Corpus, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(corpus))


def load(path: str) -> Corpus:
    with open(path) as fh:
        return from_json(json.load(fh))


def with_extra_traces(corpus: Corpus, traces_per_side: int, len_range: tuple[int, int] = (2, 8), seed: int = 1) -> list[Example]:
    """Fresh traces for the same formulas, disjoint from the stored ones where possible."""
    out = []
    for i, e in enumerate(corpus.entries):
        rng = np.random.default_rng([seed, 99, i])
        a = minimize(compile_formula(e.formula, props=corpus.props))
        used_s, used_u = set(e.sat), set(e.unsat)

        def fresh(sampler, used):
            for _ in range(50):
                w = sampler(a, len_range, rng)
                if w not in used:
                    used.add(w)
                    return w
            return sampler(a, len_range, rng)

        sat = [fresh(sample_sat_trace, used_s) for _ in range(traces_per_side)]
        unsat = [fresh(sample_unsat_trace, used_u) for _ in range(traces_per_side)]
        out.append(Example(e.formula, corpus.props, sat, unsat))
    return out


def label_balance(entries: Sequence[Entry]) -> float:
    n_sat = sum(len(e.sat) for e in entries)
    n = sum(len(e.sat) + len(e.unsat) for e in entries)
    return n_sat / n if n else 0.0
