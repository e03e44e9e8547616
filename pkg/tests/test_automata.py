import json

import numpy as np
import pytest
from hypothesis import given, settings

from tleaf.automata import (
    CompileError,
    Edge,
    LabeledDfaGraph,
    all_symbols,
    compact_edges,
    compile_formula,
    compile_graph,
    eval_guard,
    export,
    from_json,
    merge_cubes,
    minimize,
    one_hot_symbols,
    run,
    to_json,
    trap_states,
)
from tleaf.ltl import TRUE, Alphabet, And, Atom, ComplexityParams, Not, Or, Trace, canonicalize, check_steps, parse, random_formula

from conftest import all_traces, formulas, mk_trace, symbols


def test_compile_atom_three_states(abc):
    a = compile_formula(parse("p", abc))
    assert a.n_states == 3
    assert set(a.residuals) == {Atom(0), parse("true", abc), parse("false", abc)}
    assert run(a, [frozenset({0})]) and run(a, [frozenset({0}), frozenset()])
    assert not run(a, [frozenset(), frozenset({0})])


def test_compile_true():
    a = compile_formula(TRUE)
    assert a.n_states == 1 and a.accepting == {0}
    assert np.all(a.delta == 0)


def test_run_examples(abc):
    assert run(compile_formula(parse("p U q", abc)), mk_trace([{"p"}, {"q"}], abc))
    assert not run(compile_formula(parse("X p", abc)), mk_trace([{"p"}], abc))


def test_run_alphabet_mismatch(abc):
    a = compile_formula(parse("r", abc))
    with pytest.raises(ValueError):
        run(a, Trace((frozenset({0}),), Alphabet(["p"])))
    b = compile_formula(parse("p | q", abc), symbols=one_hot_symbols((0, 1)))
    with pytest.raises(ValueError):
        run(b, [frozenset({0, 1})])


def test_state_budget():
    f = parse("X X X X X X p", Alphabet())
    with pytest.raises(CompileError):
        compile_formula(f, max_states=3)


@settings(max_examples=150, deadline=None)
@given(formulas(n_props=2, max_leaves=6))
def test_dfa_agrees_with_checker(f):
    a = compile_formula(f, props=(0, 1))
    m = minimize(a)
    for w in all_traces(2, 4):
        expected = check_steps(w, f)
        assert run(a, w) == expected
        assert run(m, w) == expected


def test_dfa_agrees_random_formulas():
    rng = np.random.default_rng(1)
    for _ in range(25):
        f = random_formula(ComplexityParams(3, 10), rng)
        a = minimize(compile_formula(f, props=(0, 1, 2)))
        for w in all_traces(3, 3):
            assert run(a, w) == check_steps(w, f)


def test_minimize_tautology(abc):
    assert minimize(compile_formula(parse("p | !p", abc))).n_states == 1


def test_minimize_idempotent_and_not_larger():
    rng = np.random.default_rng(2)
    for _ in range(20):
        f = random_formula(ComplexityParams(3, 20), rng)
        a = compile_formula(f)
        m = minimize(a)
        assert m.n_states <= a.n_states
        mm = minimize(m)
        assert mm.n_states == m.n_states
        assert np.array_equal(mm.delta, m.delta) and mm.accepting == m.accepting


def test_equivalent_formulas_give_identical_minimal_dfas(abc):
    a = minimize(compile_formula(parse("p & q", abc), props=(0, 1)))
    b = minimize(compile_formula(parse("q & p", abc), props=(0, 1)))
    assert np.array_equal(a.delta, b.delta) and a.accepting == b.accepting
    c = minimize(compile_formula(parse("G p", abc), props=(0,)))
    d = minimize(compile_formula(parse("!F !p", abc), props=(0,)))
    assert np.array_equal(c.delta, d.delta) and c.accepting == d.accepting


def test_trap_state_flagged(abc):
    a = minimize(compile_formula(parse("p", abc)))
    traps = trap_states(a)
    assert len(traps) == 1
    assert next(iter(traps)) not in a.accepting


def test_merge_cubes_drops_free_variable():
    # minterms {p,q} and {p} over (p, q): bit0 = p, bit1 = q
    assert merge_cubes({0b11, 0b01}, 2) == [(0b01, 0b01)]


def test_cube_merge_yields_single_literal(abc):
    a = minimize(compile_formula(parse("p", abc), props=(0, 1)))
    g = compact_edges(a)
    init_edges = [e for e in g.edges if e.src == g.initial]
    guards = {e.dst in g.accepting: e.guard for e in init_edges}
    assert guards[True] == Atom(0)
    assert guards[False] == Not(Atom(0))


def test_compile_p_graph_shape(abc):
    g = compact_edges(minimize(compile_formula(parse("p", abc))))
    assert g.n_states == 3
    # two edges out of the initial state plus a self-loop on each sink
    assert len(g.edges) == 4
    assert sum(1 for e in g.edges if e.src == e.dst) == 2


def _assert_guards_partition(g: LabeledDfaGraph, syms):
    out: dict[int, list] = {}
    for e in g.edges:
        out.setdefault(e.src, []).append(e.guard)
    for q in range(g.n_states):
        for s in syms:
            hits = sum(eval_guard(gd, s) for gd in out[q])
            assert hits == 1, (q, sorted(s))


@pytest.mark.parametrize("form", ["dnf", "cnf"])
def test_guards_exclusive_and_exhaustive(form):
    rng = np.random.default_rng(4)
    for params in (ComplexityParams(3, 10), ComplexityParams(6, 20)):
        for _ in range(6):
            f = random_formula(params, rng)
            props = tuple(range(params.n_v))
            g = compile_graph(f, props=props, form=form)
            _assert_guards_partition(g, all_symbols(props))


def test_one_hot_guards_partition():
    props = (0, 1, 2, 3)
    f = parse("G(!a | !b) & (!c U d)", Alphabet(["a", "b", "c", "d"]))
    syms = one_hot_symbols(props)
    a = minimize(compile_formula(f, props=props, symbols=syms))
    g = compact_edges(a)
    _assert_guards_partition(g, syms)


def test_at_most_one_edge_per_pair():
    rng = np.random.default_rng(5)
    f = random_formula(ComplexityParams(3, 20), rng)
    g = compile_graph(f, props=(0, 1, 2))
    pairs = [(e.src, e.dst) for e in g.edges]
    assert len(pairs) == len(set(pairs))


def test_dot_export(abc):
    g = compile_graph(parse("p", abc), alphabet=abc)
    dot = export(g, "dot").decode()
    assert "doublecircle" in dot and "__start ->" in dot
    assert "digraph" in dot


def test_json_roundtrip(abc):
    g = compile_graph(parse("p U (q & X r)", abc), alphabet=abc)
    data = json.loads(export(g, "json"))
    assert data["version"] == 1
    assert from_json(data, abc) == g


def test_json_roundtrip_fresh_alphabet(abc):
    g = compile_graph(parse("q U r", abc), alphabet=abc)
    g2 = from_json(to_json(g))
    assert to_json(g2) == to_json(g)


def test_single_state_export():
    g = compile_graph(TRUE)
    data = to_json(g)
    assert len(data["states"]) == 1
    assert data["edges"] == [{"src": 0, "dst": 0, "guard": "true"}]


def test_export_bad_format(abc):
    with pytest.raises(ValueError):
        export(compile_graph(parse("p", abc)), "png")


def test_from_json_rejects_bad_version(abc):
    data = to_json(compile_graph(parse("p", abc), alphabet=abc))
    data["version"] = 2
    with pytest.raises(ValueError):
        from_json(data)
