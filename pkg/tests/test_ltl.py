import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tleaf.ltl import (
    FALSE,
    TRUE,
    Alphabet,
    And,
    Atom,
    ComplexityParams,
    LtlSyntaxError,
    NONEMPTY,
    Next,
    Not,
    Or,
    PRESETS,
    Trace,
    Until,
    accepts_empty,
    canonicalize,
    check,
    check_steps,
    format_formula,
    parse,
    parse_lines,
    progress,
    random_formula,
)

from conftest import all_traces, formulas, mk_trace, trace_strategy


def test_parse_until(abc):
    assert parse("p U q", abc) == Until(Atom(0), Atom(1))


def test_parse_always_desugars(abc):
    assert parse("G p", abc) == Not(Until(TRUE, Not(Atom(0))))


def test_parse_eventually_and_implication(abc):
    assert parse("F q", abc) == Until(TRUE, Atom(1))
    assert parse("p -> q", abc) == Or(Not(Atom(0)), Atom(1))


def test_until_is_infix():
    with pytest.raises(LtlSyntaxError):
        parse("U p", Alphabet())


def test_precedence(abc):
    # U binds tighter than &, & tighter than |, | tighter than ->
    f = parse("p U q & r | p -> q", abc)
    p, q, r = Atom(0), Atom(1), Atom(2)
    assert f == Or(Not(Or(And(Until(p, q), r), p)), q)
    assert parse("p U q U r", abc) == Until(p, Until(q, r))
    assert parse("p -> q -> r", abc) == Or(Not(p), Or(Not(q), r))
    assert parse("!X p", abc) == Not(Next(p))


def test_syntax_error_position():
    with pytest.raises(LtlSyntaxError) as exc:
        parse("p &\n  & q", Alphabet())
    assert exc.value.line == 2 and exc.value.col == 3


@pytest.mark.parametrize("text", ["p q", "(p", "p &", "Foo", "p $ q", ""])
def test_syntax_errors(text):
    with pytest.raises(LtlSyntaxError):
        parse(text, Alphabet())


def test_reserved_names_rejected():
    with pytest.raises(ValueError):
        Alphabet(["true"])
    with pytest.raises(ValueError):
        Alphabet(["X"])


def test_parse_interns_new_atoms():
    a = Alphabet(["q"])
    parse("p & q", a)
    assert a.names == ("q", "p")


def test_batch_lines():
    a = Alphabet()
    fs = parse_lines("# header\np U q\n\nG r  # trailing\n", a)
    assert len(fs) == 2
    with pytest.raises(LtlSyntaxError) as exc:
        parse_lines("p\np &", a)
    assert exc.value.line == 2


def test_canonicalize_examples():
    p, q = Atom(0), Atom(1)
    assert canonicalize(And(p, And(q, p))) == And(p, q)
    assert canonicalize(Or(p, TRUE)) == TRUE
    assert canonicalize(Not(Not(Next(p)))) == Next(p)


def test_canonical_and_is_sorted_and_flat():
    p, q, r = Atom(0), Atom(1), Atom(2)
    c = canonicalize(And(r, And(q, p)))
    assert c.op == "and" and list(c.args) == sorted(c.args) and len(c.args) == 3


@given(formulas())
def test_canonicalize_idempotent(f):
    c = canonicalize(f)
    assert canonicalize(c) == c


@given(formulas(), trace_strategy())
def test_canonicalize_preserves_semantics(f, steps):
    assert check_steps(steps, canonicalize(f)) == check_steps(steps, f)


@given(formulas())
def test_canonical_form_invariants(f):
    c = canonicalize(f)

    def walk(g):
        if g.op in ("and", "or"):
            assert all(ch.op != g.op for ch in g.args)
            assert all(ch.op not in ("true", "false") for ch in g.args)
            assert list(g.args) == sorted(set(g.args))
        if g.op == "not":
            assert g.args[0].op != "not"
        for ch in g.children:
            walk(ch)

    walk(c)


@given(formulas())
def test_print_parse_roundtrip(f):
    alphabet = Alphabet(["p", "q", "r"])
    c = canonicalize(f)
    assert parse(format_formula(c, alphabet), alphabet) == c


def test_check_examples(abc):
    assert check(mk_trace([{"p"}, {"q"}], abc), parse("p U q", abc))
    assert not check(mk_trace([{"p"}], abc), parse("X p", abc))
    assert check(mk_trace([{"p"}, {"p"}, {"p"}], abc), parse("G p", abc))


def test_until_witness_may_be_last_position(abc):
    assert check(mk_trace([{"p"}, {"p"}, {"q"}], abc), parse("p U q", abc))
    assert not check(mk_trace([{"p"}, {"p"}, {"p"}], abc), parse("p U q", abc))


def test_check_alphabet_mismatch():
    small = Alphabet(["p"])
    with pytest.raises(ValueError):
        check(Trace((frozenset({0}),), small), Atom(3))


def test_trace_invariants():
    with pytest.raises(ValueError):
        Trace((), Alphabet(["p"]))
    with pytest.raises(ValueError):
        Trace((frozenset({5}),), Alphabet(["p"]))


def test_progress_examples():
    p, q, a = Atom(0), Atom(1), Atom(2)
    assert progress(p, frozenset({0})) == TRUE
    # X a leaves "a, and the rest is nonempty"
    assert progress(Next(a), frozenset({0})) == And(a, NONEMPTY)
    assert progress(Until(p, q), frozenset({0})) == Until(p, q)


def test_progress_until_witness():
    p, q = Atom(0), Atom(1)
    assert progress(Until(p, q), frozenset({1})) == TRUE
    assert progress(Until(p, q), frozenset()) == FALSE


def test_accepts_empty_examples():
    p, q = Atom(0), Atom(1)
    assert accepts_empty(TRUE)
    assert not accepts_empty(Until(p, q))
    assert accepts_empty(Not(Until(TRUE, Not(p))))


def _coherent(f, steps):
    """check(s::rest, f) against the progressed residual."""
    g = canonicalize(f)
    r = progress(g, steps[0])
    rest = steps[1:]
    expected = check_steps(steps, f)
    if rest:
        return check_steps(rest, r) == expected
    return accepts_empty(r) == expected


@settings(max_examples=300)
@given(formulas(), trace_strategy(max_len=4))
def test_progression_coherence_property(f, steps):
    assert _coherent(f, steps)


def test_progression_coherence_exhaustive():
    rng = np.random.default_rng(11)
    fs = [random_formula(ComplexityParams(n, 6), rng) for n in (1, 2, 3) for _ in range(8)]
    for f in fs:
        for steps in all_traces(3, 4):
            assert _coherent(f, steps), (f, steps)


@given(formulas(), trace_strategy(max_len=5))
def test_multi_step_progression(f, steps):
    # folding progression over the whole trace ends in the verdict
    r = canonicalize(f)
    for s in steps:
        r = progress(r, s)
    assert accepts_empty(r) == check_steps(steps, f)


def test_random_formula_low():
    f = random_formula(ComplexityParams(3, 10), np.random.default_rng(7))
    lo, hi = ComplexityParams(3, 10).size_range()
    assert len(canonicalize(f).props()) == 3
    assert lo <= f.size() <= hi


def test_random_formula_single_atom():
    f = random_formula(ComplexityParams(1, 1), np.random.default_rng(0))
    assert f == Atom(0)


def test_random_formula_high_regime():
    assert PRESETS["high"] == ComplexityParams(6, 20)
    f = random_formula(PRESETS["high"], np.random.default_rng(3))
    assert canonicalize(f).props() == frozenset(range(6))
    assert 16 <= f.size() <= 24


@pytest.mark.parametrize("seed", range(10))
def test_random_formula_nontrivial(seed):
    f = random_formula(ComplexityParams(3, 10), np.random.default_rng(seed))
    verdicts = {check_steps(w, f) for w in all_traces(3, 3)}
    # nontrivial within length 6; most already differ by length 3
    if len(verdicts) == 1:
        verdicts |= {check_steps(w, f) for w in all_traces(3, 6, min_len=4)}
    assert verdicts == {True, False}


def test_random_formula_deterministic():
    a = random_formula(PRESETS["moderate"], np.random.default_rng(5))
    b = random_formula(PRESETS["moderate"], np.random.default_rng(5))
    assert a == b


def test_complexity_params_validation():
    with pytest.raises(ValueError):
        ComplexityParams(0, 3)


def test_weak_negated_next_at_end():
    # !X true holds at the last position; progression must agree
    f = Not(Next(TRUE))
    r = progress(f, frozenset())
    assert accepts_empty(r) is True
    assert check_steps((frozenset(),), f)
