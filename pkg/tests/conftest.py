import itertools

import numpy as np
import pytest
from hypothesis import strategies as st

from tleaf import nn
from tleaf.ltl import FALSE, TRUE, Alphabet, And, Atom, Next, Not, Or, Trace, Until

nn.keep_heap_warm()


def formulas(n_props=3, max_leaves=8):
    leaves = st.one_of(st.sampled_from([TRUE, FALSE]), st.integers(0, n_props - 1).map(Atom))

    def extend(children):
        return st.one_of(
            children.map(Not),
            children.map(Next),
            st.lists(children, min_size=2, max_size=3).map(lambda xs: And(*xs)),
            st.lists(children, min_size=2, max_size=3).map(lambda xs: Or(*xs)),
            st.tuples(children, children).map(lambda ab: Until(*ab)),
        )

    return st.recursive(leaves, extend, max_leaves=max_leaves)


def symbols(n_props):
    return [frozenset(p for p in range(n_props) if m >> p & 1) for m in range(1 << n_props)]


def all_traces(n_props, max_len, min_len=1):
    syms = symbols(n_props)
    for n in range(min_len, max_len + 1):
        yield from itertools.product(syms, repeat=n)


def trace_strategy(n_props=3, max_len=5):
    sym = st.frozensets(st.integers(0, n_props - 1))
    return st.lists(sym, min_size=1, max_size=max_len).map(tuple)


@pytest.fixture
def abc():
    return Alphabet(["p", "q", "r"])


def mk_trace(steps, alphabet):
    return Trace.from_names(steps, alphabet)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
