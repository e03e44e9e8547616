"""Formula-to-DFA compilation by progression, minimization and edge compaction."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ltl import (
    FALSE,
    NONEMPTY,
    TRUE,
    Alphabet,
    AlphabetMismatch,
    And,
    Atom,
    Formula,
    Not,
    Or,
    Trace,
    accepts_empty,
    canonicalize,
    format_formula,
    is_propositional,
    parse,
)

JSON_VERSION = 1
DEFAULT_MAX_STATES = 10_000


class CompileError(RuntimeError):
    """Raised when exploration exceeds the state budget."""


@dataclass(frozen=True)
class Dfa:
    """Complete deterministic automaton over ``symbols`` (subsets of ``props``)."""

    props: tuple[int, ...]
    symbols: tuple[frozenset, ...]
    delta: np.ndarray  # (n_states, n_symbols) successor table
    initial: int
    accepting: frozenset
    residuals: tuple[Formula, ...] = ()
    alphabet: Alphabet | None = field(default=None, compare=False)

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    def symbol_index(self) -> dict[frozenset, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def is_accepting(self, q: int) -> bool:
        return q in self.accepting


def all_symbols(props: Sequence[int]) -> tuple[frozenset, ...]:
    """Every subset of ``props``; symbol ``i`` holds ``props[j]`` iff bit ``j`` of ``i`` is set."""
    k = len(props)
    return tuple(frozenset(props[j] for j in range(k) if (i >> j) & 1) for i in range(1 << k))


def one_hot_symbols(props: Sequence[int]) -> tuple[frozenset, ...]:
    """At most one proposition true per step: the empty symbol plus singletons."""
    return (frozenset(),) + tuple(frozenset([p]) for p in props)


class _Bdd:
    """Minimal reduced ordered BDD manager; node 0 is false, node 1 is true."""

    def __init__(self):
        self.nodes: list[tuple[int, int, int]] = [(-1, 0, 0), (-1, 1, 1)]
        self.unique: dict[tuple[int, int, int], int] = {}
        self.ite_memo: dict[tuple[int, int, int], int] = {}

    def mk(self, v: int, lo: int, hi: int) -> int:
        if lo == hi:
            return lo
        key = (v, lo, hi)
        n = self.unique.get(key)
        if n is None:
            n = len(self.nodes)
            self.nodes.append(key)
            self.unique[key] = n
        return n

    def var(self, v: int) -> int:
        return self.mk(v, 0, 1)

    def _top(self, f: int) -> int:
        v = self.nodes[f][0]
        return v if v >= 0 else 1 << 30

    def _cof(self, f: int, v: int, branch: int) -> int:
        fv, lo, hi = self.nodes[f]
        if fv != v:
            return f
        return hi if branch else lo

    def ite(self, f: int, g: int, h: int) -> int:
        if f == 1:
            return g
        if f == 0:
            return h
        if g == h:
            return g
        if g == 1 and h == 0:
            return f
        key = (f, g, h)
        r = self.ite_memo.get(key)
        if r is not None:
            return r
        v = min(self._top(f), self._top(g), self._top(h))
        hi = self.ite(self._cof(f, v, 1), self._cof(g, v, 1), self._cof(h, v, 1))
        lo = self.ite(self._cof(f, v, 0), self._cof(g, v, 0), self._cof(h, v, 0))
        r = self.mk(v, lo, hi)
        self.ite_memo[key] = r
        return r

    def neg(self, f: int) -> int:
        return self.ite(f, 0, 1)

    def conj(self, f: int, g: int) -> int:
        return self.ite(f, g, 0)

    def disj(self, f: int, g: int) -> int:
        return self.ite(f, 1, g)

    def compose(self, f: int, subst: Sequence[int], memo: dict) -> int:
        if f < 2:
            return f
        r = memo.get(f)
        if r is not None:
            return r
        v, lo, hi = self.nodes[f]
        r = self.ite(subst[v], self.compose(hi, subst, memo), self.compose(lo, subst, memo))
        memo[f] = r
        return r

    def evaluate(self, f: int, values: Sequence[bool]) -> bool:
        while f >= 2:
            v, lo, hi = self.nodes[f]
            f = hi if values[v] else lo
        return f == 1

    def to_formula(self, f: int, leaves: Sequence[Formula], memo: dict) -> Formula:
        if f < 2:
            return TRUE if f == 1 else FALSE
        r = memo.get(f)
        if r is not None:
            return r
        v, lo, hi = self.nodes[f]
        x = leaves[v]
        fh = self.to_formula(hi, leaves, memo)
        fl = self.to_formula(lo, leaves, memo)
        pos = x if fh.op == "true" else And(x, fh)
        neg = Not(x) if fl.op == "true" else And(Not(x), fl)
        if fh.op == "false":
            r = neg
        elif fl.op == "false":
            r = pos
        else:
            r = Or(pos, neg)
        memo[f] = r
        return r


def temporal_closure(f: Formula) -> list[Formula]:
    """``f``, its Until subformulas and Next arguments (plus ``NONEMPTY`` if any Next occurs)."""
    found: set[Formula] = set()
    stack = [f]
    while stack:
        g = stack.pop()
        if g.op == "until":
            found.add(g)
        elif g.op == "next":
            found.add(g.args[0])
            found.add(NONEMPTY)
        stack.extend(g.children)
    found.discard(f)
    return [f] + sorted(found)


def compile_formula(
    f: Formula,
    alphabet: Alphabet | None = None,
    props: Sequence[int] | None = None,
    symbols: Sequence[frozenset] | None = None,
    max_states: int = DEFAULT_MAX_STATES,
) -> Dfa:
    """Worklist exploration of the residuals of ``f`` under progression.

    A residual is a Boolean function of the formulas in the temporal closure
    (each one read as "holds on the rest of the trace"), kept as a reduced
    ordered BDD, so equal residuals are detected exactly and the state space
    is finite. Accepting residuals are those true on the empty continuation.
    """
    start = canonicalize(f)
    if props is None:
        props = tuple(sorted(start.props()))
    props = tuple(props)
    missing = start.props() - set(props)
    if missing:
        raise AlphabetMismatch(f"formula mentions propositions {sorted(missing)} outside the DFA alphabet")
    if alphabet is not None and any(p not in alphabet for p in props):
        raise AlphabetMismatch("alphabet does not cover the formula's propositions")
    symbols = all_symbols(props) if symbols is None else tuple(frozenset(s) for s in symbols)

    leaves = temporal_closure(start)
    leaf_index = {g: i for i, g in enumerate(leaves)}
    bdd = _Bdd()
    empty_values = [accepts_empty(g) for g in leaves]

    def prog(g: Formula, s: frozenset, memo: dict) -> int:
        r = memo.get(g)
        if r is not None:
            return r
        op = g.op
        if op == "true":
            r = 1
        elif op == "false":
            r = 0
        elif op == "atom":
            r = 1 if g.args[0] in s else 0
        elif op == "not":
            r = bdd.neg(prog(g.args[0], s, memo))
        elif op == "and":
            r = 1
            for c in g.args:
                r = bdd.conj(r, prog(c, s, memo))
        elif op == "or":
            r = 0
            for c in g.args:
                r = bdd.disj(r, prog(c, s, memo))
        elif op == "next":
            r = bdd.conj(bdd.var(leaf_index[g.args[0]]), bdd.var(leaf_index[NONEMPTY]))
        else:
            a, b = g.args
            r = bdd.disj(prog(b, s, memo), bdd.conj(prog(a, s, memo), bdd.var(leaf_index[g])))
        memo[g] = r
        return r

    # successor function of every basis formula, per symbol
    substs = []
    for s in symbols:
        memo: dict = {}
        substs.append([prog(g, s, memo) for g in leaves])

    init = {"true": 1, "false": 0}.get(start.op, bdd.var(0))
    index = {init: 0}
    states = [init]
    rows: list[list[int]] = []
    queue = deque([init])
    while queue:
        node = queue.popleft()
        row = []
        for sub in substs:
            nxt = bdd.compose(node, sub, {})
            j = index.get(nxt)
            if j is None:
                if len(states) >= max_states:
                    raise CompileError(f"state budget of {max_states} exceeded")
                j = len(states)
                index[nxt] = j
                states.append(nxt)
                queue.append(nxt)
            row.append(j)
        rows.append(row)
    delta = np.array(rows, dtype=np.int64).reshape(len(states), len(symbols))
    accepting = frozenset(i for i, node in enumerate(states) if bdd.evaluate(node, empty_values))
    fmemo: dict = {}
    residuals = tuple(canonicalize(bdd.to_formula(node, leaves, fmemo)) for node in states)
    return Dfa(props, symbols, delta, 0, accepting, residuals, alphabet)


compile = compile_formula  # noqa: A001  (public name used by the CLI and docs)


def _reachable_bfs(delta: np.ndarray, initial: int) -> list[int]:
    order = [initial]
    seen = {initial}
    i = 0
    while i < len(order):
        q = order[i]
        i += 1
        for t in delta[q]:
            t = int(t)
            if t not in seen:
                seen.add(t)
                order.append(t)
    return order


def prune(a: Dfa) -> Dfa:
    """Drop unreachable states and renumber in BFS order from the initial state."""
    order = _reachable_bfs(a.delta, a.initial)
    remap = {q: i for i, q in enumerate(order)}
    delta = np.array([[remap[int(t)] for t in a.delta[q]] for q in order], dtype=np.int64)
    delta = delta.reshape(len(order), len(a.symbols))
    acc = frozenset(remap[q] for q in a.accepting if q in remap)
    res = tuple(a.residuals[q] for q in order) if a.residuals else ()
    return Dfa(a.props, a.symbols, delta, 0, acc, res, a.alphabet)


def minimize(a: Dfa) -> Dfa:
    """Moore partition refinement, then BFS renumbering (isomorphic inputs give equal outputs)."""
    a = prune(a)
    n = a.n_states
    block = np.array([1 if q in a.accepting else 0 for q in range(n)], dtype=np.int64)
    _, block = np.unique(block, return_inverse=True)
    n_blocks = int(block.max()) + 1
    while True:
        sig = np.column_stack([block, block[a.delta]])
        _, new_block = np.unique(sig, axis=0, return_inverse=True)
        new_block = new_block.reshape(-1)
        new_n = int(new_block.max()) + 1
        block = new_block
        if new_n == n_blocks:
            break
        n_blocks = new_n
    rep: dict[int, int] = {}
    for q in range(n):
        b = int(block[q])
        if b not in rep or (a.residuals and a.residuals[q] < a.residuals[rep[b]]):
            rep[b] = q
    delta = np.array([[int(block[t]) for t in a.delta[rep[b]]] for b in range(n_blocks)], dtype=np.int64)
    delta = delta.reshape(n_blocks, len(a.symbols))
    acc = frozenset(int(block[q]) for q in a.accepting)
    res = tuple(a.residuals[rep[b]] for b in range(n_blocks)) if a.residuals else ()
    quotient = Dfa(a.props, a.symbols, delta, int(block[a.initial]), acc, res, a.alphabet)
    return prune(quotient)


def run(a: Dfa, w: Trace | Sequence[frozenset]) -> bool:
    """Execute the automaton on ``w``; true iff the last state is accepting."""
    steps = w.steps if isinstance(w, Trace) else w
    if isinstance(w, Trace):
        n = len(w.alphabet)
        if any(p >= n for p in a.props):
            raise AlphabetMismatch("trace alphabet does not cover the automaton's propositions")
    lookup = a.symbol_index()
    pset = frozenset(a.props)
    q = a.initial
    for s in steps:
        j = lookup.get(frozenset(s) & pset)
        if j is None:
            raise AlphabetMismatch(f"symbol {sorted(s)} is outside the automaton's symbol set")
        q = int(a.delta[q, j])
    return q in a.accepting


def is_trivial_within(a: Dfa, max_len: int) -> bool:
    """True if every trace of length 1..max_len gets the same verdict."""
    frontier = {a.initial}
    seen_acc = seen_rej = False
    for _ in range(max_len):
        frontier = {int(t) for q in frontier for t in a.delta[q]}
        for q in frontier:
            if q in a.accepting:
                seen_acc = True
            else:
                seen_rej = True
        if seen_acc and seen_rej:
            return False
    return True


def trap_states(a: Dfa) -> frozenset:
    """Non-accepting states whose every transition is a self-loop."""
    return frozenset(
        q for q in range(a.n_states) if q not in a.accepting and bool(np.all(a.delta[q] == q))
    )


# ---------------------------------------------------------------------------
# guard compaction

Cube = tuple[int, int]  # (care mask, value mask) over proposition positions


def _prime_implicants(on: set[int], dc: set[int], n: int) -> list[Cube]:
    full = (1 << n) - 1
    current = {(full, m) for m in on | dc}
    primes: set[Cube] = set()
    while current:
        merged: set[Cube] = set()
        nxt: set[Cube] = set()
        by_care: dict[int, list[int]] = {}
        for care, val in current:
            by_care.setdefault(care, []).append(val)
        for care, vals in by_care.items():
            vs = set(vals)
            for v in vals:
                bit = 1
                while bit <= care:
                    if care & bit and not v & bit:
                        u = v | bit
                        if u in vs:
                            nxt.add((care & ~bit, v))
                            merged.add((care, v))
                            merged.add((care, u))
                    bit <<= 1
        primes.update(current - merged)
        current = nxt
    return sorted(primes)


def _covers(c: Cube, m: int) -> bool:
    care, val = c
    return (m & care) == val


def merge_cubes(on: Iterable[int], n: int, dc: Iterable[int] = ()) -> list[Cube]:
    """Two-level cover of the minterms ``on`` by merged cubes (don't-cares in ``dc``)."""
    on = set(on)
    if not on:
        return []
    primes = _prime_implicants(on, set(dc), n)
    uncovered = set(on)
    chosen: list[Cube] = []
    while uncovered:
        best = max(
            primes,
            key=lambda c: (sum(1 for m in uncovered if _covers(c, m)), -bin(c[0]).count("1"), [-x for x in c]),
        )
        chosen.append(best)
        uncovered = {m for m in uncovered if not _covers(best, m)}
    return sorted(chosen)


def _cube_formula(c: Cube, props: Sequence[int]) -> Formula:
    care, val = c
    lits = []
    for j, p in enumerate(props):
        if care >> j & 1:
            lits.append(Atom(p) if val >> j & 1 else Not(Atom(p)))
    return And(*lits) if lits else TRUE


def _clause_formula(c: Cube, props: Sequence[int]) -> Formula:
    # negation of a cube as a disjunction of literals
    care, val = c
    lits = []
    for j, p in enumerate(props):
        if care >> j & 1:
            lits.append(Not(Atom(p)) if val >> j & 1 else Atom(p))
    return Or(*lits) if lits else FALSE


def _minterm(s: frozenset, props: Sequence[int]) -> int:
    return sum(1 << j for j, p in enumerate(props) if p in s)


def _is_one_hot(symbols: Sequence[frozenset], props: Sequence[int]) -> bool:
    return set(symbols) == set(one_hot_symbols(props)) and len(props) > 1


def guard_for(symbols: Iterable[frozenset], dfa: Dfa, form: str = "dnf", others: Iterable[frozenset] = ()) -> Formula:
    """Propositional guard true exactly on ``symbols`` within the DFA's symbol set."""
    props = dfa.props
    n = len(props)
    symbols = list(symbols)
    if _is_one_hot(dfa.symbols, props) and form == "dnf":
        chosen = {next(iter(s)) for s in symbols if s}
        if frozenset() in symbols:
            lits = [Not(Atom(p)) for p in props if p not in chosen]
            return And(*lits) if lits else TRUE
        return Or(*[Atom(p) for p in props if p in chosen])
    universe = {_minterm(s, props) for s in dfa.symbols}
    dc = set(range(1 << n)) - universe if len(universe) < (1 << n) else set()
    if form == "dnf":
        cubes = merge_cubes({_minterm(s, props) for s in symbols}, n, dc)
        return Or(*[_cube_formula(c, props) for c in cubes])
    if form == "cnf":
        off = {_minterm(s, props) for s in others}
        if not off:
            return TRUE
        cubes = merge_cubes(off, n, dc)
        return And(*[_clause_formula(c, props) for c in cubes])
    raise ValueError(f"unknown guard form {form!r}")


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    guard: Formula


@dataclass(frozen=True)
class LabeledDfaGraph:
    """DFA as a directed graph with one propositional guard per ordered state pair."""

    props: tuple[int, ...]
    n_states: int
    initial: int
    accepting: frozenset
    edges: tuple[Edge, ...]
    alphabet: Alphabet | None = field(default=None, compare=False)

    def role(self, q: int) -> tuple[bool, bool]:
        return q == self.initial, q in self.accepting

    def traps(self) -> frozenset:
        out = {}
        for e in self.edges:
            out.setdefault(e.src, set()).add(e.dst)
        return frozenset(q for q, d in out.items() if d == {q} and q not in self.accepting)

    def guards(self) -> list[Formula]:
        return [e.guard for e in self.edges]


def compact_edges(a: Dfa, form: str = "dnf", drop_trap: bool = False) -> LabeledDfaGraph:
    """Merge parallel symbol transitions into one guarded edge per state pair."""
    traps = trap_states(a) if drop_trap else frozenset()
    keep = [q for q in range(a.n_states) if q not in traps or q == a.initial]
    remap = {q: i for i, q in enumerate(keep)}
    edges = []
    for q in keep:
        groups: dict[int, list[frozenset]] = {}
        for j, t in enumerate(a.delta[q]):
            groups.setdefault(int(t), []).append(a.symbols[j])
        for t in sorted(groups):
            if t not in remap:
                continue
            others = [s for u, ss in groups.items() if u != t for s in ss]
            guard = guard_for(groups[t], a, form, others)
            edges.append(Edge(remap[q], remap[t], guard))
    acc = frozenset(remap[q] for q in a.accepting if q in remap)
    return LabeledDfaGraph(a.props, len(keep), remap[a.initial], acc, tuple(edges), a.alphabet)


def eval_guard(guard: Formula, symbol: frozenset) -> bool:
    op = guard.op
    if op == "true":
        return True
    if op == "false":
        return False
    if op == "atom":
        return guard.prop in symbol
    if op == "not":
        return not eval_guard(guard.args[0], symbol)
    if op == "and":
        return all(eval_guard(c, symbol) for c in guard.args)
    if op == "or":
        return any(eval_guard(c, symbol) for c in guard.args)
    raise ValueError("temporal operator inside a guard")


def compile_graph(
    f: Formula,
    alphabet: Alphabet | None = None,
    props: Sequence[int] | None = None,
    symbols: Sequence[frozenset] | None = None,
    minimized: bool = True,
    form: str = "dnf",
    max_states: int = DEFAULT_MAX_STATES,
) -> LabeledDfaGraph:
    """compile -> (minimize) -> compact_edges in one call."""
    a = compile_formula(f, alphabet, props, symbols, max_states)
    if minimized:
        a = minimize(a)
    return compact_edges(a, form)


# ---------------------------------------------------------------------------
# export


def _names(g: LabeledDfaGraph) -> list[str]:
    if g.alphabet is not None:
        return [g.alphabet.name(p) for p in g.props]
    return [f"p{p}" for p in g.props]


def to_json(g: LabeledDfaGraph) -> dict:
    alpha = g.alphabet
    return {
        "version": JSON_VERSION,
        "propositions": _names(g),
        "states": [
            {"id": q, "initial": q == g.initial, "accepting": q in g.accepting} for q in range(g.n_states)
        ],
        "edges": [{"src": e.src, "dst": e.dst, "guard": format_formula(e.guard, alpha)} for e in g.edges],
    }


def from_json(data: dict, alphabet: Alphabet | None = None) -> LabeledDfaGraph:
    if data.get("version") != JSON_VERSION:
        raise ValueError(f"unsupported DFA JSON version {data.get('version')!r}")
    alphabet = Alphabet() if alphabet is None else alphabet
    props = tuple(alphabet.intern(n) for n in data["propositions"])
    states = data["states"]
    initial = [s["id"] for s in states if s["initial"]]
    if len(initial) != 1:
        raise ValueError("exactly one initial state required")
    acc = frozenset(s["id"] for s in states if s["accepting"])
    edges = []
    for e in data["edges"]:
        guard = parse(e["guard"], alphabet)
        if not is_propositional(guard):
            raise ValueError("edge guard contains temporal operators")
        edges.append(Edge(int(e["src"]), int(e["dst"]), guard))
    return LabeledDfaGraph(props, len(states), initial[0], acc, tuple(edges), alphabet)


def to_dot(g: LabeledDfaGraph) -> str:
    alpha = g.alphabet
    lines = ["digraph dfa {", "  rankdir=LR;", '  __start [shape=point, label=""];']
    for q in range(g.n_states):
        shape = "doublecircle" if q in g.accepting else "circle"
        lines.append(f'  {q} [shape={shape}, label="{q}"];')
    lines.append(f"  __start -> {g.initial};")
    for e in g.edges:
        label = format_formula(e.guard, alpha).replace('"', '\\"')
        lines.append(f'  {e.src} -> {e.dst} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export(g: LabeledDfaGraph, fmt: str) -> bytes:
    if fmt == "dot":
        return to_dot(g).encode()
    if fmt == "json":
        return (json.dumps(to_json(g), indent=2, sort_keys=True) + "\n").encode()
    raise ValueError(f"unsupported export format {fmt!r}")
