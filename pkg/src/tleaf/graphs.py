"""Feature graphs fed to the graph convolution: DFAs, traces, syntax trees and guards."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .automata import Edge, LabeledDfaGraph
from .ltl import AlphabetMismatch, And, Atom, Formula, Not, Trace, canonicalize, is_propositional

# state / edge-node layout: role bits, then the edge vector slot
META_DIM = 5  # is_initial, is_accepting, is_state, is_edge_node, self_loop
# guard layout: node kind bits plus negation, then the proposition slot
GUARD_DIM = 5  # is_or, is_and, is_lit, is_const, neg
SYNTAX_OPS = ("true", "false", "atom", "not", "and", "or", "next", "until")
SYNTAX_DIM = len(SYNTAX_OPS)

DEFAULT_D_E = 100
DEFAULT_D_P = 32


@dataclass(frozen=True, eq=False)
class FeatureGraph:
    """Directed graph with one feature row per node.

    ``slot`` maps nodes to a row of an external table (edge vectors or
    proposition features, per ``slot_kind``) whose values belong in columns
    ``slot_offset:slot_offset + slot_dim``; -1 marks nodes without one.
    """

    features: np.ndarray
    arcs: np.ndarray
    start: int
    tags: tuple[str, ...]
    slot: np.ndarray
    slot_kind: str | None = None
    slot_offset: int = 0
    slot_dim: int = 0
    family: str = ""
    _digest: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be a matrix")
        if len(self.tags) != n or self.slot.shape != (n,):
            raise ValueError("per-node arrays disagree on node count")
        if not 0 <= self.start < n:
            raise ValueError(f"start node {self.start} out of range")
        arcs = self.arcs.reshape(-1, 2)
        if len({(int(a), int(b)) for a, b in arcs}) != len(arcs):
            raise ValueError("duplicate arcs")
        if arcs.size and (arcs.min() < 0 or arcs.max() >= n):
            raise ValueError("arc endpoint out of range")

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_arcs(self) -> int:
        return self.arcs.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def out_neighbors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.arcs:
            out[int(a)].append(int(b))
        return out

    def filled(self, table: np.ndarray) -> np.ndarray:
        """Features with the slot columns copied from ``table``."""
        x = self.features.copy()
        mask = self.slot >= 0
        if mask.any():
            x[mask, self.slot_offset : self.slot_offset + self.slot_dim] = table[self.slot[mask]]
        return x

    def structure_digest(self) -> bytes:
        """Hash of node count, arcs and start; seeds evaluation-mode random walks."""
        if not self._digest:
            h = hashlib.sha256()
            h.update(np.int64([self.n_nodes, self.start]).tobytes())
            h.update(np.ascontiguousarray(self.arcs, dtype=np.int64).tobytes())
            self._digest.append(h.digest())
        return self._digest[0]

    def to_debug_json(self) -> str:
        return json.dumps(
            {
                "start": self.start,
                "nodes": [{"tag": t, "features": [round(float(v), 6) for v in row]} for t, row in zip(self.tags, self.features)],
                "arcs": self.arcs.tolist(),
            }
        )


def _arcs(pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _vec_lookup(edge_vecs, i: int, d_e: int) -> np.ndarray:
    try:
        v = np.asarray(edge_vecs[i], dtype=np.float32)
    except (KeyError, IndexError):
        raise ValueError(f"no edge vector for edge {i}") from None
    if v.shape != (d_e,):
        raise ValueError(f"edge vector {i} has shape {v.shape}, expected ({d_e},)")
    return v


def dfa_to_feature_graph(
    g: LabeledDfaGraph, edge_vecs: Mapping[int, np.ndarray] | np.ndarray | None, d_e: int = DEFAULT_D_E
) -> FeatureGraph:
    """State nodes plus one edge-node per guarded edge, wired state -> edge-node -> state.

    ``edge_vecs`` is indexed like ``g.edges``; pass ``None`` to leave the slot
    empty for a caller that fills it later.
    """
    ns, ne = g.n_states, len(g.edges)
    x = np.zeros((ns + ne, META_DIM + d_e), dtype=np.float32)
    for q in range(ns):
        x[q, 0] = q == g.initial
        x[q, 1] = q in g.accepting
        x[q, 2] = 1
    arcs = []
    for i, e in enumerate(g.edges):
        v = ns + i
        x[v, 3] = 1
        x[v, 4] = e.src == e.dst
        if edge_vecs is not None:
            x[v, META_DIM:] = _vec_lookup(edge_vecs, i, d_e)
        arcs.append((e.src, v))
        arcs.append((v, e.dst))
    slot = np.concatenate([np.full(ns, -1), np.arange(ne)]).astype(np.int64)
    tags = tuple(["state"] * ns + ["edge"] * ne)
    return FeatureGraph(x, _arcs(arcs), g.initial, tags, slot, "edge", META_DIM, d_e, "dfa")


def trace_cube(step: frozenset, props: Sequence[int]) -> Formula:
    """Closed-world conjunction describing one step over ``props``."""
    return _cube(frozenset(step), tuple(props))


@lru_cache(maxsize=1 << 16)
def _cube(step: frozenset, props: tuple[int, ...]) -> Formula:
    return canonicalize(And(*[Atom(p) if p in step else Not(Atom(p)) for p in props]))


def trace_path_graph(w: Trace | Sequence[frozenset], props: Sequence[int]) -> LabeledDfaGraph:
    """A trace as a chain automaton accepting exactly that trace."""
    steps = w.steps if isinstance(w, Trace) else tuple(frozenset(s) for s in w)
    if not steps:
        raise ValueError("empty trace")
    allowed = set(props)
    for s in steps:
        if not s <= allowed:
            raise AlphabetMismatch(f"trace mentions {sorted(s - allowed)} outside {sorted(allowed)}")
    n = len(steps)
    edges = tuple(Edge(i, i + 1, trace_cube(s, props)) for i, s in enumerate(steps))
    return LabeledDfaGraph(tuple(props), n + 1, 0, frozenset([n]), edges, getattr(w, "alphabet", None))


def trace_to_feature_graph(
    w: Trace | Sequence[frozenset],
    props: Sequence[int],
    edge_embedder: Callable[[list[Formula]], np.ndarray] | None = None,
    d_e: int = DEFAULT_D_E,
) -> FeatureGraph:
    """Linear graph of ``len(w) + 1`` timestep nodes with one cube edge-node per step."""
    path = trace_path_graph(w, props)
    vecs = None if edge_embedder is None else edge_embedder(path.guards())
    fg = dfa_to_feature_graph(path, vecs, d_e)
    tags = tuple("timestep" if t == "state" else t for t in fg.tags)
    return FeatureGraph(fg.features, fg.arcs, fg.start, tags, fg.slot, fg.slot_kind, fg.slot_offset, fg.slot_dim, "trace")


def _binarize(f: Formula) -> Formula:
    if f.op in ("and", "or") and len(f.args) > 2:
        acc = Formula(f.op, (_binarize(f.args[0]), _binarize(f.args[1])))
        for c in f.args[2:]:
            acc = Formula(f.op, (acc, _binarize(c)))
        return acc
    if not f.args or f.op == "atom":
        return f
    return Formula(f.op, tuple(_binarize(c) for c in f.args))


def syntax_tree_graph(f: Formula, prop_features: np.ndarray | None = None, d_p: int = DEFAULT_D_P) -> FeatureGraph:
    """One node per operator or atom, arcs both ways between parent and child."""
    root = _binarize(f)
    rows, slot, tags, arcs = [], [], [], []

    def visit(g: Formula) -> int:
        i = len(rows)
        onehot = np.zeros(SYNTAX_DIM + d_p, dtype=np.float32)
        onehot[SYNTAX_OPS.index(g.op)] = 1
        rows.append(onehot)
        slot.append(g.prop if g.op == "atom" else -1)
        tags.append("literal" if g.op == "atom" else "operator")
        if g.op != "atom":
            for c in g.args:
                j = visit(c)
                arcs.append((i, j))
                arcs.append((j, i))
        return i

    visit(root)
    fg = FeatureGraph(
        np.stack(rows), _arcs(arcs), 0, tuple(tags), np.asarray(slot, dtype=np.int64), "prop", SYNTAX_DIM, d_p, "syntax"
    )
    if prop_features is not None:
        fg = _with_features(fg, fg.filled(np.asarray(prop_features, dtype=np.float32)))
    return fg


def _nnf(f: Formula, neg: bool = False) -> Formula:
    op = f.op
    if op == "not":
        return _nnf(f.args[0], not neg)
    if op in ("true", "false"):
        return Formula("false" if (op == "true") == neg else "true")
    if op == "atom":
        return Not(f) if neg else f
    if op in ("and", "or"):
        flip = {"and": "or", "or": "and"}[op] if neg else op
        return Formula(flip, tuple(_nnf(c, neg) for c in f.args))
    raise ValueError(f"temporal operator {op!r} inside a guard")


def guard_graph(guard: Formula, prop_features: np.ndarray | None = None, d_p: int = DEFAULT_D_P) -> FeatureGraph:
    """Or/And tree over literal leaves; a literal carries its proposition and a negation bit."""
    if not is_propositional(guard):
        raise ValueError("temporal operator inside a guard")
    root = canonicalize(_nnf(canonicalize(guard)))
    rows, slot, tags, arcs = [], [], [], []

    def visit(g: Formula) -> int:
        i = len(rows)
        r = np.zeros(GUARD_DIM + d_p, dtype=np.float32)
        rows.append(r)
        if g.op in ("or", "and"):
            r[0 if g.op == "or" else 1] = 1
            slot.append(-1)
            tags.append("operator")
            for c in g.args:
                j = visit(c)
                arcs.append((i, j))
                arcs.append((j, i))
        elif g.op in ("true", "false"):
            r[3] = 1
            r[4] = g.op == "false"
            slot.append(-1)
            tags.append("literal")
        else:
            neg = g.op == "not"
            r[2] = 1
            r[4] = neg
            slot.append((g.args[0] if neg else g).prop)
            tags.append("literal")
        return i

    visit(root)
    fg = FeatureGraph(
        np.stack(rows), _arcs(arcs), 0, tuple(tags), np.asarray(slot, dtype=np.int64), "prop", GUARD_DIM, d_p, "guard"
    )
    if prop_features is not None:
        fg = _with_features(fg, fg.filled(np.asarray(prop_features, dtype=np.float32)))
    return fg


def _with_features(fg: FeatureGraph, x: np.ndarray) -> FeatureGraph:
    return FeatureGraph(x, fg.arcs, fg.start, fg.tags, fg.slot, fg.slot_kind, fg.slot_offset, fg.slot_dim, fg.family)
