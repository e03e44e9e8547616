"""Hierarchical embedder: guard embedder q_e, meta embedder q_m, triplet training, logic loss."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import nn
from .automata import LabeledDfaGraph, all_symbols, compact_edges, compile_formula, eval_guard, minimize, one_hot_symbols
from .graphs import (
    GUARD_DIM,
    META_DIM,
    SYNTAX_DIM,
    FeatureGraph,
    dfa_to_feature_graph,
    guard_graph,
    syntax_tree_graph,
    trace_cube,
    trace_path_graph,
)
from .ltl import And, Atom, Formula, Trace, canonicalize, is_propositional
from .nn import Tensor


@dataclass
class EmbedderConfig:
    n_props: int
    d_p: int = 32
    d_e: int = 100
    d_z: int = 200
    qe_hidden: tuple[int, ...] = (256,)
    qm_hidden: tuple[int, ...] = (100, 100, 100)
    walks: int = 16
    walk_len: int = 4
    readout: str = "walk"  # or "mean"
    seed: int = 0
    # optional factorization of proposition features: one index column per factor
    prop_factor_sizes: tuple[int, ...] = ()
    prop_factor_index: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.readout not in ("walk", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.prop_factor_sizes and self.d_p % len(self.prop_factor_sizes):
            raise ValueError("d_p must split evenly across proposition factors")

    @property
    def qm_in(self) -> int:
        return META_DIM + self.d_e + SYNTAX_DIM + self.d_p


@dataclass
class TrainConfig:
    margin: float = 1.0
    lr: float = 3e-3
    batch_size: int = 50
    stage1_steps: int = 200
    stage2_steps: int = 1800
    negatives: int = 4
    seed: int = 0
    eval_every: int = 100
    representation: str = "dfa"  # or "syntax_tree"
    printed_sign: bool = False  # swap positive/negative, as the loss is sometimes printed
    stage1_objective: str = "guards"  # or "bags"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.stage1_objective not in ("guards", "bags"):
            raise ValueError(f"unknown stage-1 objective {self.stage1_objective!r}")
        if self.representation not in ("dfa", "syntax_tree"):
            raise ValueError(f"unknown representation {self.representation!r}")


@dataclass
class SoftTrace:
    """Per-step truth probabilities over ``props``; shape (steps, len(props))."""

    probs: np.ndarray
    props: tuple[int, ...]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[1] != len(self.props) or self.probs.shape[0] == 0:
            raise ValueError("probs must be (steps, len(props)) with at least one step")


@dataclass
class Example:
    """One formula with labeled traces; steps are frozensets of proposition ids."""

    formula: Formula
    props: tuple[int, ...]
    sat: list[tuple[frozenset, ...]]
    unsat: list[tuple[frozenset, ...]]
    one_hot: bool = False


class EmbedderModel:
    def __init__(self, cfg: EmbedderConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        if cfg.prop_factor_sizes:
            d = cfg.d_p // len(cfg.prop_factor_sizes)
            self.prop_tables = [Tensor(rng.normal(0, 1, (n, d)).astype(np.float32), requires_grad=True) for n in cfg.prop_factor_sizes]
            self._factor_index = np.asarray(cfg.prop_factor_index, dtype=np.int64).reshape(cfg.n_props, -1)
        else:
            self.prop_tables = [Tensor(rng.normal(0, 1, (cfg.n_props, cfg.d_p)).astype(np.float32), requires_grad=True)]
            self._factor_index = np.arange(cfg.n_props, dtype=np.int64).reshape(-1, 1)
        self.qe = nn.GcnParams.init([GUARD_DIM + cfg.d_p, *cfg.qe_hidden, cfg.d_e], rng)
        self.qm = nn.GcnParams.init([cfg.qm_in, *cfg.qm_hidden, cfg.d_z], rng)
        self._structs: dict = {}
        self._guard_vecs: dict[Formula, np.ndarray] = {}
        self._inputs: dict = {}

    # parameters

    def prop_named(self) -> dict[str, Tensor]:
        return {f"prop.f{i}": t for i, t in enumerate(self.prop_tables)}

    def stage1_params(self) -> dict[str, Tensor]:
        return {**self.prop_named(), **self.qe.named("qe")}

    def stage2_params(self) -> dict[str, Tensor]:
        return self.qm.named("qm")

    def params(self) -> dict[str, Tensor]:
        return {**self.stage1_params(), **self.stage2_params()}

    def invalidate(self) -> None:
        """Drop cached guard vectors and node inputs after q_e or proposition features change."""
        self._guard_vecs.clear()
        self._inputs.clear()

    def prop_features(self) -> Tensor:
        cols = [nn.take(t, self._factor_index[:, i]) for i, t in enumerate(self.prop_tables)]
        return cols[0] if len(cols) == 1 else nn.concat(cols, axis=1)

    # structure cache

    def _struct(self, key, build) -> "_Struct":
        s = self._structs.get(key)
        if s is None:
            s = _Struct(build())
            self._structs[key] = s
        return s

    def guard_struct(self, guard: Formula) -> "_Struct":
        return self._struct(("guard", guard), lambda: guard_graph(guard, d_p=self.cfg.d_p))

    def item_struct(self, item) -> "_Struct":
        kind = item[0]
        if kind == "dfa":
            return self._struct(item, lambda: dfa_to_feature_graph(item[1], None, self.cfg.d_e))
        if kind == "trace":
            return self._struct(item, lambda: dfa_to_feature_graph(_path_graph(item[1], item[2]), None, self.cfg.d_e))
        if kind == "syntax":
            return self._struct(item, lambda: syntax_tree_graph(item[1], d_p=self.cfg.d_p))
        raise ValueError(f"unknown item kind {kind!r}")

    # q_e

    def embed_guards(self, guards: Sequence[Formula]) -> Tensor:
        """Mean-readout q_e embeddings, one row per guard, recorded for backprop."""
        structs = [self.guard_struct(g) for g in guards]
        adj, x_const, offsets = _block(structs)
        n = x_const.shape[0]
        sel_rows, sel_cols = [], []
        for s, off in zip(structs, offsets):
            m = s.graph.slot >= 0
            sel_rows.append(np.nonzero(m)[0] + off)
            sel_cols.append(s.graph.slot[m])
        r = np.concatenate(sel_rows) if sel_rows else np.zeros(0, np.int64)
        c = np.concatenate(sel_cols) if sel_cols else np.zeros(0, np.int64)
        sel = sp.csr_matrix((np.ones(len(r), np.float32), (r, c)), shape=(n, self.cfg.n_props))
        x = nn.concat([Tensor(x_const[:, :GUARD_DIM]), nn.spmm(sel, self.prop_features())], axis=1)
        h = nn.gcn_layers(adj, x, self.qe)
        return nn.spmm(_mean_pool(structs, offsets), h)

    def guard_vectors(self, guards: Iterable[Formula]) -> np.ndarray:
        guards = list(guards)
        todo = sorted({g for g in guards if g not in self._guard_vecs})
        if todo:
            vecs = self.embed_guards(todo).data
            for g, v in zip(todo, vecs):
                self._guard_vecs[g] = v
        if not guards:
            return np.zeros((0, self.cfg.d_e), np.float32)
        return np.stack([self._guard_vecs[g] for g in guards])

    def embed_soft_cubes(self, probs: Tensor, props: Sequence[int]) -> Tensor:
        """q_e of per-step cubes whose literal negation bits are 1 - probability."""
        n_steps, k = probs.shape
        if k == 0:
            return Tensor(self.guard_vectors([And()] * n_steps), dtype=probs.dtype)
        template = canonicalize(And(*[Atom(p) for p in props]))
        st = self.guard_struct(template)
        g = st.graph
        lit_nodes = np.nonzero(g.slot >= 0)[0]
        # literal node -> column in probs
        col_of = {p: j for j, p in enumerate(props)}
        lit_cols = np.asarray([col_of[int(g.slot[i])] for i in lit_nodes], dtype=np.int64)
        structs = [st] * n_steps
        adj, x_const, offsets = _block(structs)
        n = x_const.shape[0]
        rows = np.concatenate([lit_nodes + off for off in offsets])
        cols = np.concatenate([lit_cols + t * k for t in range(n_steps)])
        pick = sp.csr_matrix((np.full(len(rows), -1.0), (rows, cols)), shape=(n, n_steps * k)).astype(probs.dtype)
        base = np.zeros((n, 1), dtype=probs.dtype)
        base[rows, 0] = 1.0
        neg = nn.add(nn.spmm(pick, nn.reshape(probs, (n_steps * k, 1))), base)
        sel = sp.csr_matrix(
            (np.ones(len(rows), np.float32), (rows, np.tile(g.slot[lit_nodes], n_steps))), shape=(n, self.cfg.n_props)
        ).astype(probs.dtype)
        pf = nn.Tensor(self.prop_features().data, dtype=probs.dtype)
        x = nn.concat([Tensor(x_const[:, : GUARD_DIM - 1], dtype=probs.dtype), neg, nn.spmm(sel, pf)], axis=1)
        qe = _cast_params(self.qe, probs.dtype)
        h = nn.gcn_layers(adj, x, qe)
        return nn.spmm(_mean_pool(structs, offsets).astype(probs.dtype), h)

    # q_m input features

    def item_input(self, item) -> np.ndarray:
        x = self._inputs.get(item)
        if x is not None:
            return x
        st = self.item_struct(item)
        g = st.graph
        cfg = self.cfg
        x = np.zeros((g.n_nodes, cfg.qm_in), dtype=np.float32)
        if g.slot_kind == "edge":
            x[:, :META_DIM] = g.features[:, :META_DIM]
            m = g.slot >= 0
            if item[0] == "dfa":
                guards = [item[1].edges[i].guard for i in g.slot[m]]
            else:
                path = _path_graph(item[1], item[2])
                guards = [path.edges[i].guard for i in g.slot[m]]
            x[m, META_DIM : META_DIM + cfg.d_e] = self.guard_vectors(guards)
        else:
            off = META_DIM + cfg.d_e
            x[:, off : off + SYNTAX_DIM] = g.features[:, :SYNTAX_DIM]
            m = g.slot >= 0
            x[m, off + SYNTAX_DIM :] = self.prop_features().data[g.slot[m]]
        self._inputs[item] = x
        return x

    # q_m

    def embed_items(self, items: Sequence, rng: np.random.Generator | None = None) -> Tensor:
        """Graph embeddings (rows) for a batch; ``rng=None`` selects evaluation-mode walks."""
        structs = [self.item_struct(it) for it in items]
        adj, _, offsets = _block(structs, with_features=False)
        x = np.concatenate([self.item_input(it) for it in items], axis=0)
        h = nn.gcn_layers(adj, Tensor(x), self.qm)
        return nn.spmm(self._readout(structs, offsets, rng), h)

    def _embed_soft(self, probs: Tensor, props: Sequence[int]) -> Tensor:
        cfg = self.cfg
        n_steps = probs.shape[0]
        steps = tuple(frozenset() for _ in range(n_steps))
        st = self.item_struct(("trace", steps, tuple(props)))
        g = st.graph
        cube_vecs = self.embed_soft_cubes(probs, props)
        edge_nodes = np.nonzero(g.slot >= 0)[0]
        n = g.n_nodes
        scatter = sp.csr_matrix(
            (np.ones(len(edge_nodes)), (edge_nodes, g.slot[edge_nodes])), shape=(n, n_steps)
        ).astype(probs.dtype)
        meta = np.zeros((n, META_DIM), dtype=probs.dtype)
        meta[:, :] = g.features[:, :META_DIM]
        tail = np.zeros((n, SYNTAX_DIM + cfg.d_p), dtype=probs.dtype)
        x = nn.concat([Tensor(meta), nn.spmm(scatter, cube_vecs), Tensor(tail)], axis=1)
        adj = st.adj.astype(probs.dtype)
        h = nn.gcn_layers(adj, x, _cast_params(self.qm, probs.dtype))
        r = self._readout([st], [0], None).astype(probs.dtype)
        return nn.spmm(r, h)

    def _readout(self, structs, offsets, rng) -> sp.csr_matrix:
        n = offsets[-1] + structs[-1].graph.n_nodes if structs else 0
        if rng is not None and self.cfg.readout == "walk":
            return _batch_walk_readout(structs, offsets, n, self.cfg.walks, self.cfg.walk_len, rng)
        rows, cols, vals = [], [], []
        for i, (s, off) in enumerate(zip(structs, offsets)):
            w = s.readout_weights(self.cfg, rng)
            nz = np.nonzero(w)[0]
            rows.append(np.full(len(nz), i))
            cols.append(nz + off)
            vals.append(w[nz])
        return sp.csr_matrix(
            (np.concatenate(vals).astype(np.float32), (np.concatenate(rows), np.concatenate(cols))), shape=(len(structs), n)
        )

    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(state) != set(params):
            raise ValueError("parameter names do not match the model")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = state[k].astype(np.float32)
        self.invalidate()

    def sidecar(self) -> dict:
        cfg = asdict(self.cfg)
        cfg["qe_hidden"] = list(cfg["qe_hidden"])
        cfg["qm_hidden"] = list(cfg["qm_hidden"])
        return {
            "version": 1,
            "config": cfg,
            "alphabet_hash": hashlib.sha256(json.dumps(cfg["prop_factor_index"]).encode() + str(cfg["n_props"]).encode()).hexdigest()[:16],
        }

    def save(self, path_prefix: str) -> None:
        with open(path_prefix + ".ckpt", "wb") as fh:
            fh.write(nn.save_checkpoint(self.params()))
        with open(path_prefix + ".json", "w") as fh:
            json.dump(self.sidecar(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path_prefix: str) -> "EmbedderModel":
        with open(path_prefix + ".json") as fh:
            meta = json.load(fh)
        cfg = meta["config"]
        cfg["qe_hidden"] = tuple(cfg["qe_hidden"])
        cfg["qm_hidden"] = tuple(cfg["qm_hidden"])
        cfg["prop_factor_sizes"] = tuple(cfg["prop_factor_sizes"])
        cfg["prop_factor_index"] = tuple(tuple(r) for r in cfg["prop_factor_index"])
        model = cls(EmbedderConfig(**cfg))
        with open(path_prefix + ".ckpt", "rb") as fh:
            model.load_state_dict(nn.load_checkpoint(fh.read()))
        return model


def _cast_params(p: nn.GcnParams, dtype) -> nn.GcnParams:
    if p.weights[0].dtype == dtype:
        return p
    return nn.GcnParams([Tensor(w.data, dtype=dtype) for w in p.weights], [Tensor(b.data, dtype=dtype) for b in p.biases], p.activation)


class _Struct:
    """Cached per-graph pieces that do not depend on parameters."""

    __slots__ = ("graph", "adj", "coo", "_eval_w", "_csr")

    def __init__(self, g: FeatureGraph):
        self.graph = g
        self.adj = nn.normalized_adjacency(g.n_nodes, g.arcs)
        c = self.adj.tocoo()
        self.coo = (c.row.astype(np.int64), c.col.astype(np.int64), c.data)
        self._eval_w: dict = {}
        self._csr = None

    def _out(self):
        if self._csr is None:
            g = self.graph
            order = np.argsort(g.arcs[:, 0], kind="stable") if g.n_arcs else np.zeros(0, np.int64)
            dst = g.arcs[order, 1] if g.n_arcs else np.zeros(0, np.int64)
            deg = np.bincount(g.arcs[:, 0], minlength=g.n_nodes) if g.n_arcs else np.zeros(g.n_nodes, np.int64)
            ptr = np.concatenate([[0], np.cumsum(deg)])
            self._csr = (ptr, dst, deg)
        return self._csr

    def readout_weights(self, cfg: EmbedderConfig, rng: np.random.Generator | None) -> np.ndarray:
        n = self.graph.n_nodes
        if cfg.readout == "mean":
            return np.full(n, 1.0 / n)
        key = (cfg.walks, cfg.walk_len)
        if rng is None and key in self._eval_w:
            return self._eval_w[key]
        r = rng if rng is not None else np.random.default_rng(int.from_bytes(self.graph.structure_digest()[:8], "little"))
        w = random_walk_visits(self._out(), self.graph.start, n, cfg.walks, cfg.walk_len, r)
        if rng is None:
            self._eval_w[key] = w
        return w


def random_walk_visits(out, start: int, n: int, k: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Visit frequencies of ``k`` walks of ``length`` steps from ``start`` (start included).

    A walker at a node without successors jumps back to ``start``.
    """
    ptr, dst, deg = out
    pos = np.full(k, start, dtype=np.int64)
    counts = np.zeros(n)
    np.add.at(counts, pos, 1)
    u = rng.random((length, k))
    for t in range(length):
        d = deg[pos]
        nxt = np.full(k, start, dtype=np.int64)
        live = d > 0
        if live.any():
            pick = (u[t, live] * d[live]).astype(np.int64)
            nxt[live] = dst[ptr[pos[live]] + pick]
        pos = nxt
        np.add.at(counts, pos, 1)
    return counts / counts.sum()


def _batch_walk_readout(structs, offsets, n: int, k: int, length: int, rng: np.random.Generator) -> sp.csr_matrix:
    """Training-mode walk readout for a whole batch in one vectorized pass."""
    ptrs, dsts, degs, owner = [], [], [], []
    arc_off = 0
    for i, (s, off) in enumerate(zip(structs, offsets)):
        ptr, dst, deg = s._out()
        ptrs.append(ptr[:-1] + arc_off)
        dsts.append(dst + off)
        degs.append(deg)
        owner.append(np.full(s.graph.n_nodes, i))
        arc_off += len(dst)
    ptr, dst, deg = np.concatenate(ptrs), np.concatenate(dsts), np.concatenate(degs)
    owner = np.concatenate(owner)
    starts = np.repeat(np.array([s.graph.start + off for s, off in zip(structs, offsets)], dtype=np.int64), k)
    pos = starts.copy()
    counts = np.bincount(pos, minlength=n).astype(np.float64)
    u = rng.random((length, len(starts)))
    for t in range(length):
        d = deg[pos]
        live = d > 0
        nxt = starts.copy()
        nxt[live] = dst[ptr[pos[live]] + (u[t, live] * d[live]).astype(np.int64)]
        pos = nxt
        counts += np.bincount(pos, minlength=n)
    nz = np.nonzero(counts)[0]
    return sp.csr_matrix(
        ((counts[nz] / (k * (length + 1))).astype(np.float32), (owner[nz], nz)), shape=(len(structs), n)
    )


def _block(structs: Sequence[_Struct], with_features: bool = True) -> tuple[sp.csr_matrix, np.ndarray | None, list[int]]:
    offsets, rows, cols, vals, xs = [], [], [], [], []
    off = 0
    for s in structs:
        offsets.append(off)
        r, c, v = s.coo
        rows.append(r + off)
        cols.append(c + off)
        vals.append(v)
        xs.append(s.graph.features)
        off += s.graph.n_nodes
    adj = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off, off))
    x = np.concatenate(xs, axis=0) if with_features and xs else None
    return adj, x, offsets


def _mean_pool(structs: Sequence[_Struct], offsets: Sequence[int]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, (s, off) in enumerate(zip(structs, offsets)):
        n = s.graph.n_nodes
        rows.append(np.full(n, i))
        cols.append(np.arange(off, off + n))
        vals.append(np.full(n, 1.0 / n))
    total = offsets[-1] + structs[-1].graph.n_nodes
    return sp.csr_matrix(
        (np.concatenate(vals).astype(np.float32), (np.concatenate(rows), np.concatenate(cols))), shape=(len(structs), total)
    )


# ---------------------------------------------------------------------------
# public embedding helpers


@lru_cache(maxsize=1 << 15)
def _path_graph(steps: tuple, props: tuple) -> LabeledDfaGraph:
    return trace_path_graph(steps, props)


def _steps(w) -> tuple[frozenset, ...]:
    if isinstance(w, Trace):
        return w.steps
    return tuple(frozenset(s) for s in w)


def dfa_item(g: LabeledDfaGraph) -> tuple:
    return ("dfa", g)


def trace_item(w, props: Sequence[int]) -> tuple:
    return ("trace", _steps(w), tuple(props))


def syntax_item(f: Formula) -> tuple:
    return ("syntax", f)


def formula_graph(f: Formula, props: Sequence[int], one_hot: bool = False, minimized: bool = True) -> LabeledDfaGraph:
    symbols = one_hot_symbols(props) if one_hot else None
    a = compile_formula(f, props=props, symbols=symbols)
    if minimized:
        a = minimize(a)
    return compact_edges(a)


def embed_edge_formula(guard: Formula, model: EmbedderModel) -> np.ndarray:
    if not is_propositional(guard):
        raise ValueError("temporal operator inside a guard")
    bad = [p for p in guard.props() if not 0 <= p < model.cfg.n_props]
    if bad:
        raise KeyError(f"unknown propositions {bad}")
    return model.guard_vectors([guard])[0].copy()


def embed_graph(x, model: EmbedderModel, rng: np.random.Generator | None = None, props: Sequence[int] | None = None) -> np.ndarray:
    """Embedding of a labeled DFA graph, a trace (needs ``props``) or a formula's syntax tree."""
    if isinstance(x, LabeledDfaGraph):
        item = dfa_item(x)
    elif isinstance(x, Formula):
        item = syntax_item(x)
    else:
        if props is None:
            raise ValueError("trace embedding needs the proposition set")
        item = trace_item(x, props)
    return model.embed_items([item], rng).data[0].copy()


def triplet_loss(z_a: Tensor, z_p: Tensor, z_n: Tensor, margin: float) -> Tensor:
    """Mean over rows of max(d(a, p) - d(a, n) + margin, 0) with squared Euclidean d."""
    if z_a.shape != z_p.shape or z_a.shape != z_n.shape:
        raise ValueError("embedding shapes differ")
    h = nn.relu(nn.add(nn.sub(nn.sq_dist(z_a, z_p), nn.sq_dist(z_a, z_n)), margin))
    return nn.mean(h)


def logic_loss(a: LabeledDfaGraph, w, model: EmbedderModel) -> float:
    """Squared distance between the DFA embedding and a trace or soft-trace embedding."""
    if isinstance(w, SoftTrace):
        return soft_logic_loss(a, Tensor(w.probs, dtype=np.float64), w.props, model).item()
    z_a = model.embed_items([dfa_item(a)]).data.astype(np.float64)
    z_w = model.embed_items([trace_item(w, a.props)]).data.astype(np.float64)
    return float(((z_a - z_w) ** 2).sum())


def soft_logic_loss(a: LabeledDfaGraph, probs: Tensor, props: Sequence[int], model: EmbedderModel) -> Tensor:
    """Logic loss recorded as a float64 function of the probability tensor."""
    if probs.shape[1] != len(props):
        raise ValueError("probability columns do not match the proposition set")
    z_a = model.embed_items([dfa_item(a)]).data.astype(np.float64)
    z_w = model._embed_soft(probs, props)
    return nn.tsum(nn.sq_dist(Tensor(z_a), z_w))


def logic_loss_grad(a: LabeledDfaGraph, w: SoftTrace, model: EmbedderModel) -> tuple[float, np.ndarray]:
    """Value and gradient with respect to ``w.probs``."""
    probs = Tensor(w.probs, requires_grad=True, dtype=np.float64)
    loss = soft_logic_loss(a, probs, w.props, model)
    loss.backward()
    return loss.item(), probs.grad


def combined_loss(task_loss, logic, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return task_loss
    return task_loss + logic * lam


# ---------------------------------------------------------------------------
# training


def propositional_parts(f: Formula) -> list[Formula]:
    """Maximal propositional subformulas (the syntax-tree analogue of edge guards)."""
    if is_propositional(f):
        return [canonicalize(f)]
    out = []
    for c in f.children:
        out.extend(propositional_parts(c))
    return out


@dataclass
class _Prepared:
    formula_item: tuple
    bag: list[Formula]
    props: tuple[int, ...]
    sat: list[tuple]
    unsat: list[tuple]
    cubes: list[Formula] = field(default_factory=list)
    _split: dict = field(default_factory=dict)

    def guard_split(self, g: Formula) -> tuple[list[Formula], list[Formula]]:
        """Symbol cubes satisfying and violating guard ``g``."""
        r = self._split.get(g)
        if r is None:
            yes, no = [], []
            for sym, cube in self.cubes:
                (yes if eval_guard(g, sym) else no).append(cube)
            r = self._split[g] = (yes, no)
        return r


def prepare(examples: Sequence[Example], representation: str = "dfa") -> list[_Prepared]:
    out = []
    for ex in examples:
        if not ex.sat or not ex.unsat:
            raise ValueError(f"formula #{len(out)} lacks satisfying or unsatisfying traces")
        if representation == "dfa":
            g = formula_graph(ex.formula, ex.props, ex.one_hot)
            item, bag = dfa_item(g), g.guards()
        else:
            item, bag = syntax_item(canonicalize(ex.formula)), propositional_parts(ex.formula)
        symbols = one_hot_symbols(ex.props) if ex.one_hot else all_symbols(ex.props)
        out.append(
            _Prepared(
                item,
                bag,
                tuple(ex.props),
                [trace_item(w, ex.props) for w in ex.sat],
                [trace_item(w, ex.props) for w in ex.unsat],
                [(s, _cube_cached(s, tuple(ex.props))) for s in symbols],
            )
        )
    return out


_CUBES: dict = {}


def _cube_cached(s: frozenset, props: tuple[int, ...]) -> Formula:
    key = (s, props)
    c = _CUBES.get(key)
    if c is None:
        c = _CUBES[key] = trace_cube(s, props)
    return c


def _bag_matrix(bags: Sequence[Sequence[Formula]], index: dict[Formula, int]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, bag in enumerate(bags):
        for g in bag:
            rows.append(i)
            cols.append(index[g])
            vals.append(1.0 / len(bag))
    return sp.csr_matrix((np.asarray(vals, np.float32), (rows, cols)), shape=(len(bags), len(index)))


def _trace_bag(item) -> list[Formula]:
    return _path_graph(item[1], item[2]).guards()


def _sample_triplets(prepped, batch_size, negatives, rng):
    idx = rng.choice(len(prepped), size=min(batch_size, len(prepped)), replace=False)
    out = []
    for i in idx:
        p = prepped[i]
        for _ in range(negatives):
            out.append((p, p.sat[rng.integers(len(p.sat))], p.unsat[rng.integers(len(p.unsat))]))
    return out


def _signed(tcfg: TrainConfig, pos, neg):
    return (neg, pos) if tcfg.printed_sign else (pos, neg)


def _guard_bags(triplets, rng) -> list[list[Formula]]:
    """Edge-level triplets: a guard, a cube that satisfies it and one that does not."""
    bags = []
    for p, _, _ in triplets:
        opts = [g for g in p.bag if all(p.guard_split(g))]
        if not opts:
            continue
        g = opts[rng.integers(len(opts))]
        yes, no = p.guard_split(g)
        bags += [[g], [yes[rng.integers(len(yes))]], [no[rng.integers(len(no))]]]
    return bags


def stage1_step(model: EmbedderModel, opt: nn.Adam, triplets, tcfg: TrainConfig, rng: np.random.Generator | None = None) -> float:
    bags = []
    if tcfg.stage1_objective == "guards":
        bags = _guard_bags(triplets, rng)
        if not bags:
            return 0.0
        if tcfg.printed_sign:
            bags = [b for i in range(0, len(bags), 3) for b in (bags[i], bags[i + 2], bags[i + 1])]
    else:
        for p, pos, neg in triplets:
            pos, neg = _signed(tcfg, pos, neg)
            bags += [p.bag, _trace_bag(pos), _trace_bag(neg)]
    guards = sorted({g for b in bags for g in b})
    index = {g: i for i, g in enumerate(guards)}
    emb = model.embed_guards(guards)
    z = nn.spmm(_bag_matrix(bags, index), emb)
    n = len(bags) // 3
    loss = triplet_loss(nn.take(z, np.arange(0, 3 * n, 3)), nn.take(z, np.arange(1, 3 * n, 3)), nn.take(z, np.arange(2, 3 * n, 3)), tcfg.margin)
    opt.zero_grad()
    loss.backward()
    opt.step()
    model.invalidate()
    return loss.item()


def stage2_step(model: EmbedderModel, opt: nn.Adam, triplets, tcfg: TrainConfig, rng: np.random.Generator) -> float:
    items = []
    for p, pos, neg in triplets:
        pos, neg = _signed(tcfg, pos, neg)
        items += [p.formula_item, pos, neg]
    z = model.embed_items(items, rng)
    n = len(triplets)
    loss = triplet_loss(nn.take(z, np.arange(0, 3 * n, 3)), nn.take(z, np.arange(1, 3 * n, 3)), nn.take(z, np.arange(2, 3 * n, 3)), tcfg.margin)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def embed_prepared(model: EmbedderModel, prepped: Sequence[_Prepared], chunk: int = 256) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Evaluation-mode embeddings: formulas, then per-formula sat and unsat trace matrices."""
    items = [p.formula_item for p in prepped]
    for p in prepped:
        items += p.sat + p.unsat
    z = embed_all(model, items, chunk)
    zf = z[: len(prepped)]
    pos = len(prepped)
    zs, zu = [], []
    for p in prepped:
        zs.append(z[pos : pos + len(p.sat)])
        pos += len(p.sat)
        zu.append(z[pos : pos + len(p.unsat)])
        pos += len(p.unsat)
    return zf, zs, zu


def embed_all(model: EmbedderModel, items: Sequence, chunk: int = 256) -> np.ndarray:
    outs = [model.embed_items(items[i : i + chunk]).data for i in range(0, len(items), chunk)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.cfg.d_z), np.float32)


def margin_accuracy(zf: np.ndarray, zs: Sequence[np.ndarray], zu: Sequence[np.ndarray], margin: float) -> float:
    """Fraction of (formula, sat, unsat) triples with d(f, sat) + margin <= d(f, unsat)."""
    ok = total = 0
    for f, s, u in zip(zf, zs, zu):
        ds = ((s.astype(np.float64) - f) ** 2).sum(axis=1)
        du = ((u.astype(np.float64) - f) ** 2).sum(axis=1)
        ok += int((ds[:, None] + margin <= du[None, :]).sum())
        total += ds.size * du.size
    return ok / total if total else 0.0


def separation_rate(zf, zs, zu) -> float:
    """Fraction of formulas whose mean distance to sat traces is below the mean to unsat traces."""
    wins = 0
    for f, s, u in zip(zf, zs, zu):
        ds = ((s.astype(np.float64) - f) ** 2).sum(axis=1).mean()
        du = ((u.astype(np.float64) - f) ** 2).sum(axis=1).mean()
        wins += ds < du
    return wins / len(zf) if len(zf) else 0.0


@dataclass
class TrainResult:
    model: EmbedderModel
    log: list[dict] = field(default_factory=list)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def train_embedder(
    examples: Sequence[Example],
    ecfg: EmbedderConfig,
    tcfg: TrainConfig,
    model: EmbedderModel | None = None,
    heldout: Sequence[Example] | None = None,
) -> TrainResult:
    """Two-stage triplet training: proposition features + q_e on guard bags, then q_m on graphs."""
    prepped = prepare(examples, tcfg.representation)
    held = prepare(heldout, tcfg.representation) if heldout else None
    model = model or EmbedderModel(ecfg)
    rng = np.random.default_rng([tcfg.seed, 2])
    log: list[dict] = []

    def record(stage, step, losses):
        row = {"stage": stage, "step": step, "loss": round(float(np.mean(losses)), 6) if losses else None}
        if stage == 2 or step == tcfg.stage1_steps:
            zf, zs, zu = embed_prepared(model, prepped)
            row["train_margin_acc"] = round(margin_accuracy(zf, zs, zu, tcfg.margin), 6)
            if held:
                zf, zs, zu = embed_prepared(model, held)
                row["heldout_margin_acc"] = round(margin_accuracy(zf, zs, zu, tcfg.margin), 6)
        log.append(row)

    opt1 = nn.Adam(model.stage1_params(), lr=tcfg.lr)
    losses: list[float] = []
    for step in range(1, tcfg.stage1_steps + 1):
        losses.append(stage1_step(model, opt1, _sample_triplets(prepped, tcfg.batch_size, tcfg.negatives, rng), tcfg, rng))
        if step % tcfg.eval_every == 0 or step == tcfg.stage1_steps:
            record(1, step, losses)
            losses = []
    model.invalidate()
    opt2 = nn.Adam(model.stage2_params(), lr=tcfg.lr)
    losses = []
    for step in range(1, tcfg.stage2_steps + 1):
        losses.append(stage2_step(model, opt2, _sample_triplets(prepped, tcfg.batch_size, tcfg.negatives, rng), tcfg, rng))
        if step % tcfg.eval_every == 0 or step == tcfg.stage2_steps:
            record(2, step, losses)
            losses = []
    return TrainResult(model, log)
