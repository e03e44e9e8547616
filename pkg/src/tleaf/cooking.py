"""Creative-cooking MDP, its LTL_f knowledge base, a scripted expert and logic-loss scoring."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .automata import compile_formula, minimize, one_hot_symbols
from .datasets import _distinct, sample_sat_trace, sample_unsat_trace
from .embedder import EmbedderConfig, Example, TrainConfig, dfa_item, formula_graph, trace_item, train_embedder
from .ltl import TRUE, Alphabet, Always, And, Atom, Formula, GenerationError, Not, Or, Trace, Until, canonicalize, check_steps

N_SLOTS = 5
MIXTURE_NAME = "mixture"
EXPECTED_COUNTS = {"ingredients": 50, "properties": 15, "actions": 31, "categories": 10, "statuses": 6}
KINDS = ("single", "add", "combine", "top_with")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpec:
    name: str
    category: str
    kind: str
    requires_any: frozenset
    forbids: frozenset
    prerequisites: frozenset  # status ids
    effect: int | None  # status id
    topping_requires_any: frozenset = frozenset()

    @property
    def is_proposition(self) -> bool:
        """Only single-target actions and ``add`` become trace propositions."""
        return self.kind in ("single", "add")


@dataclass
class Domain:
    statuses: tuple[str, ...]
    ranks: tuple[int, ...]
    transitions: tuple[tuple[int, int], ...]
    properties: tuple[str, ...]
    goal: dict[int, int]  # property id -> required status id
    ingredients: tuple[str, ...]
    ingredient_props: tuple[frozenset, ...]
    actions: tuple[ActionSpec, ...]
    prop_actions: tuple[int, ...] = ()  # action ids that carry propositions

    def __post_init__(self):
        self.prop_actions = tuple(i for i, a in enumerate(self.actions) if a.is_proposition)
        self._prop_row = {a: r for r, a in enumerate(self.prop_actions)}

    # ids: ingredients are 1..n in state vectors, the mixture is n + 1; statuses are 1..6
    @property
    def mixture_id(self) -> int:
        return len(self.ingredients) + 1

    def action_id(self, name: str) -> int:
        for i, a in enumerate(self.actions):
            if a.name == name:
                return i
        raise KeyError(name)

    def ingredient_id(self, name: str) -> int:
        if name == MIXTURE_NAME:
            return self.mixture_id
        return self.ingredients.index(name) + 1

    def status_id(self, name: str) -> int:
        return self.statuses.index(name)

    def rank(self, status: int) -> int:
        return self.ranks[status]

    def required_rank(self, props: Iterable[int]) -> int:
        return max((self.rank(self.goal[p]) for p in props), default=-1)

    def affords(self, action: int, props: frozenset) -> bool:
        a = self.actions[action]
        if props & a.forbids:
            return False
        return not a.requires_any or bool(props & a.requires_any)

    # propositions: one per (proposition action, ingredient or mixture)
    @property
    def n_props(self) -> int:
        return len(self.prop_actions) * (len(self.ingredients) + 1)

    def prop_id(self, action: int, ingredient: int) -> int:
        """``ingredient`` is the 1-based id used in states (mixture included)."""
        return self._prop_row[action] * (len(self.ingredients) + 1) + ingredient - 1

    def prop_parts(self, pid: int) -> tuple[int, int]:
        r, i = divmod(pid, len(self.ingredients) + 1)
        return self.prop_actions[r], i + 1

    def prop_name(self, pid: int) -> str:
        a, i = self.prop_parts(pid)
        ing = MIXTURE_NAME if i == self.mixture_id else self.ingredients[i - 1]
        return f"{self.actions[a].name}__{ing}"

    def alphabet(self) -> Alphabet:
        return Alphabet(self.prop_name(p) for p in range(self.n_props))

    def prop_factor_index(self) -> tuple[tuple[int, int], ...]:
        """(proposition-action row, ingredient row) per proposition, for factorized features."""
        n = len(self.ingredients) + 1
        return tuple(divmod(p, n) for p in range(self.n_props))


# ---------------------------------------------------------------------------
# domain file


def _reachable(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    r = np.eye(n, dtype=bool)
    for a, b in edges:
        r[a, b] = True
    for k in range(n):
        r |= r[:, [k]] & r[[k], :]
    return r


def domain_from_json(data: dict) -> Domain:
    try:
        statuses = tuple(s["name"] for s in data["statuses"])
        ranks = tuple(int(s["rank"]) for s in data["statuses"])
        sid = {s: i for i, s in enumerate(statuses)}
        props = tuple(data["properties"])
        pid = {p: i for i, p in enumerate(props)}
        transitions = tuple((sid[a], sid[b]) for a, b in data["status_transitions"])
        goal = {pid[p]: sid[s] for p, s in data["goal"].items()}
        names = tuple(i["name"] for i in data["ingredients"])
        iprops = tuple(frozenset(pid[p] for p in i["properties"]) for i in data["ingredients"])
        actions = []
        for a in data["actions"]:
            actions.append(
                ActionSpec(
                    a["name"],
                    a["category"],
                    a.get("kind", "single"),
                    frozenset(pid[p] for p in a.get("requires_any", [])),
                    frozenset(pid[p] for p in a.get("forbids", [])),
                    frozenset(sid[s] for s in a["prerequisites"]),
                    None if a.get("effect") is None else sid[a["effect"]],
                    frozenset(pid[p] for p in a.get("topping_requires_any", [])),
                )
            )
    except KeyError as exc:
        raise DomainError(f"unknown or missing name {exc}") from None
    d = Domain(statuses, ranks, transitions, props, goal, names, iprops, tuple(actions))
    validate_domain(d)
    return d


def validate_domain(d: Domain) -> None:
    counts = {
        "ingredients": len(d.ingredients),
        "properties": len(d.properties),
        "actions": len(d.actions),
        "categories": len({a.category for a in d.actions}),
        "statuses": len(d.statuses),
    }
    for k, v in EXPECTED_COUNTS.items():
        if counts[k] != v:
            raise DomainError(f"expected {v} {k}, found {counts[k]}")
    for kind, seq in (("ingredient", d.ingredients), ("action", [a.name for a in d.actions]), ("property", d.properties), ("status", d.statuses)):
        if len(set(seq)) != len(seq):
            raise DomainError(f"duplicate {kind} names")
    if MIXTURE_NAME in d.ingredients:
        raise DomainError(f"{MIXTURE_NAME!r} is reserved")
    if any(not ps for ps in d.ingredient_props):
        raise DomainError("every ingredient needs at least one property")
    if set(d.goal) != set(range(len(d.properties))):
        raise DomainError("goal map must cover every property")
    reach = _reachable(len(d.statuses), d.transitions)
    for a in d.actions:
        if a.kind not in KINDS:
            raise DomainError(f"action {a.name}: unknown kind {a.kind!r}")
        if (a.effect is None) != (a.kind in ("add", "combine")):
            raise DomainError(f"action {a.name}: effect required exactly for status-changing actions")
        if a.effect is not None:
            for s in a.prerequisites:
                if not reach[s, a.effect] or d.ranks[s] > d.ranks[a.effect]:
                    raise DomainError(f"action {a.name}: {d.statuses[s]} -> {d.statuses[a.effect]} goes against the status order")
    for a, b in d.transitions:
        if d.ranks[a] > d.ranks[b]:
            raise DomainError("status transitions must not lower the rank")
    for i, ps in enumerate(d.ingredient_props):
        if expert_plan(d, i + 1, ps, d.status_id("raw")) is None:
            raise DomainError(f"goal of {d.ingredients[i]} is unreachable")


def load_domain(path: str | None = None) -> Domain:
    """The shipped default domain, or the JSON file at ``path``."""
    if path is None:
        text = resources.files("tleaf").joinpath("data/cooking_domain.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"domain file is not JSON: {exc}") from None
    return domain_from_json(data)


# ---------------------------------------------------------------------------
# MDP


@dataclass(frozen=True)
class CookState:
    """``vec`` = (mixture id, mixture status, 5 x (ingredient id, status)); 0 marks a merged-away slot.

    ``t`` counts executed (feasible) actions.  The mixture's property set is kept alongside the vector
    since the 12 numbers alone do not determine it.
    """

    vec: tuple[int, ...]
    mixture_props: frozenset = frozenset()
    t: int = 0

    def slot(self, k: int) -> tuple[int, int]:
        return self.vec[2 * k], self.vec[2 * k + 1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vec, dtype=np.int64)


@dataclass(frozen=True)
class CookAction:
    action: int
    slots: tuple[int, ...]  # slot 0 is the mixture, 1..5 the ingredients


def reset(domain: Domain, seed: int) -> CookState:
    rng = np.random.default_rng([seed, 31])
    picks = rng.choice(len(domain.ingredients), size=N_SLOTS, replace=False)
    raw = domain.status_id("raw")
    vec = [domain.mixture_id, raw + 1]
    for i in picks:
        vec += [int(i) + 1, raw + 1]
    return CookState(tuple(vec))


def _props_of(domain: Domain, state: CookState, k: int) -> frozenset:
    ing, _ = state.slot(k)
    if k == 0:
        return state.mixture_props
    return domain.ingredient_props[ing - 1] if ing else frozenset()


def _check_action(domain: Domain, act: CookAction) -> ActionSpec:
    if not 0 <= act.action < len(domain.actions):
        raise ValueError(f"unknown action {act.action}")
    spec = domain.actions[act.action]
    arity = 2 if spec.kind in ("combine", "top_with") else 1
    if len(act.slots) != arity:
        raise ValueError(f"{spec.name} takes {arity} slot(s), got {len(act.slots)}")
    if any(not 0 <= s <= N_SLOTS for s in act.slots):
        raise ValueError(f"slot out of range in {act.slots}")
    if len(set(act.slots)) != len(act.slots):
        raise ValueError("the two slots must differ")
    return spec


def _merge(domain: Domain, state: CookState, k: int) -> CookState:
    ing, st = state.slot(k)
    vec = list(state.vec)
    m_props = state.mixture_props | domain.ingredient_props[ing - 1]
    if not state.mixture_props:
        vec[1] = st
    elif domain.rank(st - 1) < domain.rank(vec[1] - 1):
        vec[1] = st
    vec[2 * k] = vec[2 * k + 1] = 0
    return replace(state, vec=tuple(vec), mixture_props=m_props)


def feasible(domain: Domain, state: CookState, act: CookAction) -> bool:
    spec = _check_action(domain, act)
    live = [state.slot(k)[0] != 0 and (k != 0 or bool(state.mixture_props)) for k in range(N_SLOTS + 1)]
    if not all(live[k] for k in act.slots):
        return False
    if spec.kind in ("add", "combine"):
        return 0 not in act.slots
    k = act.slots[0]
    status = state.slot(k)[1] - 1
    if status not in spec.prerequisites or not domain.affords(act.action, _props_of(domain, state, k)):
        return False
    if spec.kind == "top_with":
        topping = act.slots[1]
        return topping != 0 and bool(_props_of(domain, state, topping) & spec.topping_requires_any)
    return True


def is_goal(domain: Domain, state: CookState) -> bool:
    for k in range(N_SLOTS + 1):
        ing, st = state.slot(k)
        props = _props_of(domain, state, k)
        if not ing or not props:
            continue
        if domain.rank(st - 1) < domain.required_rank(props):
            return False
    return True


def step(domain: Domain, state: CookState, act: CookAction) -> tuple[CookState, float, bool, bool]:
    """Returns (next state, reward, done, feasible)."""
    if not feasible(domain, state, act):
        return state, -2.0, False, False
    spec = domain.actions[act.action]
    if spec.kind == "add":
        nxt = _merge(domain, state, act.slots[0])
    elif spec.kind == "combine":
        nxt = _merge(domain, _merge(domain, state, act.slots[0]), act.slots[1])
    else:
        vec = list(state.vec)
        k = act.slots[0]
        vec[2 * k + 1] = spec.effect + 1
        if spec.kind == "top_with":
            j = act.slots[1]
            vec[2 * j] = vec[2 * j + 1] = 0
        nxt = replace(state, vec=tuple(vec))
    nxt = replace(nxt, t=state.t + 1)
    done = is_goal(domain, nxt)
    return nxt, (19.0 if done else -1.0), done, True


# ---------------------------------------------------------------------------
# scripted expert


def expert_plan(domain: Domain, ingredient: int, props: frozenset, status: int, rng: np.random.Generator | None = None) -> list[int] | None:
    """A shortest action sequence (single-target actions only) reaching the required rank.

    With ``rng`` the choice among equally short continuations is uniform; otherwise the lowest action id wins.
    """
    need = domain.required_rank(props)
    singles = [i for i, a in enumerate(domain.actions) if a.kind == "single" and domain.affords(i, props)]
    dist = {status: 0}
    parents: dict[int, list[tuple[int, int]]] = {status: []}
    q = deque([status])
    while q:
        s = q.popleft()
        for a in singles:
            spec = domain.actions[a]
            if s not in spec.prerequisites:
                continue
            t = spec.effect
            if t not in dist:
                dist[t] = dist[s] + 1
                parents[t] = []
                q.append(t)
            if dist[t] == dist[s] + 1:
                parents[t].append((s, a))
    done = [s for s in dist if domain.rank(s) >= need]
    if not done:
        return None
    best = min(dist[s] for s in done)
    ends = sorted(s for s in done if dist[s] == best)
    s = ends[rng.integers(len(ends))] if rng is not None else ends[0]
    plan = []
    while dist[s] > 0:
        opts = sorted(parents[s], key=lambda x: x[1])
        s, a = opts[rng.integers(len(opts))] if rng is not None else opts[0]
        plan.append(a)
    return plan[::-1]


@dataclass
class Transition:
    state: CookState
    action: CookAction
    reward: float
    feasible: bool
    done: bool


@dataclass
class Trajectory:
    initial: CookState
    steps: list[Transition] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def final(self) -> CookState:
        return self.steps[-1].state if self.steps else self.initial

    def to_jsonl(self, domain: Domain) -> str:
        lines = []
        prev = self.initial
        for s in self.steps:
            a = domain.actions[s.action.action]
            lines.append(
                json.dumps(
                    {"state": list(prev.vec), "action": {"name": a.name, "slots": list(s.action.slots)}, "reward": s.reward, "feasible": s.feasible},
                    sort_keys=True,
                )
            )
            prev = s.state
        return "".join(x + "\n" for x in lines)


def rollout(domain: Domain, seed: int, max_steps: int = 200) -> Trajectory:
    """Expert episode: each step picks a random unfinished ingredient and its next planned action."""
    state = reset(domain, seed)
    rng = np.random.default_rng([seed, 32])
    plans = {}
    for k in range(1, N_SLOTS + 1):
        ing, st = state.slot(k)
        plan = expert_plan(domain, ing, domain.ingredient_props[ing - 1], st - 1, rng)
        if plan is None:
            raise DomainError(f"goal of {domain.ingredients[ing - 1]} is unreachable")
        plans[k] = deque(plan)
    traj = Trajectory(state)
    while len(traj.steps) < max_steps:
        open_slots = [k for k in sorted(plans) if plans[k]]
        if not open_slots:
            break
        k = open_slots[rng.integers(len(open_slots))]
        act = CookAction(plans[k].popleft(), (k,))
        state, r, done, ok = step(domain, state, act)
        if not ok:
            raise AssertionError(f"expert chose an infeasible action {domain.actions[act.action].name}")
        traj.steps.append(Transition(state, act, r, ok, done))
        if done:
            return traj
    raise DomainError("expert rollout did not reach the goal within the step budget")


# ---------------------------------------------------------------------------
# propositions, traces and the knowledge base


def step_prop(domain: Domain, state: CookState, act: CookAction) -> int | None:
    """The proposition made true by choosing ``act`` in ``state`` (None for two-target actions)."""
    spec = domain.actions[act.action]
    if not spec.is_proposition:
        return None
    ing = state.slot(act.slots[0])[0]
    if not ing:
        return None
    return domain.prop_id(act.action, ing)


def trajectory_props(domain: Domain, traj: Trajectory) -> list[int | None]:
    out, prev = [], traj.initial
    for s in traj.steps:
        out.append(step_prop(domain, prev, s.action))
        prev = s.state
    return out


def trajectory_to_trace(domain: Domain, traj: Trajectory, alphabet: Alphabet | None = None) -> Trace:
    al = alphabet or domain.alphabet()
    return Trace(tuple(frozenset() if p is None else frozenset([p]) for p in trajectory_props(domain, traj)), al)


@dataclass(frozen=True)
class Constraint:
    kind: str  # "affordance" or "dependency"
    ingredient: int
    props: tuple[int, ...]
    formula: Formula


@dataclass
class KnowledgeBase:
    constraints: list[Constraint]
    by_ingredient: dict[int, list[Constraint]] = field(default_factory=dict)

    def __post_init__(self):
        for c in self.constraints:
            self.by_ingredient.setdefault(c.ingredient, []).append(c)

    def __len__(self) -> int:
        return len(self.constraints)


def dependency_formula(first: int, second: int) -> Formula:
    """``first`` must precede ``second`` whenever ``second`` occurs."""
    return Or(Always(Not(Atom(second))), Until(Not(Atom(second)), Atom(first)))


def knowledge_base(domain: Domain) -> KnowledgeBase:
    cons = []
    singles = [i for i, a in enumerate(domain.actions) if a.kind == "single"]
    for ing in range(1, len(domain.ingredients) + 1):
        props = domain.ingredient_props[ing - 1]
        allowed = []
        for a in singles:
            p = domain.prop_id(a, ing)
            if domain.affords(a, props):
                allowed.append(a)
            else:
                cons.append(Constraint("affordance", ing, (p,), Always(Not(Atom(p)))))
        for a1 in allowed:
            for a2 in allowed:
                if domain.rank(domain.actions[a1].effect) < domain.rank(domain.actions[a2].effect):
                    p1, p2 = domain.prop_id(a1, ing), domain.prop_id(a2, ing)
                    cons.append(Constraint("dependency", ing, (p1, p2), dependency_formula(p1, p2)))
    return KnowledgeBase(cons)


def extract_formula(kb: KnowledgeBase, props: Iterable[int], domain: Domain) -> tuple[Formula, tuple[int, ...]]:
    """Conjunction of the constraints mentioning only ``props``; returns it with the sorted alphabet."""
    ps = frozenset(p for p in props if p is not None)
    ings = sorted({domain.prop_parts(p)[1] for p in ps})
    parts = [c.formula for i in ings for c in kb.by_ingredient.get(i, ()) if ps.issuperset(c.props)]
    f = And(*parts) if parts else TRUE
    return canonicalize(f), tuple(sorted(ps))


def ingredient_traces(domain: Domain, traj: Trajectory) -> dict[int, tuple[frozenset, ...]]:
    """Per touched ingredient: the trace restricted to its propositions, other steps dropped."""
    out: dict[int, list] = {}
    for p in trajectory_props(domain, traj):
        if p is None:
            continue
        ing = domain.prop_parts(p)[1]
        out.setdefault(ing, []).append(frozenset([p]))
    return {i: tuple(w) for i, w in sorted(out.items())}


def procedural_violation(domain: Domain, props_seq: Sequence[int | None]) -> bool:
    """Direct check (no LTL): a forbidden (action, ingredient) pair or an order inversion."""
    first: dict[int, int] = {}
    for t, p in enumerate(props_seq):
        if p is not None:
            first.setdefault(p, t)
    for p in first:
        a, ing = domain.prop_parts(p)
        if ing == domain.mixture_id or domain.actions[a].kind != "single":
            continue
        if not domain.affords(a, domain.ingredient_props[ing - 1]):
            return True
    by_ing: dict[int, list[int]] = {}
    for p in first:
        a, ing = domain.prop_parts(p)
        if ing != domain.mixture_id and domain.actions[a].kind == "single":
            by_ing.setdefault(ing, []).append(p)
    for ps in by_ing.values():
        for p1 in ps:
            for p2 in ps:
                r1 = domain.rank(domain.actions[domain.prop_parts(p1)[0]].effect)
                r2 = domain.rank(domain.actions[domain.prop_parts(p2)[0]].effect)
                if r1 < r2 and first[p2] < first[p1]:
                    return True
    return False


def invert_order(domain: Domain, traj: Trajectory, rng: np.random.Generator) -> tuple[list[int | None], int] | None:
    """Proposition sequence with one ingredient's lowest- and highest-rank actions swapped.

    Returns (sequence, ingredient) or None if no ingredient has two actions of different rank.
    """
    seq = trajectory_props(domain, traj)
    cands = []
    for ing in sorted({domain.prop_parts(p)[1] for p in seq if p is not None}):
        pos = [t for t, p in enumerate(seq) if p is not None and domain.prop_parts(p)[1] == ing]
        ranks = [domain.rank(domain.actions[domain.prop_parts(seq[t])[0]].effect) for t in pos]
        if min(ranks) < max(ranks):
            i = pos[ranks.index(min(ranks))]
            j = pos[len(ranks) - 1 - ranks[::-1].index(max(ranks))]
            cands.append((ing, i, j))
    if not cands:
        return None
    ing, i, j = cands[rng.integers(len(cands))]
    out = list(seq)
    out[i], out[j] = out[j], out[i]
    return out, ing


def props_to_steps(seq: Sequence[int | None]) -> tuple[frozenset, ...]:
    return tuple(frozenset() if p is None else frozenset([p]) for p in seq)


def restrict(seq: Sequence[int | None], ingredient: int, domain: Domain) -> tuple[frozenset, ...]:
    return tuple(frozenset([p]) for p in seq if p is not None and domain.prop_parts(p)[1] == ingredient)


def oracle_satisfies(kb: KnowledgeBase, domain: Domain, seq: Sequence[int | None]) -> bool:
    f, _ = extract_formula(kb, seq, domain)
    return check_steps(props_to_steps(seq), f)


# ---------------------------------------------------------------------------
# logic-loss scoring with a trained embedder


def embedder_config(domain: Domain, seed: int = 0, **kw) -> EmbedderConfig:
    """Proposition features factorized as action part + ingredient part."""

    return EmbedderConfig(
        n_props=domain.n_props,
        prop_factor_sizes=(len(domain.prop_actions), len(domain.ingredients) + 1),
        prop_factor_index=domain.prop_factor_index(),
        seed=seed,
        **kw,
    )


def _as_seq(domain: Domain, traj) -> list[int | None]:
    return trajectory_props(domain, traj) if isinstance(traj, Trajectory) else list(traj)


def ingredient_losses(model, kb: KnowledgeBase, domain: Domain, traj) -> dict[int, float]:
    """Logic loss per touched ingredient: its extracted clauses against its own sub-trace."""

    seq = _as_seq(domain, traj)
    out = {}
    for ing in sorted({domain.prop_parts(p)[1] for p in seq if p is not None}):
        w = restrict(seq, ing, domain)
        f, props = extract_formula(kb, [next(iter(s)) for s in w], domain)
        g = formula_graph(f, props, one_hot=True)
        z = model.embed_items([dfa_item(g), trace_item(w, props)]).data.astype(np.float64)
        out[ing] = float(((z[0] - z[1]) ** 2).sum())
    return out


def score_trajectories(model, kb: KnowledgeBase, domain: Domain, trajs: Sequence) -> list[float]:
    """Mean per-ingredient logic loss of each trajectory (a Trajectory or a proposition sequence)."""
    scores = []
    for t in trajs:
        losses = ingredient_losses(model, kb, domain, t)
        scores.append(float(np.mean(list(losses.values()))) if losses else 0.0)
    return scores


def sample_subformulas(
    domain: Domain,
    kb: KnowledgeBase,
    n: int,
    traces_per_side: int = 10,
    len_range: tuple[int, int] = (2, 6),
    exclude: Iterable[Formula] = (),
    seed: int = 0,
    forbidden_rate: float = 0.3,
) -> list:
    """Knowledge-base fragments over 2..5 actions of one ingredient, with one-hot traces of both labels."""

    rng = np.random.default_rng([seed, 33])
    seen = set(exclude)
    singles = [i for i, a in enumerate(domain.actions) if a.kind == "single"]
    out = []
    for _ in range(200 * n):
        if len(out) == n:
            return out
        ing = int(rng.integers(1, len(domain.ingredients) + 1))
        props = domain.ingredient_props[ing - 1]
        ok = [a for a in singles if domain.affords(a, props)]
        bad = [a for a in singles if not domain.affords(a, props)]
        k = int(rng.integers(2, 6))
        acts = list(rng.choice(ok, size=min(k, len(ok)), replace=False))
        if bad and rng.random() < forbidden_rate:
            acts[-1] = bad[rng.integers(len(bad))]
        f, ps = extract_formula(kb, [domain.prop_id(int(a), ing) for a in acts], domain)
        if f in seen:
            continue
        a = minimize(compile_formula(f, props=ps, symbols=one_hot_symbols(ps)))
        try:
            sat = _distinct(lambda: sample_sat_trace(a, len_range, rng), traces_per_side, 20 * traces_per_side)
            unsat = _distinct(lambda: sample_unsat_trace(a, len_range, rng), traces_per_side, 20 * traces_per_side)
        except GenerationError:
            continue
        seen.add(f)
        out.append(Example(f, ps, sat, unsat, one_hot=True))
    raise RuntimeError(f"only {len(out)} of {n} distinct sub-formulae found")


@dataclass
class MatchedPair:
    seed: int
    ingredient: int
    formula: Formula
    good: list[int | None]
    bad: list[int | None]


def matched_pairs(domain: Domain, kb: KnowledgeBase, seeds: Iterable[int]) -> list[MatchedPair]:
    """Expert rollouts paired with an order-inverted copy (rollouts without a rank gap are skipped)."""
    out = []
    for s in seeds:
        traj = rollout(domain, s)
        r = invert_order(domain, traj, np.random.default_rng([s, 34]))
        if r is None:
            continue
        bad, ing = r
        good = trajectory_props(domain, traj)
        f, _ = extract_formula(kb, [p for p in good if p is not None and domain.prop_parts(p)[1] == ing], domain)
        out.append(MatchedPair(s, ing, f, good, bad))
    return out


def logic_loss_experiment(
    domain: Domain,
    n_train: int = 300,
    eval_seeds: Sequence[int] = range(1000, 1100),
    seed: int = 0,
    tcfg=None,
) -> dict:
    """Train on sampled fragments, score expert vs inverted rollouts whose formulas were held out."""

    kb = knowledge_base(domain)
    pairs = matched_pairs(domain, kb, eval_seeds)
    held = {p.formula for p in pairs}
    train = sample_subformulas(domain, kb, n_train, exclude=held, seed=seed)
    tcfg = tcfg or TrainConfig(seed=seed, eval_every=10**9)
    res = train_embedder(train, embedder_config(domain, seed=seed), tcfg)
    good = score_trajectories(res.model, kb, domain, [p.good for p in pairs])
    bad = score_trajectories(res.model, kb, domain, [p.bad for p in pairs])
    wins = [g < b for g, b in zip(good, bad)]
    trained = {e.formula for e in train}
    return {
        "n_pairs": len(pairs),
        "n_train_formulas": len(train),
        "unseen_fraction": float(np.mean([p.formula not in trained for p in pairs])) if pairs else 0.0,
        "win_rate": float(np.mean(wins)) if wins else 0.0,
        "mean_loss_good": float(np.mean(good)) if good else 0.0,
        "mean_loss_bad": float(np.mean(bad)) if bad else 0.0,
        "train_log": res.log,
    }
