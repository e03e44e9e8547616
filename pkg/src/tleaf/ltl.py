"""LTL_f formulas: syntax, parsing/printing, canonical forms, semantics, progression.

Formulas are immutable, hashable trees. ``And``/``Or`` are n-ary. The sugar
operators ``F``, ``G`` and ``->`` only exist in the concrete syntax; the parser
desugars them, so everything downstream sees the core connectives.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Alphabet",
    "ComplexityParams",
    "Formula",
    "GenerationError",
    "LtlSyntaxError",
    "Proposition",
    "Trace",
    "TRUE",
    "FALSE",
    "Atom",
    "Not",
    "And",
    "Or",
    "Next",
    "Until",
    "Eventually",
    "Always",
    "Implies",
    "accepts_empty",
    "canonicalize",
    "check",
    "format_formula",
    "is_propositional",
    "parse",
    "progress",
    "random_formula",
]

IDENT_RE = re.compile(r"[a-z_][a-zA-Z0-9_]*\Z")
RESERVED = frozenset({"true", "false", "X", "F", "G", "U"})

# rank used by the structural total order
_OP_RANK = {"false": 0, "true": 1, "atom": 2, "not": 3, "and": 4, "or": 5, "next": 6, "until": 7}


class LtlSyntaxError(ValueError):
    def __init__(self, msg: str, line: int = 1, col: int = 1):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.col = col


class AlphabetMismatch(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Proposition:
    id: int
    name: str


class Alphabet:
    """Interning table between proposition names and dense integer ids."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.intern(n)

    def intern(self, name: str) -> int:
        if name in self._ids:
            return self._ids[name]
        if name in RESERVED or not IDENT_RE.match(name):
            raise ValueError(f"invalid proposition name {name!r}")
        self._ids[name] = len(self._names)
        self._names.append(name)
        return self._ids[name]

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, pid: int) -> str:
        return self._names[pid]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def __contains__(self, item) -> bool:
        if isinstance(item, str):
            return item in self._ids
        return 0 <= item < len(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return (Proposition(i, n) for i, n in enumerate(self._names))

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and self._names == other._names

    def __repr__(self) -> str:
        return f"Alphabet({self._names!r})"

    def copy(self) -> "Alphabet":
        return Alphabet(self._names)


class Formula:
    """One node of an LTL_f syntax tree.

    ``op`` is one of ``true false atom not and or next until``. For atoms
    ``args`` holds the proposition id, otherwise the child formulas.
    """

    __slots__ = ("op", "args", "_key", "_hash", "_size")

    def __init__(self, op: str, args: tuple = ()):
        self.op = op
        self.args = args
        if op == "atom":
            self._key = (_OP_RANK[op], args[0])
            self._size = 1
            self._hash = hash(self._key)
        else:
            self._key = (_OP_RANK[op],) + tuple(a._key for a in args)
            self._size = 1 + sum(a._size for a in args)
            # built from cached child hashes so shared subtrees stay cheap
            self._hash = hash((_OP_RANK[op],) + tuple(a._hash for a in args))

    # structural identity
    def __eq__(self, other) -> bool:
        if self is other:
            return True
        return isinstance(other, Formula) and self._hash == other._hash and self._key == other._key

    def __hash__(self) -> int:
        return self._hash

    def __lt__(self, other: "Formula") -> bool:
        return self._key < other._key

    def __reduce__(self):
        return (Formula, (self.op, self.args))

    @property
    def key(self) -> tuple:
        return self._key

    @property
    def children(self) -> tuple["Formula", ...]:
        return () if self.op == "atom" else self.args

    @property
    def prop(self) -> int:
        assert self.op == "atom"
        return self.args[0]

    def size(self) -> int:
        """Number of nodes in the (n-ary) syntax tree."""
        return self._size

    def props(self) -> frozenset[int]:
        if self.op == "atom":
            return frozenset(self.args)
        out: set[int] = set()
        seen: set[int] = set()
        stack = [self]
        while stack:
            f = stack.pop()
            if id(f) in seen:
                continue
            seen.add(id(f))
            if f.op == "atom":
                out.add(f.args[0])
            else:
                stack.extend(f.args)
        return frozenset(out)

    def __repr__(self) -> str:
        return format_formula(self)


TRUE = Formula("true")
FALSE = Formula("false")
# holds exactly on nonempty remainders; carries the strong-next obligation through progression
NONEMPTY = Formula("until", (TRUE, TRUE))


def Atom(pid: int) -> Formula:
    return Formula("atom", (int(pid),))


def Not(f: Formula) -> Formula:
    return Formula("not", (f,))


def And(*fs: Formula) -> Formula:
    if len(fs) == 1 and not isinstance(fs[0], Formula):
        fs = tuple(fs[0])
    if not fs:
        return TRUE
    if len(fs) == 1:
        return fs[0]
    return Formula("and", tuple(fs))


def Or(*fs: Formula) -> Formula:
    if len(fs) == 1 and not isinstance(fs[0], Formula):
        fs = tuple(fs[0])
    if not fs:
        return FALSE
    if len(fs) == 1:
        return fs[0]
    return Formula("or", tuple(fs))


def Next(f: Formula) -> Formula:
    return Formula("next", (f,))


def Until(a: Formula, b: Formula) -> Formula:
    return Formula("until", (a, b))


def Eventually(f: Formula) -> Formula:
    return Until(TRUE, f)


def Always(f: Formula) -> Formula:
    return Not(Until(TRUE, Not(f)))


def Implies(a: Formula, b: Formula) -> Formula:
    return Or(Not(a), b)


def is_propositional(f: Formula) -> bool:
    if f.op in ("next", "until"):
        return False
    return all(is_propositional(c) for c in f.children)


# ---------------------------------------------------------------------------
# traces

Symbol = frozenset


@dataclass(frozen=True)
class Trace:
    steps: tuple[frozenset, ...]
    alphabet: Alphabet = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(frozenset(s) for s in self.steps))
        if not self.steps:
            raise ValueError("a trace needs at least one step")
        n = len(self.alphabet)
        for s in self.steps:
            for p in s:
                if not 0 <= p < n:
                    raise AlphabetMismatch(f"proposition id {p} not in alphabet")

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def from_names(cls, steps: Sequence[Iterable[str]], alphabet: Alphabet) -> "Trace":
        return cls(tuple(frozenset(alphabet.id(n) for n in s) for s in steps), alphabet)

    def to_lists(self) -> list[list[int]]:
        return [sorted(s) for s in self.steps]


# ---------------------------------------------------------------------------
# concrete syntax

_TOKEN_RE = re.compile(r"\s*(?:(?P<word>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>->|[!&|()]))")


def _tokenize(text: str) -> list[tuple[str, str, int, int]]:
    toks = []
    pos = 0
    line, line_start = 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        # account for skipped newlines before the token
        if m is None:
            ws = re.match(r"\s*", text[pos:]).end()
            if pos + ws >= n:
                break
            bad = pos + ws
            nl = text.count("\n", 0, bad)
            col = bad - (text.rfind("\n", 0, bad) + 1) + 1
            raise LtlSyntaxError(f"unexpected character {text[bad]!r}", nl + 1, col)
        start = m.start("word") if m.group("word") else m.start("op")
        line = text.count("\n", 0, start) + 1
        line_start = text.rfind("\n", 0, start) + 1
        col = start - line_start + 1
        if m.group("word"):
            w = m.group("word")
            if w in ("X", "F", "G", "U"):
                toks.append(("op", w, line, col))
            elif w in ("true", "false"):
                toks.append(("lit", w, line, col))
            elif IDENT_RE.match(w):
                toks.append(("ident", w, line, col))
            else:
                raise LtlSyntaxError(f"invalid identifier {w!r} (atoms start lowercase; operators are X F G U)", line, col)
        else:
            toks.append(("op", m.group("op"), line, col))
        pos = m.end()
    end_line = text.count("\n") + 1
    toks.append(("eof", "", end_line, len(text) - (text.rfind("\n") + 1) + 1))
    return toks


class _Parser:
    def __init__(self, text: str, alphabet: Alphabet):
        self.toks = _tokenize(text)
        self.i = 0
        self.alphabet = alphabet

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def fail(self, msg, tok=None):
        tok = tok or self.peek()
        raise LtlSyntaxError(msg, tok[2], tok[3])

    def parse(self) -> Formula:
        f = self.implication()
        if self.peek()[0] != "eof":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return f

    def implication(self) -> Formula:
        lhs = self.disjunction()
        if self.peek()[1] == "->":
            self.take()
            rhs = self.implication()
            return Implies(lhs, rhs)
        return lhs

    def disjunction(self) -> Formula:
        parts = [self.conjunction()]
        while self.peek()[1] == "|":
            self.take()
            parts.append(self.conjunction())
        return Or(*parts)

    def conjunction(self) -> Formula:
        parts = [self.until()]
        while self.peek()[1] == "&":
            self.take()
            parts.append(self.until())
        return And(*parts)

    def until(self) -> Formula:
        lhs = self.unary()
        if self.peek()[1] == "U":
            self.take()
            return Until(lhs, self.until())
        return lhs

    def unary(self) -> Formula:
        tok = self.peek()
        kind, val = tok[0], tok[1]
        if kind == "op" and val in ("!", "X", "F", "G"):
            self.take()
            sub = self.unary()
            return {"!": Not, "X": Next, "F": Eventually, "G": Always}[val](sub)
        if kind == "op" and val == "(":
            self.take()
            f = self.implication()
            if self.peek()[1] != ")":
                self.fail("expected ')'")
            self.take()
            return f
        if kind == "lit":
            self.take()
            return TRUE if val == "true" else FALSE
        if kind == "ident":
            self.take()
            return Atom(self.alphabet.intern(val))
        if kind == "op" and val == "U":
            self.fail("'U' is an infix operator and needs a left operand")
        if kind == "eof":
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {val!r}")


def parse(text: str, alphabet: Alphabet) -> Formula:
    """Parse one formula; new atom names are interned into ``alphabet``."""
    return _Parser(text, alphabet).parse()


def parse_lines(text: str, alphabet: Alphabet) -> list[Formula]:
    """Batch format: one formula per line, ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        try:
            out.append(parse(body, alphabet))
        except LtlSyntaxError as e:
            raise LtlSyntaxError(str(e).split(" at line")[0], lineno, e.col) from None
    return out


# binding strength for printing; larger binds tighter
_PREC = {"implies": 0, "or": 1, "and": 2, "until": 3, "unary": 4, "leaf": 5}


def _prec(f: Formula) -> int:
    if f.op in ("true", "false", "atom"):
        return _PREC["leaf"]
    if f.op in ("not", "next"):
        return _PREC["unary"]
    return _PREC[f.op]


def format_formula(f: Formula, alphabet: Alphabet | None = None) -> str:
    """Render in the concrete syntax accepted by :func:`parse`."""

    def name(pid):
        return alphabet.name(pid) if alphabet is not None else f"p{pid}"

    def wrap(g: Formula, min_prec: int) -> str:
        s = go(g)
        return f"({s})" if _prec(g) < min_prec else s

    def go(g: Formula) -> str:
        op = g.op
        if op == "true" or op == "false":
            return op
        if op == "atom":
            return name(g.args[0])
        if op == "not":
            c = g.args[0]
            return "!" + wrap(c, _PREC["unary"])
        if op == "next":
            c = g.args[0]
            return "X " + wrap(c, _PREC["unary"])
        if op == "until":
            a, b = g.args
            # right-associative: parenthesize an Until on the left
            return f"{wrap(a, _PREC['until'] + 1)} U {wrap(b, _PREC['until'])}"
        sep = " & " if op == "and" else " | "
        # nested same-op children must keep their grouping
        return sep.join(wrap(c, _prec(g) + 1) for c in g.args)

    return go(f)


# ---------------------------------------------------------------------------
# canonical form


def _mk_not(c: Formula) -> Formula:
    if c is TRUE or c.op == "true":
        return FALSE
    if c.op == "false":
        return TRUE
    if c.op == "not":
        return c.args[0]
    return Formula("not", (c,))


def _complement(c: Formula) -> Formula:
    return c.args[0] if c.op == "not" else Formula("not", (c,))


def _mk_nary(op: str, children: Iterable[Formula]) -> Formula:
    unit, zero = ("true", "false") if op == "and" else ("false", "true")
    dual = "or" if op == "and" else "and"
    items: set[Formula] = set()
    for c in children:
        if c.op == unit:
            continue
        if c.op == zero:
            return TRUE if zero == "true" else FALSE
        if c.op == op:
            items.update(c.args)
        else:
            items.add(c)
    for c in items:
        if _complement(c) in items:
            return TRUE if zero == "true" else FALSE
    # absorption: x & (x | y) = x, x | (x & y) = x
    absorbed = [c for c in items if c.op == dual and any(d in items for d in c.args)]
    for c in absorbed:
        items.discard(c)
    if not items:
        return TRUE if unit == "true" else FALSE
    if len(items) == 1:
        return next(iter(items))
    return Formula(op, tuple(sorted(items)))


def _mk_next(c: Formula) -> Formula:
    # X false is false at every position, including the last one
    return FALSE if c.op == "false" else Formula("next", (c,))


def _mk_until(a: Formula, b: Formula) -> Formula:
    # only rewrites that also hold on the empty continuation are allowed here
    return FALSE if b.op == "false" else Formula("until", (a, b))


def canonicalize(f: Formula) -> Formula:
    """Semantically equivalent canonical form (flattened, sorted, deduplicated)."""
    memo: dict[Formula, Formula] = {}

    def go(g: Formula) -> Formula:
        r = memo.get(g)
        if r is not None:
            return r
        op = g.op
        if op in ("true", "false", "atom"):
            r = g
        elif op == "not":
            r = _mk_not(go(g.args[0]))
        elif op == "and" or op == "or":
            r = _mk_nary(op, [go(c) for c in g.args])
        elif op == "next":
            r = _mk_next(go(g.args[0]))
        else:
            r = _mk_until(go(g.args[0]), go(g.args[1]))
        memo[g] = r
        return r

    return go(f)


# ---------------------------------------------------------------------------
# semantics


def _eval(f: Formula, steps: Sequence[frozenset], memo: dict) -> int:
    # bit i of the result is set iff  w, i |= f
    r = memo.get(f)
    if r is not None:
        return r
    n = len(steps)
    full = (1 << n) - 1
    op = f.op
    if op == "true":
        r = full
    elif op == "false":
        r = 0
    elif op == "atom":
        p = f.args[0]
        r = 0
        for i, s in enumerate(steps):
            if p in s:
                r |= 1 << i
    elif op == "not":
        r = ~_eval(f.args[0], steps, memo) & full
    elif op == "and":
        r = full
        for c in f.args:
            r &= _eval(c, steps, memo)
    elif op == "or":
        r = 0
        for c in f.args:
            r |= _eval(c, steps, memo)
    elif op == "next":
        # position n-1 has no successor, so X is false there
        r = _eval(f.args[0], steps, memo) >> 1
    else:
        a = _eval(f.args[0], steps, memo)
        b = _eval(f.args[1], steps, memo)
        r = 0
        holds = False
        for i in range(n - 1, -1, -1):
            holds = bool(b >> i & 1) or (bool(a >> i & 1) and holds)
            if holds:
                r |= 1 << i
    memo[f] = r
    return r


def check(w: Trace, f: Formula) -> bool:
    """Does ``w, 0 |= f`` hold? Direct evaluation of the satisfaction relation."""
    n = len(w.alphabet)
    for p in f.props():
        if not 0 <= p < n:
            raise AlphabetMismatch(f"proposition id {p} not in the trace alphabet")
    return bool(_eval(f, w.steps, {}) & 1)


def check_steps(steps: Sequence[frozenset], f: Formula) -> bool:
    """:func:`check` on a bare step sequence (no alphabet validation)."""
    return bool(_eval(f, steps, {}) & 1)


def progress(f: Formula, s: frozenset, _memo: dict | None = None) -> Formula:
    """Residual obligation of canonical ``f`` after reading symbol ``s``."""
    memo = {} if _memo is None else _memo

    def go(g: Formula) -> Formula:
        r = memo.get(g)
        if r is not None:
            return r
        op = g.op
        if op == "true" or op == "false":
            r = g
        elif op == "atom":
            r = TRUE if g.args[0] in s else FALSE
        elif op == "not":
            r = _mk_not(go(g.args[0]))
        elif op == "and" or op == "or":
            r = _mk_nary(op, [go(c) for c in g.args])
        elif op == "next":
            # X f needs a next position: the remainder must be nonempty
            r = _mk_nary("and", [g.args[0], NONEMPTY])
        else:
            a, b = g.args
            r = _mk_nary("or", [go(b), _mk_nary("and", [go(a), g])])
        memo[g] = r
        return r

    return go(f)


def accepts_empty(f: Formula) -> bool:
    """Truth value of a residual on the empty continuation."""
    op = f.op
    if op == "true":
        return True
    if op in ("false", "atom", "next", "until"):
        return False
    if op == "not":
        return not accepts_empty(f.args[0])
    if op == "and":
        return all(accepts_empty(c) for c in f.args)
    return any(accepts_empty(c) for c in f.args)


# ---------------------------------------------------------------------------
# random generation


@dataclass(frozen=True)
class ComplexityParams:
    n_v: int
    w_t: int

    def __post_init__(self):
        if self.n_v < 1 or self.w_t < 1:
            raise ValueError("n_v and w_t must be >= 1")

    def size_range(self) -> tuple[int, int]:
        lo = max(1, int(np.ceil(0.8 * self.w_t - 1e-9)))
        hi = max(lo, int(np.floor(1.2 * self.w_t + 1e-9)))
        return lo, hi


PRESETS = {
    "low": ComplexityParams(3, 10),
    "moderate": ComplexityParams(3, 20),
    "high": ComplexityParams(6, 20),
}

# node cost of each generator production after desugaring
_UNARY = (("not", 1), ("next", 1), ("eventually", 2), ("always", 4))
_BINARY = ("and", "or", "until")


def _random_shape(size: int, rng: np.random.Generator):
    """Random tree skeleton with exactly ``size`` desugared nodes; leaves are None."""
    if size == 1:
        return None
    choices = []
    for name, cost in _UNARY:
        if size - cost >= 1:
            choices.append((name, cost))
    if size >= 3:
        choices.extend((b, 1) for b in _BINARY)
    name, cost = choices[rng.integers(len(choices))]
    if name in _BINARY:
        left = int(rng.integers(1, size - 1))
        return (name, _random_shape(left, rng), _random_shape(size - 1 - left, rng))
    return (name, _random_shape(size - cost, rng))


def _count_leaves(shape) -> int:
    if shape is None:
        return 1
    return sum(_count_leaves(c) for c in shape[1:])


def _fill(shape, leaves: list[int]) -> Formula:
    if shape is None:
        return Atom(leaves.pop())
    name = shape[0]
    kids = [_fill(c, leaves) for c in shape[1:]]
    return {
        "not": Not,
        "next": Next,
        "eventually": Eventually,
        "always": Always,
        "and": lambda a, b: And(a, b),
        "or": lambda a, b: Or(a, b),
        "until": Until,
    }[name](*kids)


def random_formula(
    params: ComplexityParams,
    rng: np.random.Generator,
    max_rounds: int = 500,
    nontrivial_len: int = 6,
    max_states: int = 2000,
) -> Formula:
    """Random formula over propositions ``0..n_v-1`` with about ``w_t`` nodes.

    Rejection-sampled until the formula uses all ``n_v`` propositions, its
    desugared size is within 20% of ``w_t`` and it is neither valid nor
    unsatisfiable on traces of length <= ``nontrivial_len``.
    """
    from .automata import CompileError, compile_formula, is_trivial_within

    lo, hi = params.size_range()
    for _ in range(max_rounds):
        size = int(rng.integers(lo, hi + 1))
        shape = _random_shape(size, rng)
        n_leaves = _count_leaves(shape)
        if n_leaves < params.n_v:
            continue
        leaves = list(rng.permutation(params.n_v)) + list(rng.integers(0, params.n_v, n_leaves - params.n_v))
        leaves = [int(x) for x in rng.permutation(leaves)]
        f = _fill(shape, leaves)
        assert f.size() == size
        canon = canonicalize(f)
        if len(canon.props()) != params.n_v:
            continue
        try:
            dfa = compile_formula(canon, props=tuple(range(params.n_v)), max_states=max_states)
        except CompileError:
            continue
        if is_trivial_within(dfa, nontrivial_len):
            continue
        return f
    raise GenerationError(f"no acceptable formula for {params} after {max_rounds} rounds")
