"""Small numpy neural kernel: reverse-mode tensors, GCN and MLP layers, Adam, checkpoints."""

from __future__ import annotations

import ctypes
import ctypes.util
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float32


def keep_heap_warm() -> bool:
    """Stop glibc from unmapping large numpy buffers after every step.

    Training allocates and frees the same multi-megabyte temporaries each
    step; with default settings each one is a fresh mmap whose pages are
    zeroed by the kernel. Results are unchanged. Returns False where
    ``mallopt`` is unavailable (non-glibc platforms).
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    # M_MMAP_THRESHOLD, M_TRIM_THRESHOLD, M_TOP_PAD
    return all(mallopt(opt, val) == 1 for opt, val in ((-3, 1 << 30), (-1, 1 << 30), (-2, 256 << 20)))


class GradError(RuntimeError):
    """Backward requested on something that was not recorded."""


class CheckpointError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """Dense array with an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents: tuple = (), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GradError("tensor is not part of a recorded computation")
        if grad is None:
            if self.data.size != 1:
                raise GradError("backward without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad.astype(self.dtype, copy=False)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _result(data, parents, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, dtype=data.dtype, _parents=parents if rg else (), _backward=backward if rg else None)


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    return _result(
        a.data * b.data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _t(a, b)
    b = _t(b, a)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(m: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch {m.shape} @ {x.shape}")
    mt = m.T.tocsr()
    out = np.asarray(m @ x.data, dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.asarray(mt @ g, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _result(s.astype(x.dtype), (x,), lambda g: (g * s * (1 - s),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_t(x) for x in xs]
    dt = np.result_type(*[x.dtype for x in xs])
    out = np.concatenate([x.data.astype(dt, copy=False) for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out), (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), back)


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared Euclidean distance."""
    d = sub(a, b)
    return tsum(mul(d, d), axis=-1)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw scores (numerically stable form)."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    s = 1.0 / (1.0 + np.exp(-z))
    out = np.asarray(loss.sum(dtype=np.float64) / n, dtype=z.dtype)
    return _result(out, (logits,), lambda g: (g * (s - y) / n,))


def check_finite(t: Tensor, what: str = "output") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# graph convolution


def normalized_adjacency(n: int, arcs: Iterable[tuple[int, int]], dtype=DTYPE) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 over the symmetrized arc set."""
    arcs = np.asarray(arcs if isinstance(arcs, np.ndarray) else list(arcs), dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([arcs[:, 0], arcs[:, 1], np.arange(n)])
    cols = np.concatenate([arcs[:, 1], arcs[:, 0], np.arange(n)])
    key = np.unique(rows * n + cols)  # duplicates collapse to a single unit weight
    rows, cols = key // n, key % n
    dinv = 1.0 / np.sqrt(np.bincount(rows, minlength=n))
    return sp.csr_matrix(((dinv[rows] * dinv[cols]).astype(dtype), (rows, cols)), shape=(n, n))


def _init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


@dataclass
class GcnParams:
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, dtype=DTYPE, activation: str = "relu") -> "GcnParams":
        ws, bs = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            ws.append(Tensor(_init_uniform(rng, d_in, (d_in, d_out), dtype), requires_grad=True))
            bs.append(Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True))
        return cls(ws, bs, activation)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


# a two-layer perceptron shares the same parameter container
MlpParams = GcnParams


def _act(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "linear":
        return x
    raise ValueError(f"unknown activation {name!r}")


def gcn_layers(adj: sp.spmatrix, x: Tensor, p: GcnParams) -> Tensor:
    """Stacked graph convolutions; hidden layers use the activation, the last is linear."""
    if x.shape[1] != p.weights[0].shape[0]:
        raise ValueError(f"feature dim {x.shape[1]} does not match layer input {p.weights[0].shape[0]}")
    h = x
    last = p.n_layers - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        # propagate on the narrower side
        if w.shape[1] <= w.shape[0]:
            h = add(spmm(adj, matmul(h, w)), b)
        else:
            h = add(matmul(spmm(adj, h), w), b)
        if i < last:
            h = _act(h, p.activation)
    return check_finite(h, "gcn output")


def gcn_forward(g, p: GcnParams) -> Tensor:
    """Node embeddings of a single FeatureGraph with constant features."""
    adj = normalized_adjacency(g.n_nodes, g.arcs, dtype=p.weights[0].dtype)
    return gcn_layers(adj, Tensor(g.features, dtype=p.weights[0].dtype), p)


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.weights[0].shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match layer input {p.weights[0].shape[0]}")
    h = x
    last = p.n_layers - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = _act(h, p.activation)
    return check_finite(h, "mlp output")


# optimization


@dataclass
class Adam:
    params: Mapping[str, Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.shape, dtype=np.float64)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g, dtype=np.float64)
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: Adam) -> Adam:
    """Functional wrapper: applies one update in place and returns the state."""
    state.params = params
    state.step(grads)
    return state


# finite differences


def gradcheck(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3
) -> list[float]:
    """Relative error between analytic and central-difference gradients, one per input.

    ``fn`` receives float64 Tensors (requiring grad) and must return a scalar.
    """
    xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*xs)
    out.backward()
    errs = []
    for i, x in enumerate(xs):
        ana = x.grad if x.grad is not None else np.zeros_like(x.data)
        num = np.zeros_like(x.data)
        base = x.data
        for j in range(base.size):
            vals = []
            for sgn in (1, -1):
                pert = [Tensor(y.data) for y in xs]
                d = base.copy()
                d.flat[j] += sgn * eps
                pert[i] = Tensor(d)
                vals.append(float(fn(*pert).data))
            num.flat[j] = (vals[0] - vals[1]) / (2 * eps)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        errs.append(float(np.linalg.norm(ana - num) / denom))
    return errs


# checkpoints

_MAGIC = b"TLCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    out = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t).astype("<f4")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(read(4)) != _MAGIC:
        raise CheckpointError("not a checkpoint")
    version, count = struct.unpack("<II", read(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", read(2))
        name = bytes(read(klen)).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        if rank > 8:
            raise CheckpointError(f"corrupt shape table for {name!r}")
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        if n > len(view):
            raise CheckpointError(f"corrupt shape table for {name!r}")
        out[name] = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out
