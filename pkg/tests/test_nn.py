import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from tleaf import nn
from tleaf.graphs import FeatureGraph
from tleaf.nn import Tensor


def _graph(x, arcs, start=0):
    x = np.asarray(x)
    n = x.shape[0]
    return FeatureGraph(np.asarray(x, np.float32), np.asarray(arcs, np.int64).reshape(-1, 2), start, ("n",) * n, np.full(n, -1))


def _identity_params(d):
    return nn.GcnParams([Tensor(np.eye(d, dtype=np.float32))], [Tensor(np.zeros(d, np.float32))], "relu")


def test_single_node_identity_layer_returns_input():
    g = _graph([[1.5, -2.0, 0.25]], [])
    out = nn.gcn_forward(g, _identity_params(3))
    assert np.allclose(out.data, [[1.5, -2.0, 0.25]])


def test_isolated_nodes_are_independent():
    rng = np.random.default_rng(0)
    p = nn.GcnParams.init([4, 6, 3], rng)
    a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    both = nn.gcn_forward(_graph(np.vstack([a, b]), []), p).data
    assert np.allclose(both[0], nn.gcn_forward(_graph(a, []), p).data[0], atol=1e-6)
    assert np.allclose(both[1], nn.gcn_forward(_graph(b, []), p).data[0], atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_gcn_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    arcs = sorted({(int(a), int(b)) for a, b in rng.integers(0, n, size=(2 * n, 2)) if a != b})
    p = nn.GcnParams.init([3, 5, 2], rng, dtype=np.float64)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    out = nn.gcn_forward(_graph(x, arcs), p).data
    arcs_p = [(int(inv[a]), int(inv[b])) for a, b in arcs]
    out_p = nn.gcn_forward(_graph(x[perm], arcs_p), p).data
    assert np.allclose(out_p, out[perm], atol=1e-5)


def test_normalized_adjacency_symmetric_with_self_loops():
    a = nn.normalized_adjacency(3, [(0, 1), (1, 2)]).toarray()
    assert np.allclose(a, a.T)
    deg = np.array([2, 3, 2])
    assert np.isclose(a[0, 1], 1 / np.sqrt(deg[0] * deg[1]))
    assert np.isclose(a[1, 1], 1 / deg[1])


def test_relu_sum_gradient():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    nn.tsum(nn.relu(x)).backward()
    assert np.array_equal(x.grad, [1.0, 0.0])


def test_zero_loss_gives_zero_grads():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = nn.tsum(nn.mul(w, 0.0))
    loss.backward()
    assert np.all(w.grad == 0)


def test_backward_on_unrecorded_value_fails():
    with pytest.raises(nn.GradError):
        Tensor(np.ones(1)).backward()


def test_shape_mismatch_errors():
    p = nn.GcnParams.init([4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.gcn_forward(_graph(np.ones((2, 3)), []), p)


def test_nonfinite_output_rejected():
    p = _identity_params(1)
    with pytest.raises(FloatingPointError):
        nn.gcn_forward(_graph(np.array([[np.inf]]), []), p)


@pytest.mark.parametrize("seed", range(5))
def test_gcn_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n = 5
    arcs = [(i, (i + 1) % n) for i in range(n)] + [(0, 2)]
    adj = nn.normalized_adjacency(n, arcs, dtype=np.float64)
    x = rng.normal(size=(n, 4))
    ws = [rng.normal(size=(4, 6)), rng.normal(size=(6, 3))]
    bs = [rng.normal(size=6) * 0.1, rng.normal(size=3) * 0.1]
    target = rng.normal(size=(n, 3))

    def f(w0, w1, b0, b1):
        h = nn.gcn_layers(adj, Tensor(x), nn.GcnParams([w0, w1], [b0, b1]))
        return nn.tsum(nn.sq_dist(h, Tensor(target)))

    assert max(nn.gradcheck(f, ws + bs)) < 1e-4


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    opt = nn.Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2, np.float32)})
    assert opt.t == 1
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = nn.Adam({"p": p}, lr=0.01)
    opt.step({"p": np.array([1.0])})
    assert np.isclose(p.data[0], -0.01 / (1 + 1e-8))


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        nn.Adam({"p": p}).step({"p": np.zeros(3)})


def test_adam_monotone_on_quadratic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    q = a @ a.T + np.eye(4)
    x = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    opt = nn.Adam({"x": x}, lr=0.01)
    losses = []
    for _ in range(50):
        loss = nn.tsum(nn.mul(x, Tensor(q @ x.data)))  # x^T Q x with Q x as constant halves the gradient
        losses.append(float(x.data @ q @ x.data))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_checkpoint_round_trip():
    rng = np.random.default_rng(0)
    params = {"a.w0": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32), "s": np.float32(2.5) * np.ones(())}
    out = nn.load_checkpoint(nn.save_checkpoint(params))
    assert list(out) == list(params)
    for k in params:
        assert out[k].shape == np.shape(params[k])
        assert np.array_equal(out[k], params[k])


def test_checkpoint_empty_round_trip():
    assert nn.load_checkpoint(nn.save_checkpoint({})) == {}


def test_checkpoint_version_and_truncation():
    blob = bytearray(nn.save_checkpoint({"w": np.ones((2, 2), np.float32)}))
    bad = bytes(blob[:4]) + (99).to_bytes(4, "little") + bytes(blob[8:])
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.load_checkpoint(bad)
    with pytest.raises(nn.CheckpointError, match="truncated"):
        nn.load_checkpoint(bytes(blob[:-3]))


def test_checkpoint_corrupt_shape():
    blob = bytearray(nn.save_checkpoint({"w": np.ones((2, 2), np.float32)}))
    # rank byte sits after magic, header and the 2-byte name length + 1-byte name
    blob[4 + 8 + 2 + 1] = 200
    with pytest.raises(nn.CheckpointError, match="shape"):
        nn.load_checkpoint(bytes(blob))


def test_checkpoint_is_little_endian_f32():
    blob = nn.save_checkpoint({"x": np.array([1.0], np.float32)})
    assert blob.endswith(np.array([1.0], "<f4").tobytes())


def test_spmm_gradient():
    rng = np.random.default_rng(1)
    m = sp.random(4, 3, density=0.6, random_state=1, format="csr")
    x0 = rng.normal(size=(3, 2))
    assert max(nn.gradcheck(lambda x: nn.tsum(nn.mul(nn.spmm(m, x), nn.spmm(m, x))), [x0])) < 1e-6


def test_bce_gradient():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, size=6)
    assert max(nn.gradcheck(lambda z: nn.bce_with_logits(z, y), [rng.normal(size=6)])) < 1e-6


def test_keep_heap_warm_is_harmless():
    assert nn.keep_heap_warm() in (True, False)
    assert np.array_equal(np.zeros((600, 600)).sum(axis=0), np.zeros(600))
