"""Tests for the feed-forward nets: forward, backward, freezing, snapshots."""

import numpy as np
import pytest

from ccdkit.encoder import FeedForwardNet, FrozenNetError, Layer, TraceError
from ccdkit.numerics import finite_diff_grad, make_rng, relative_error


def identity_net(d):
    return FeedForwardNet([Layer(np.eye(d), np.zeros(d), "identity")])


def test_identity_layer_passes_input_through():
    net = identity_net(2)
    out = net.forward(np.array([1.0, 2.0]))
    assert np.array_equal(out, [1.0, 2.0])


def test_zero_weight_net_outputs_bias():
    net = FeedForwardNet([Layer(np.zeros((3, 2)), np.array([0.5, -1.0, 2.0]), "identity")])
    out = net.forward(np.array([[7.0, -3.0], [0.0, 0.0]]))
    assert np.allclose(out, np.tile([0.5, -1.0, 2.0], (2, 1)))


def test_forward_matches_recomputed_matrix_products():
    rng = make_rng(5)
    net = FeedForwardNet.build([3, 4, 2], ["tanh", "identity"], rng)
    x = np.array([0.3, -1.2, 0.7])
    h = np.tanh(net.layers[0].W @ x + net.layers[0].b)
    expect = net.layers[1].W @ h + net.layers[1].b
    assert np.allclose(net.forward(x), expect, atol=1e-9)


def test_forward_batch_equals_per_sample():
    rng = make_rng(6)
    net = FeedForwardNet.build([4, 5, 3], ["sigmoid", "tanh"], rng)
    X = rng.normal(size=(6, 4))
    batched = net.forward(X)
    rows = np.stack([net.forward(x) for x in X])
    assert np.allclose(batched, rows, atol=1e-12)


def test_forward_rejects_wrong_input_dim():
    net = identity_net(3)
    with pytest.raises(ValueError):
        net.forward(np.zeros(4))


def test_build_validates_activations():
    rng = make_rng(0)
    with pytest.raises(ValueError):
        FeedForwardNet.build([2, 2], ["tanh", "tanh"], rng)
    with pytest.raises(ValueError):
        FeedForwardNet.build([2, 2], ["swish"], rng)


def test_backward_constant_loss_gives_zero_grads():
    rng = make_rng(7)
    net = FeedForwardNet.build([3, 4, 2], ["tanh", "identity"], rng)
    X = rng.normal(size=(5, 3))
    out, trace = net.forward(X, want_trace=True)
    grads, dX = net.backward(trace, np.zeros_like(out))
    assert all(np.array_equal(g, np.zeros_like(g)) for g in grads)
    assert np.array_equal(dX, np.zeros_like(X))


def test_backward_single_linear_layer_squared_error():
    # L = |Wx + b - y|^2 gives dW = 2(Wx + b - y) x^T.
    rng = make_rng(8)
    W = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    net = FeedForwardNet([Layer(W.copy(), b.copy(), "identity")])
    x = rng.normal(size=3)
    y = rng.normal(size=2)
    out, trace = net.forward(x, want_trace=True)
    resid = out - y
    grads, _ = net.backward(trace, 2.0 * resid)
    assert np.allclose(grads[0], np.outer(2.0 * resid, x), atol=1e-12)
    assert np.allclose(grads[1], 2.0 * resid, atol=1e-12)


def test_backward_matches_finite_differences():
    rng = make_rng(9)
    net = FeedForwardNet.build([3, 6, 4], ["tanh", "tanh"], rng)
    X = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 4))

    out, trace = net.forward(X, want_trace=True)
    grads, _ = net.backward(trace, 2.0 * (out - target))

    for pi, p in enumerate(net.params()):
        def loss_at(flat, pi=pi, p=p):
            saved = p.copy()
            p[...] = flat.reshape(p.shape)
            val = float(np.sum((net.forward(X) - target) ** 2))
            p[...] = saved
            return val

        num = finite_diff_grad(loss_at, p.ravel().copy()).reshape(p.shape)
        assert relative_error(grads[pi], num) <= 1e-4


def test_backward_input_gradient_matches_finite_differences():
    rng = make_rng(10)
    net = FeedForwardNet.build([3, 5, 2], ["sigmoid", "identity"], rng)
    x = rng.normal(size=3)

    out, trace = net.forward(x, want_trace=True)
    _, dx = net.backward(trace, 2.0 * out)
    num = finite_diff_grad(lambda v: float(np.sum(net.forward(v) ** 2)), x)
    assert relative_error(dx.ravel(), num) <= 1e-4


def test_trace_single_use():
    rng = make_rng(11)
    net = FeedForwardNet.build([2, 2], ["tanh"], rng)
    out, trace = net.forward(np.zeros((1, 2)), want_trace=True)
    net.backward(trace, np.zeros_like(out))
    with pytest.raises(TraceError):
        net.backward(trace, np.zeros_like(out))


def test_trace_foreign_net_rejected():
    rng = make_rng(12)
    a = FeedForwardNet.build([2, 2], ["tanh"], rng)
    b = FeedForwardNet.build([2, 2], ["tanh"], rng)
    out, trace = a.forward(np.zeros((1, 2)), want_trace=True)
    with pytest.raises(TraceError):
        b.backward(trace, np.zeros_like(out))


def test_frozen_net_rejects_updates():
    rng = make_rng(13)
    net = FeedForwardNet.build([2, 3], ["tanh"], rng)
    net.freeze()
    with pytest.raises(FrozenNetError):
        net.set_params(net.snapshot())


def test_frozen_forward_is_reproducible():
    rng = make_rng(14)
    net = FeedForwardNet.build([4, 6, 3], ["tanh", "identity"], rng)
    net.freeze()
    X = rng.normal(size=(8, 4))
    assert np.array_equal(net.forward(X), net.forward(X))


def test_set_params_validates_shapes():
    rng = make_rng(15)
    net = FeedForwardNet.build([2, 3], ["tanh"], rng)
    with pytest.raises(ValueError):
        net.set_params([np.zeros((3, 2))])
    with pytest.raises(ValueError):
        net.set_params([np.zeros((2, 2)), np.zeros(3)])


def test_snapshot_is_detached():
    rng = make_rng(16)
    net = FeedForwardNet.build([2, 2], ["identity"], rng)
    snap = net.snapshot()
    net.layers[0].W += 1.0
    assert not np.array_equal(snap[0], net.layers[0].W)


def test_bytes_round_trip_bit_exact():
    rng = make_rng(17)
    net = FeedForwardNet.build([5, 7, 3], ["sigmoid", "tanh"], rng)
    net.freeze()
    clone = FeedForwardNet.from_bytes(net.to_bytes())
    assert clone.frozen
    for p, q in zip(net.params(), clone.params()):
        assert np.array_equal(p, q)
    X = rng.normal(size=(4, 5))
    assert np.array_equal(net.forward(X), clone.forward(X))


def test_from_bytes_rejects_bad_magic():
    with pytest.raises(ValueError):
        FeedForwardNet.from_bytes(b"XXXX" + b"\x00" * 16)


def test_param_accounting():
    rng = make_rng(18)
    net = FeedForwardNet.build([3, 4, 2], ["tanh", "identity"], rng)
    assert net.num_params() == 3 * 4 + 4 + 4 * 2 + 2
    assert net.param_bytes() == net.num_params() * 8
