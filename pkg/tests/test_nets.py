"""Network primitive tests: closed-form fixtures and finite differences."""

import math

import numpy as np
import pytest

from locobox import nets as N


def test_identity_layer_passes_through():
    p = N.MlpParams([np.eye(4)], [np.zeros(4)])
    x = np.array([1.0, -2.0, 0.5, 3.0])
    y, _ = N.mlp_forward(p, x)
    assert np.array_equal(y, x)


def test_elu_values():
    assert N.elu(np.array([0.0]))[0] == 0.0
    assert N.elu(np.array([-1.0]))[0] == pytest.approx(math.exp(-1.0) - 1.0)
    assert N.elu(np.array([2.0]))[0] == 2.0
    assert N.elu_grad(np.array([-1.0]))[0] == pytest.approx(math.exp(-1.0))
    assert N.elu_grad(np.array([3.0]))[0] == 1.0


def test_zero_params_zero_output():
    p = N.MlpParams(
        [np.zeros((3, 8)), np.zeros((8, 2))], [np.zeros(8), np.zeros(2)])
    y, _ = N.mlp_forward(p, np.array([5.0, -1.0, 2.0]))
    assert np.array_equal(y, np.zeros(2))


def test_mlp_dim_mismatch():
    p = N.init_mlp([4, 8, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        N.mlp_forward(p, np.zeros(5))
    with pytest.raises(ValueError):
        N.MlpParams([np.zeros((3, 4)), np.zeros((5, 2))],
                    [np.zeros(4), np.zeros(2)])


def test_mlp_batched_matches_single():
    rng = np.random.default_rng(3)
    p = N.init_mlp([6, 16, 4], rng)
    xs = rng.standard_normal((5, 6))
    ys, _ = N.mlp_forward(p, xs)
    for i in range(5):
        yi, _ = N.mlp_forward(p, xs[i])
        # Matrix-matrix and matrix-vector BLAS paths may differ in the last
        # ulp; equality is only guaranteed for identical call forms.
        assert np.allclose(ys[i], yi, rtol=0, atol=1e-12)


def test_linear_layer_weight_gradient():
    # loss = 0.5 ||y||^2 on y = W^T x -> dW = x y^T.
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 3))
    p = N.MlpParams([w], [np.zeros(3)])
    x = rng.standard_normal(4)
    y, tape = N.mlp_forward(p, x, need_tape=True)
    grads, dx = N.backward(tape, y)
    assert np.allclose(grads[0], np.outer(x, y))
    assert np.allclose(grads[1], y)
    assert np.allclose(dx, w @ y)


def test_zero_adjoint_zero_gradients():
    rng = np.random.default_rng(2)
    p = N.init_mlp([5, 8, 2], rng)
    y, tape = N.mlp_forward(p, rng.standard_normal(5), need_tape=True)
    grads, dx = N.backward(tape, np.zeros_like(y))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(dx == 0.0)


def test_tape_single_use():
    p = N.init_mlp([3, 4, 2], np.random.default_rng(0))
    y, tape = N.mlp_forward(p, np.zeros(3), need_tape=True)
    N.backward(tape, y)
    with pytest.raises(N.TapeError):
        N.backward(tape, y)


def test_lstm_zero_params_closed_form():
    hs = 4
    p = N.LstmParams(np.zeros((3, 4 * hs)), np.zeros((hs, 4 * hs)),
                     np.zeros(4 * hs))
    h0 = np.zeros(hs)
    # h = c = 0: all gates 0.5, candidate 0 -> c' = 0, h' = 0.
    h2, c2, _ = N.lstm_step(p, np.ones(3), h0, np.zeros(hs))
    assert np.allclose(h2, 0.0) and np.allclose(c2, 0.0)
    # c = 1: c' = 0.5, h' = 0.5 tanh(0.5).
    h2, c2, _ = N.lstm_step(p, np.ones(3), h0, np.ones(hs))
    assert np.allclose(c2, 0.5)
    assert np.allclose(h2, 0.5 * math.tanh(0.5))
    assert h2[0] == pytest.approx(0.2311, abs=1e-4)


def test_lstm_hidden_bounded():
    rng = np.random.default_rng(7)
    p = N.init_lstm(5, 8, rng)
    h = np.zeros(8)
    c = np.zeros(8)
    for _ in range(100):
        h, c, _ = N.lstm_step(p, 10.0 * rng.standard_normal(5), h, c)
        assert np.max(np.abs(h)) <= 1.0


def test_lstm_dim_mismatch():
    p = N.init_lstm(5, 8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        N.lstm_step(p, np.zeros(4), np.zeros(8), np.zeros(8))
    with pytest.raises(ValueError):
        N.lstm_step(p, np.zeros(5), np.zeros(7), np.zeros(8))


def test_grad_check_mlp():
    rng = np.random.default_rng(11)
    p = N.init_mlp([5, 16, 12, 3], rng)
    x = rng.standard_normal((4, 5))
    tgt = rng.standard_normal((4, 3))

    def f():
        y, tape = N.mlp_forward(p, x, need_tape=True)
        r = y - tgt
        grads, _ = N.backward(tape, r)
        return 0.5 * float(np.sum(r * r)), grads

    assert N.grad_check(f, p.arrays(), 1e-5) <= 1e-4


def test_grad_check_lstm_unroll():
    rng = np.random.default_rng(13)
    p = N.init_lstm(4, 6, rng)
    xs = rng.standard_normal((8, 4))
    tgt = rng.standard_normal((8, 6))
    h0 = np.zeros(6)
    c0 = np.zeros(6)

    def f():
        hs, _, tape = N.lstm_unroll(p, xs, h0, c0, need_tape=True)
        r = hs - tgt
        grads, _ = N.backward(tape, r)
        return 0.5 * float(np.sum(r * r)), grads

    assert N.grad_check(f, p.arrays(), 1e-5) <= 1e-4


def test_grad_check_constant_function():
    a = np.zeros(3)

    def f():
        return 1.0, [np.zeros(3)]

    assert N.grad_check(f, [a], 1e-5) == 0.0


def test_lstm_unroll_input_adjoint_matches_fd():
    # Input gradients through time, checked by direct perturbation.
    rng = np.random.default_rng(17)
    p = N.init_lstm(3, 5, rng)
    xs = rng.standard_normal((6, 3))
    h0 = np.zeros(5)
    c0 = np.zeros(5)

    def loss(x_in):
        hs, _, _ = N.lstm_unroll(p, x_in, h0, c0)
        return 0.5 * float(np.sum(hs * hs))

    hs, _, tape = N.lstm_unroll(p, xs, h0, c0, need_tape=True)
    _, dxs = N.backward(tape, hs)
    eps = 1e-6
    for t in (0, 3, 5):
        for k in range(3):
            pert = xs.copy(); pert[t, k] += eps
            pert2 = xs.copy(); pert2[t, k] -= eps
            fd = (loss(pert) - loss(pert2)) / (2 * eps)
            assert fd == pytest.approx(dxs[t, k], abs=1e-6, rel=1e-5)


def test_orthogonal_init():
    rng = np.random.default_rng(5)
    q = N.orthogonal((8, 8), rng)
    assert np.allclose(q.T @ q, np.eye(8), atol=1e-12)
    q2 = N.orthogonal((4, 8), rng)
    assert np.allclose(q2 @ q2.T, np.eye(4), atol=1e-12)


def test_forward_deterministic():
    rng = np.random.default_rng(23)
    p = N.init_mlp([7, 16, 3], rng)
    x = rng.standard_normal(7)
    y1, _ = N.mlp_forward(p, x)
    y2, _ = N.mlp_forward(p, x)
    assert np.array_equal(y1, y2)


def test_adam_minimizes_quadratic():
    a = np.array([5.0, -3.0])
    st = N.adam_init([a])
    for _ in range(2000):
        N.adam_update([a], [2.0 * a], st, lr=1e-2)
    assert np.max(np.abs(a)) < 1e-3


def test_adam_grad_clip():
    a = np.zeros(2)
    st = N.adam_init([a])
    norm = N.adam_update([a], [np.array([30.0, 40.0])], st, lr=1e-3,
                         max_grad_norm=1.0)
    assert norm == pytest.approx(50.0)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(31)
    arrays = {"w0": rng.standard_normal((3, 4)), "b0": rng.standard_normal(4)}
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, arrays, {"iteration": 7, "layout": "residual-v1"})
    loaded, meta = N.load_checkpoint(
        path, expect_shapes={"w0": (3, 4), "b0": (4,)})
    assert meta["iteration"] == 7
    assert np.array_equal(loaded["w0"], arrays["w0"])
    assert np.array_equal(loaded["b0"], arrays["b0"])


def test_checkpoint_rejects_mismatch(tmp_path):
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, {"w": np.zeros((2, 2))}, {})
    with pytest.raises(N.CheckpointError, match="mismatch"):
        N.load_checkpoint(path, expect_shapes={"w": (3, 2)})
    with pytest.raises(N.CheckpointError, match="mismatch"):
        N.load_checkpoint(path, expect_shapes={"w": (2, 2), "extra": (1,)})
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(N.CheckpointError, match="magic"):
        N.load_checkpoint(bad)
