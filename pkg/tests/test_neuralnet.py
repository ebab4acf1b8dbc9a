import math

import numpy as np
import pytest

from gridsec.neuralnet import (
    AdamState,
    LstmStack,
    MlpNet,
    TriangularLrSchedule,
    adam_step,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)


def _scalar_lstm(net, seq):
    """Reference evaluation with explicit python loops over every unit."""
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    T = len(seq)
    layer_in = [list(row) for row in seq]
    for k, H in enumerate(net.hidden):
        W, b = net.params[f"W{k}"], net.params[f"b{k}"]
        h = [0.0] * H
        c = [0.0] * H
        out = []
        for t in range(T):
            inp = layer_in[t] + h
            a = [b[j] + sum(inp[r] * W[r, j] for r in range(len(inp))) for j in range(4 * H)]
            new_c, new_h = [], []
            for u in range(H):
                i = sig(a[u]); f = sig(a[H + u]); g = math.tanh(a[2 * H + u]); o = sig(a[3 * H + u])
                cu = f * c[u] + i * g
                new_c.append(cu)
                new_h.append(o * math.tanh(cu))
            c, h = new_c, new_h
            out.append(h)
        layer_in = out
    Wo, bo = net.params["Wout"], net.params["bout"]
    return np.array([[bo[j] + sum(h[r] * Wo[r, j] for r in range(len(h))) for j in range(net.n_out)] for h in layer_in])


def test_lstm_forward_matches_scalar_reference():
    net = LstmStack(3, 2, hidden=(4, 4), seed=5)
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    y, _ = net.forward(x)
    np.testing.assert_allclose(y[0], _scalar_lstm(net, x[0]), atol=1e-12)


def test_zero_weights_give_zero_output():
    for net in (LstmStack(5, 3, hidden=(4, 4)), MlpNet(5, 3, hidden=(6, 6, 4))):
        for p in net.params.values():
            p[...] = 0.0
        x = np.random.default_rng(1).normal(size=(2, 4, 5))
        y, _ = net.forward(x)
        np.testing.assert_array_equal(y, 0.0)


def test_forward_deterministic_and_causal():
    net = LstmStack(3, 2, hidden=(4, 4), seed=2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 3))
    y1, _ = net.forward(x)
    y2, _ = net.forward(np.concatenate([x, x]))
    np.testing.assert_array_equal(y2[0], y2[1])
    np.testing.assert_array_equal(net.forward(x)[0], y1)
    np.testing.assert_allclose(y2[0], y1[0], atol=1e-14)
    x_mod = x.copy()
    x_mod[0, 4:] += 1.0
    y3, _ = net.forward(x_mod)
    np.testing.assert_array_equal(y3[0, :4], y1[0, :4])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        LstmStack(3, 2, hidden=(4,)).forward(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        MlpNet(3, 2, hidden=(4,)).forward(np.zeros((2, 4)))


def _fd_check(net, x, w, step=1e-5, tol=1e-4):
    """Compare analytic gradients of sum(w * y) with central differences."""
    y, cache = net.forward(x)
    grads, dx = net.backward(cache, w)

    def loss():
        return float(np.sum(w * net.forward(x)[0]))

    worst = 0.0
    for name, p in net.params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + step
            lp = loss()
            p[idx] = old - step
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * step)
        err = np.max(np.abs(num - grads[name])) / max(np.max(np.abs(num)), 1e-8)
        worst = max(worst, err)
        assert err < tol, name
    num_x = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        lp = loss()
        x[idx] = old - step
        lm = loss()
        x[idx] = old
        num_x[idx] = (lp - lm) / (2 * step)
    err = np.max(np.abs(num_x - dx)) / max(np.max(np.abs(num_x)), 1e-8)
    assert err < tol, "input"
    return max(worst, err)


def test_lstm_gradients():
    rng = np.random.default_rng(4)
    net = LstmStack(3, 2, hidden=(4, 4), seed=7)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 3, 2))
    _fd_check(net, x, w)


def test_mlp_gradients():
    rng = np.random.default_rng(5)
    net = MlpNet(4, 3, hidden=(5, 5, 3), seed=8)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(6, 3))
    _fd_check(net, x, w)


def test_zero_output_gradient():
    net = LstmStack(3, 2, hidden=(4, 4))
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    _, cache = net.forward(x)
    grads, dx = net.backward(cache, np.zeros((2, 3, 2)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_stale_cache_rejected():
    a = LstmStack(3, 2, hidden=(4,))
    b = LstmStack(3, 2, hidden=(4,))
    _, cache = a.forward(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError, match="stale"):
        b.backward(cache, np.zeros((1, 2, 2)))


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_size():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    # m_hat = v_hat = 1 after bias correction
    assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)


def test_training_determinism():
    def run():
        rng = np.random.default_rng(0)
        net = MlpNet(4, 2, hidden=(8, 8, 4), seed=3)
        st = AdamState()
        X = rng.normal(size=(32, 4))
        Y = X[:, :2] * 0.5
        for _ in range(100):
            y, cache = net.forward(X)
            grads, _ = net.backward(cache, 2 * (y - Y) / y.size)
            adam_step(net.params, grads, st, 1e-2)
        return net.params

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_triangular_schedule():
    s = TriangularLrSchedule(1e-7, 1e-4, 100)
    assert lr_at(s, 0) == pytest.approx(1e-7)
    assert lr_at(s, 50) == pytest.approx(1e-4)
    assert lr_at(s, 100) == pytest.approx(1e-7)
    vals = [lr_at(s, t) for t in range(500)]
    assert min(vals) >= 1e-7 - 1e-20 and max(vals) <= 1e-4 + 1e-20
    # piecewise linear: constant slope on the rising half
    diffs = np.diff(vals[:51])
    np.testing.assert_allclose(diffs, diffs[0], rtol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    net = LstmStack(3, 2, hidden=(4, 4), seed=9)
    path = tmp_path / "m.json"
    save_checkpoint(path, net, train_config={"seed": 9})
    back, doc = load_checkpoint(path)
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()
    assert doc["net"]["kind"] == "lstm" and len(doc["config_hash"]) == 16
