import zlib

import numpy as np
import pytest
from scipy.signal import correlate

from geoclo.nn import (LSTM, Adam, AdamState, Conv2d, ConvTranspose2d, Dense, Graph,
                       GraphStateError, ShapeError, Tensor, adam_step, gradient_check,
                       load_checkpoint, save_checkpoint)
from geoclo.nn import tensor as T

TOL = 1e-4


def _loss(out, w):
    return T.sum(T.mul(out, w))


PRIMITIVES = {
    "add": (lambda p: T.add(p["a"], p["b"]), {"a": (3, 4), "b": (4,)}),
    "sub": (lambda p: T.sub(p["a"], p["b"]), {"a": (3, 4), "b": (3, 1)}),
    "mul": (lambda p: T.mul(p["a"], p["b"]), {"a": (3, 4), "b": (1, 4)}),
    "neg": (lambda p: T.neg(p["a"]), {"a": (5,)}),
    "scale": (lambda p: T.scale(p["a"], 2.5), {"a": (5,)}),
    "square": (lambda p: T.square(p["a"]), {"a": (2, 3)}),
    "matmul": (lambda p: T.matmul(p["a"], p["b"]), {"a": (3, 4), "b": (4, 2)}),
    "tanh": (lambda p: T.tanh(p["a"]), {"a": (6,)}),
    "sigmoid": (lambda p: T.sigmoid(p["a"]), {"a": (6,)}),
    "relu": (lambda p: T.relu(p["a"]), {"a": (6,)}),
    "sum_axis": (lambda p: T.sum(p["a"], axis=1), {"a": (3, 4)}),
    "mean": (lambda p: T.reshape(T.mean(p["a"]), (1,)), {"a": (3, 4)}),
    "reshape": (lambda p: T.reshape(p["a"], (4, 3)), {"a": (3, 4)}),
    "transpose": (lambda p: T.transpose(p["a"], (1, 0, 2)), {"a": (2, 3, 4)}),
    "take": (lambda p: T.take(p["a"], (slice(None), [0, 2, 2])), {"a": (3, 4)}),
    "concat": (lambda p: T.concat([p["a"], p["b"]], axis=1), {"a": (2, 3), "b": (2, 2)}),
    "conv2d": (lambda p: T.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1),
               {"x": (2, 3, 7, 6), "w": (4, 3, 3, 3), "b": (4,)}),
    "conv_transpose2d": (lambda p: T.conv_transpose2d(p["x"], p["w"], p["b"], stride=2,
                                                      padding=1, output_padding=1),
                         {"x": (2, 4, 4, 3), "w": (4, 3, 3, 3), "b": (3,)}),
    "mse": (lambda p: T.reshape(T.mse(p["a"], p["b"]), (1,)), {"a": (3, 4), "b": (3, 4)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params = {k: rng.standard_normal(s) for k, s in shapes.items()}
        out_shape = fn({k: Tensor(v) for k, v in params.items()}).shape
        w = rng.standard_normal(out_shape)
        chk = gradient_check(lambda p: _loss(fn(p), w), params, n_probes=10, rng=rng)
        worst = max(worst, chk.max_rel_error)
    assert worst < TOL


def test_layer_gradients():
    rng = np.random.default_rng(1)
    lstm = LSTM(3, 5, rng)
    dense = Dense(5, 2, rng)
    names = {"Wx": lstm.Wx, "Wh": lstm.Wh, "b": lstm.b, "W": dense.W, "bd": dense.b}
    base = {k: v.data.copy() for k, v in names.items()}
    base["x"] = rng.standard_normal((2, 4, 3))
    w = rng.standard_normal((8, 2))

    def fn(p):
        lstm.Wx, lstm.Wh, lstm.b, dense.W, dense.b = p["Wx"], p["Wh"], p["b"], p["W"], p["bd"]
        h = T.reshape(lstm(p["x"]), (8, 5))
        return _loss(dense(h), w)

    assert gradient_check(fn, base, n_probes=10, rng=rng).max_rel_error < TOL


def test_conv2d_matches_scipy_correlate(rng):
    x = rng.standard_normal((1, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    y = T.conv2d(Tensor(x), Tensor(w)).data
    for o in range(3):
        ref = sum(correlate(x[0, c], w[o, c], mode="valid") for c in range(2))
        np.testing.assert_allclose(y[0, o], ref, atol=1e-12)
    ys = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = sum(correlate(xp[0, c], w[0, c], mode="valid") for c in range(2))[::2, ::2]
    np.testing.assert_allclose(ys[0, 0], ref, atol=1e-12)


def test_conv_transpose_is_adjoint(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    y = rng.standard_normal((2, 4, 4, 4))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
    xt = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1, output_padding=1).data
    assert xt.shape == x.shape
    assert lhs == pytest.approx(np.sum(x * xt), rel=1e-12)


def test_lstm_matches_numpy_reference(rng):
    lstm = LSTM(2, 3, rng)
    xs = rng.standard_normal((1, 4, 2))
    out = lstm(xs).data
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    h, c = np.zeros(3), np.zeros(3)
    for t in range(4):
        z = xs[0, t] @ lstm.Wx.data + h @ lstm.Wh.data + lstm.b.data
        i, f, g, o = sig(z[:3]), sig(z[3:6]), np.tanh(z[6:9]), sig(z[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
        np.testing.assert_allclose(out[0, t], h, atol=1e-14)
    assert np.all(lstm.b.data[3:6] == 1.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        LSTM(2, 3, np.random.default_rng(0))(np.ones((4, 2)))


def test_graph_backward_before_forward():
    p = {"a": Tensor(np.ones(2), requires_grad=True)}
    g = Graph(lambda ps, x: T.sum(T.mul(ps["a"], x)), p)
    with pytest.raises(GraphStateError):
        g.backward()
    g.forward(np.array([2.0, 3.0]))
    assert g.backward()["a"].tolist() == [2.0, 3.0]


def test_gradient_accumulates_over_shared_use():
    a = Tensor(np.array([1.5]), requires_grad=True)
    T.sum(T.mul(a, a)).backward()
    assert a.grad[0] == pytest.approx(3.0)


def test_adam_matches_hand_formula():
    st = AdamState(learning_rate=0.1)
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    p1 = adam_step(st, p, g)
    # first step of bias-corrected Adam moves each entry by lr * sign(g)
    np.testing.assert_allclose(p1["w"], [0.9, -2.1], atol=1e-7)
    p2 = adam_step(st, p1, {"w": np.array([-0.5, 0.25])})
    m = 0.9 * 0.05 + 0.1 * -0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p2["w"][0] == pytest.approx(p1["w"][0] - step, rel=1e-12)


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam({"w": w}, learning_rate=0.1)
    for _ in range(500):
        opt.zero_grad()
        T.sum(T.square(w)).backward()
        opt.step()
    assert np.max(np.abs(w.data)) < 1e-2


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"b.W": rng.standard_normal((3, 2)), "a.b": rng.standard_normal(4)}
    save_checkpoint(tmp_path / "ck", params, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"}
    for k in params:
        assert np.array_equal(back[k], params[k])
    blob = bytearray((tmp_path / "ck.bin").read_bytes())
    blob[0] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "ck")


def test_conv_layers_shapes(rng):
    c = Conv2d(1, 8, 3, rng, stride=2, padding=1)
    d = ConvTranspose2d(8, 1, 3, rng, stride=2, padding=1, output_padding=1)
    y = c(np.ones((2, 1, 16, 16)))
    assert y.shape == (2, 8, 8, 8)
    assert d(y).shape == (2, 1, 16, 16)


def test_lstm_initial_state_gradient():
    rng = np.random.default_rng(4)
    lstm = LSTM(2, 4, rng)
    xs = rng.standard_normal((1, 3, 2))
    w = rng.standard_normal((1, 3, 4))
    base = {"h0": rng.standard_normal((1, 4)), "c0": rng.standard_normal((1, 4))}
    chk = gradient_check(lambda p: _loss(lstm(xs, p["h0"], p["c0"]), w), base,
                         n_probes=10, rng=rng)
    assert chk.max_rel_error < TOL


def test_backward_is_linear(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w1, w2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    grads = []
    for a, b in ((1.0, 0.0), (0.0, 1.0), (2.5, -0.7)):
        x.grad = None
        y = T.tanh(T.mul(x, x))
        T.add(T.scale(_loss(y, w1), a), T.scale(_loss(y, w2), b)).backward()
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], 2.5 * grads[0] - 0.7 * grads[1], atol=1e-10)


def test_five_point_stencil_on_large_loss(rng):
    # a large constant offset leaves the gradient unchanged but makes the
    # two-point difference roundoff-limited at small eps
    a = rng.standard_normal(20)
    fn = lambda p: T.add(T.sum(T.mul(T.tanh(p["a"]), 1e-3)), 1e4)  # noqa: E731
    two = gradient_check(fn, {"a": a}, eps=1e-6, rng=np.random.default_rng(0))
    five = gradient_check(fn, {"a": a}, eps=1e-3, order=4, rng=np.random.default_rng(0))
    assert two.max_rel_error > TOL > five.max_rel_error
    with pytest.raises(ValueError):
        gradient_check(fn, {"a": a}, order=3)
