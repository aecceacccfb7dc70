import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_postfilter import network as nn

from oracles import lstm_step_reference, rnn_step_reference, sig


def as_lists(layer):
    return {name: t.tolist() for name, t in layer.tensors()}


# ---------------------------------------------------------------- sigmoid

def test_sigmoid_values():
    assert nn.sigmoid(0.0) == 0.5
    assert nn.sigmoid(1.0) == pytest.approx(0.7310585786300049, abs=1e-16)
    # 1 - 1e-20 is not representable; sigmoid(50) correctly rounds to 1.0
    assert 1 - nn.sigmoid(50.0) <= 1e-20 and nn.sigmoid(50.0) <= 1
    assert 0 < nn.sigmoid(-50.0) < 1e-20
    assert abs(nn.sigmoid(50.0) + nn.sigmoid(-50.0) - 1) <= 1e-15


def test_sigmoid_high_precision_oracle():
    import mpmath
    mpmath.mp.dps = 40
    for x in (-3.5, -0.25, 1.0, 2.0, 7.0):
        exact = 1 / (1 + mpmath.e ** (-x))
        assert nn.sigmoid(x) == pytest.approx(float(exact), rel=2e-16)


def test_sigmoid_no_overflow():
    with np.errstate(all="raise"):
        out = nn.sigmoid(np.array([-700.0, 700.0]))
    assert np.all(np.isfinite(out))


@given(st.floats(-700, 700))
def test_sigmoid_complement(x):
    assert abs(nn.sigmoid(x) + nn.sigmoid(-x) - 1.0) <= 1e-15


# ---------------------------------------------------------------- steps

def test_lstm_step_zero_fixed_point():
    p = nn.LstmLayerParams.zeros(2, 3)
    state, cache = nn.lstm_step(p, np.zeros(2), nn.LayerState(np.zeros(3), np.zeros(3)))
    for gate in (cache.i, cache.f, cache.o):
        assert np.array_equal(gate, np.full(3, 0.5))
    assert np.array_equal(state.c, np.zeros(3)) and np.array_equal(state.h, np.zeros(3))


def test_lstm_step_hand_case():
    p = nn.LstmLayerParams.zeros(1, 1)
    state, cache = nn.lstm_step(p, np.zeros(1), nn.LayerState(np.zeros(1), np.array([2.0])))
    assert cache.i[0] == cache.f[0] == cache.o[0] == 0.5
    assert state.c[0] == 1.0
    assert state.h[0] == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert state.h[0] == pytest.approx(0.380797, abs=1e-6)


@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_lstm_step_matches_reference(seed, literal):
    rng = np.random.default_rng(seed)
    p = nn.random_params((2, 3, 2), seed).layers[0]
    x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    state, cache = nn.lstm_step(p, x, nn.LayerState(h, c), eq7_literal=literal)
    ref = lstm_step_reference(as_lists(p), x.tolist(), h.tolist(), c.tolist(), literal)
    for name in "ifgoc":
        assert np.allclose(getattr(cache, name), ref[name], rtol=0, atol=1e-12)
    assert np.allclose(state.h, ref["h"], rtol=0, atol=1e-12)


def test_lstm_step_errors():
    p = nn.LstmLayerParams.zeros(2, 3)
    with pytest.raises(ValueError):
        nn.lstm_step(p, np.zeros(3), nn.LayerState(np.zeros(3), np.zeros(3)))
    with pytest.raises(ValueError):
        nn.lstm_step(p, np.zeros(2), nn.LayerState(np.zeros(3)))
    p.W_xi[:] = 1.0
    with pytest.raises(nn.NumericError, match="input_gate"):
        with np.errstate(invalid="ignore"):
            nn.lstm_step(p, np.array([np.inf, -np.inf]), nn.LayerState(np.zeros(3), np.zeros(3)))


def test_rnn_step():
    p = nn.RnnLayerParams.zeros(2, 3)
    assert np.array_equal(nn.rnn_step(p, np.zeros(2), np.zeros(3)), np.full(3, 0.5))
    q = nn.RnnLayerParams(np.ones((1, 1)), np.zeros((1, 1)), np.zeros(1))
    assert nn.rnn_step(q, [1.0], [0.0])[0] == pytest.approx(0.7310585786300049, abs=1e-16)
    with pytest.raises(ValueError):
        nn.rnn_step(p, np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_rnn_step_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p = nn.random_params((2, 3, 2), seed, nn.RNN).layers[0]
    x, h = rng.normal(size=2), rng.normal(size=3)
    ref = rnn_step_reference(p.W_xh.tolist(), p.W_hh.tolist(), p.b_h.tolist(), x.tolist(), h.tolist())
    assert np.allclose(nn.rnn_step(p, x, h), ref, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- forward

def test_dead_network_emits_bias():
    p = nn.zero_params((3, 4, 2))
    ys, _ = nn.forward(p, np.random.default_rng(0).normal(size=(6, 3)))
    assert np.array_equal(ys, np.zeros((6, 2)))
    p.output.b_y[:] = [1.5, -2.0]
    ys, _ = nn.forward(p, np.ones((4, 3)))
    assert np.array_equal(ys, np.tile([1.5, -2.0], (4, 1)))


def test_forward_two_step_hand_trace():
    p = nn.zero_params((1, 1, 1))
    p.layers[0].b_c[:] = 1.0
    p.output.W_hy[:] = 1.0
    ys, _ = nn.forward(p, np.zeros((2, 1)))
    g = math.tanh(1.0)
    c1 = 0.5 * 0.0 + 0.5 * g
    c2 = 0.5 * c1 + 0.5 * g
    assert ys[0, 0] == pytest.approx(0.5 * math.tanh(c1), abs=1e-15)
    assert ys[1, 0] == pytest.approx(0.5 * math.tanh(c2), abs=1e-15)


@pytest.mark.parametrize("kinds", [nn.LSTM, nn.RNN, [nn.LSTM, nn.RNN]])
def test_forward_equals_stepwise_unrolling(kinds):
    dims = (3, 4, 5, 2)
    p = nn.random_params(dims, 11, kinds)
    xs = np.random.default_rng(2).normal(size=(7, 3))
    ys, _ = nn.forward(p, xs)
    states = [nn.LayerState(np.zeros(d), np.zeros(d)) for d in dims[1:-1]]
    for t, x in enumerate(xs):
        v = x
        for k, layer in enumerate(p.layers):
            if layer.kind == nn.LSTM:
                states[k], _ = nn.lstm_step(layer, v, states[k])
            else:
                states[k] = nn.LayerState(nn.rnn_step(layer, v, states[k].h))
            v = states[k].h
        y = p.output.W_hy @ v + p.output.b_y
        assert np.allclose(ys[t], y, rtol=0, atol=1e-12)


def test_stacked_equals_manual_composition():
    p = nn.random_params((3, 4, 5, 2), 3)
    xs = np.random.default_rng(5).normal(size=(6, 3))
    ys, _ = nn.forward(p, xs)
    h1 = nn.lstm_layer_forward(p.layers[0], xs).h
    h2 = nn.lstm_layer_forward(p.layers[1], h1).h
    assert np.array_equal(ys, h2 @ p.output.W_hy.T + p.output.b_y)


def test_forward_is_deterministic():
    p = nn.random_params((3, 4, 5, 2), 3)
    xs = np.random.default_rng(5).normal(size=(20, 3))
    assert nn.forward(p, xs)[0].tobytes() == nn.forward(p, xs)[0].tobytes()


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_gates_bounded_and_cells_finite(seed):
    p = nn.random_params((2, 3, 2), seed, scale=3.0)
    xs = np.random.default_rng(seed).normal(scale=5.0, size=(8, 2))
    _, cache = nn.forward(p, xs)
    lc = cache.layers[0]
    for gate in (lc.i, lc.f, lc.o):
        assert np.all((gate >= 0) & (gate <= 1))
    assert np.all(np.isfinite(lc.c))


def test_forget_gate_carries_cell():
    p = nn.random_params((2, 3, 2), 1, scale=0.1)
    layer = p.layers[0]
    layer.b_f[:] = 50.0
    layer.b_i[:] = -50.0
    rng = np.random.default_rng(0)
    state = nn.LayerState(rng.normal(size=3), rng.normal(size=3))
    for _ in range(10):
        new, _ = nn.lstm_step(layer, rng.normal(size=2), state)
        assert np.all(np.abs(new.c - state.c) < 1e-15)
        state = new


# ---------------------------------------------------------------- backward

def test_zero_upstream_gives_zero_gradients():
    p = nn.random_params((3, 4, 2), 0)
    xs = np.random.default_rng(0).normal(size=(5, 3))
    _, cache = nn.forward(p, xs)
    grads = nn.backward(p, cache, np.zeros((5, 2)))
    assert all(not g.any() for _, g in grads.tensors())


@pytest.mark.parametrize("dims,kinds,literal", [
    ((2, 3, 2), nn.LSTM, False),
    ((2, 3, 2), nn.RNN, False),
    ((3, 4, 2), nn.LSTM, True),
    ((2, 3, 4, 2), [nn.LSTM, nn.RNN], False),
    ((4, 5, 3, 4), nn.LSTM, False),
])
def test_gradients_match_finite_differences(dims, kinds, literal):
    rng = np.random.default_rng(sum(dims))
    T = 7
    p = nn.random_params(dims, 21, kinds, eq7_literal=literal)
    xs, ts = rng.normal(size=(T, dims[0])), rng.normal(size=(T, dims[-1]))
    report = nn.gradient_check(p, xs, ts, epsilon=1e-5)
    assert set(report) == {name for name, _ in p.tensors()}
    worst = max(report, key=report.get)
    assert report[worst] < 1e-4, worst


def test_gradient_additivity():
    p = nn.random_params((2, 3, 2), 4)
    rng = np.random.default_rng(1)
    seqs = [(rng.normal(size=(5, 2)), rng.normal(size=(5, 2))) for _ in range(2)]
    separate = []
    total = p.zeros_like()
    for xs, ts in seqs:
        ys, cache = nn.forward(p, xs)
        _, d = nn.sequence_loss(ys, ts)
        separate.append(nn.backward(p, cache, d))
        nn.backward(p, cache, d, grads=total)
    for (_, a), (_, b), (_, s) in zip(separate[0].tensors(), separate[1].tensors(), total.tensors()):
        assert np.allclose(a + b, s, rtol=0, atol=1e-14)


def test_backward_shape_mismatch():
    p = nn.random_params((2, 3, 2), 4)
    _, cache = nn.forward(p, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        nn.backward(p, cache, np.zeros((3, 2)))


def test_peephole_gradients_nonzero():
    p = nn.random_params((2, 3, 2), 9)
    xs = np.random.default_rng(9).normal(size=(5, 2))
    ys, cache = nn.forward(p, xs)
    grads = nn.backward(p, cache, ys)
    layer = grads.layers[0]
    assert all(np.abs(getattr(layer, n)).max() > 0 for n in ("p_ci", "p_cf", "p_co"))


# ---------------------------------------------------------------- loss

def test_sequence_loss():
    loss, g = nn.sequence_loss([[1.0, 0.0]], [[0.0, 0.0]])
    assert loss == 0.5 and g.tolist() == [[1.0, 0.0]]
    loss, g = nn.sequence_loss([[1.0, 2.0]], [[1.0, 2.0]])
    assert loss == 0.0 and not g.any()
    r = np.random.default_rng(0).normal(size=(4, 3))
    assert nn.sequence_loss(2 * r, np.zeros_like(r))[0] == pytest.approx(4 * nn.sequence_loss(r, 0 * r)[0])
    with pytest.raises(ValueError):
        nn.sequence_loss(np.zeros((2, 3)), np.zeros((3, 3)))


# ---------------------------------------------------------------- init

def test_init_params():
    dims = (5, 6, 4, 6, 5)
    a, b = nn.init_params(dims, 3), nn.init_params(dims, 3)
    for (_, x), (_, y) in zip(a.tensors(), b.tensors()):
        assert x.tobytes() == y.tobytes()
    c = nn.init_params(dims, 4)
    assert any(not np.array_equal(x, y) for (_, x), (_, y) in zip(a.tensors(), c.tensors()))
    for layer in a.layers:
        assert np.array_equal(layer.b_f, np.ones(layer.hidden_size))
        for name in ("b_i", "b_c", "b_o", "p_ci", "p_cf", "p_co"):
            assert not getattr(layer, name).any()
    for name, t in a.tensors():
        if ".W_" in name:
            assert np.abs(t).max() <= nn.INIT_RANGE and t.std() > 0
    assert nn.init_params((39, 200, 160, 200, 39), 0).dims == nn.DEFAULT_DIMS


def test_dims_must_chain():
    layers = [nn.LstmLayerParams.zeros(3, 4), nn.LstmLayerParams.zeros(5, 2)]
    with pytest.raises(ValueError):
        nn.NetworkParams(layers, nn.OutputLayerParams.zeros(2, 3))
    assert nn.parse_dims("8:16:12:16:8") == (8, 16, 12, 16, 8)
    with pytest.raises(ValueError):
        nn.parse_dims("8:x:8")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    p = nn.random_params((3, 4, 2, 3), 1, [nn.LSTM, nn.RNN], eq7_literal=True)
    p.norm = nn.Normalizer(np.arange(3.0), np.ones(3), -np.arange(3.0), 2 * np.ones(3))
    ckpt = nn.Checkpoint(p, 42, nn.config_echo({"lr": 0.01, "epochs": 5}))
    nn.save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = nn.load_checkpoint(tmp_path / "a.ckpt")
    assert back.seed == 42 and back.config == {"epochs": 5, "lr": 0.01}
    assert back.params.kinds == (nn.LSTM, nn.RNN) and back.params.eq7_literal
    for (_, x), (_, y) in zip(p.tensors(), back.params.tensors()):
        assert np.array_equal(x, y)
    assert np.array_equal(back.params.norm.out_std, p.norm.out_std)
    nn.save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage():
    data = nn.encode_checkpoint(nn.Checkpoint(nn.random_params((2, 3, 2), 0)))
    for bad in (b"XXXX" + data[4:], data[:-1], data + b"\0", data[:20]):
        with pytest.raises(nn.CheckpointError):
            nn.decode_checkpoint(bad)
