from __future__ import annotations

import math

import numpy as np
import pytest

from sslstm.errors import ShapeError
from sslstm.network import (
    LayerState,
    NetworkDims,
    NetworkParams,
    backward_window,
    forward_window,
    gradient_check,
    init_params,
    lstm_step,
    zero_state,
)
from sslstm.numcore import RngStream


def scalar_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Independent per-lane, per-unit loop reference: returns (L, C) probabilities for one lane."""
    n_steps = x.shape[0]
    h_layers = [[0.0] * layer.n_hidden for layer in net.layers]
    c_layers = [[0.0] * layer.n_hidden for layer in net.layers]
    out = np.zeros((n_steps, net.output.w_hc.shape[0]))
    for t in range(n_steps):
        inp = list(x[t])
        for k, layer in enumerate(net.layers):
            hdim = layer.n_hidden
            h_prev, c_prev = h_layers[k], c_layers[k]
            pre = []
            for r in range(4 * hdim):
                s = layer.bias[r, 0]
                for j, v in enumerate(inp):
                    s += layer.w_x[r, j] * v
                for j, v in enumerate(h_prev):
                    s += layer.w_h[r, j] * v
                pre.append(s)
            h_new, c_new = [], []
            for u in range(hdim):
                f = scalar_sigmoid(pre[u])
                i = scalar_sigmoid(pre[hdim + u])
                g = math.tanh(pre[2 * hdim + u])
                o = scalar_sigmoid(pre[3 * hdim + u])
                c = f * c_prev[u] + i * g
                c_new.append(c)
                h_new.append(o * math.tanh(c))
            h_layers[k], c_layers[k] = h_new, c_new
            inp = h_new
        logits = [net.output.bias_c[c, 0] + sum(net.output.w_hc[c, j] * inp[j] for j in range(len(inp))) for c in range(out.shape[1])]
        m = max(logits)
        e = [math.exp(v - m) for v in logits]
        out[t] = [v / sum(e) for v in e]
    return out


def random_net(seed, d=3, h=5, c=4, layers=2, scale=1.0):
    net = init_params(NetworkDims(d, h, c, layers), seed)
    rng = np.random.default_rng(seed)
    for a in net.arrays():
        a += rng.normal(scale=0.3 * scale, size=a.shape)
    return net


class TestInit:
    def test_deterministic(self):
        dims = NetworkDims(4, 8, 3)
        assert init_params(dims, 5).equals(init_params(dims, 5))
        assert not init_params(dims, 5).equals(init_params(dims, 6))

    def test_forget_bias_is_one(self):
        net = init_params(NetworkDims(4, 8, 3), 0)
        for layer in net.layers:
            np.testing.assert_array_equal(layer.bias[:8], 1.0)
            np.testing.assert_array_equal(layer.bias[8:], 0.0)
        np.testing.assert_array_equal(net.output.bias_c, 0.0)

    def test_glorot_range_and_mean(self):
        net = init_params(NetworkDims(30, 64, 3, 1), 1)
        w = net.layers[0].w_h
        limit = math.sqrt(6.0 / (256 + 64))
        assert np.abs(w).max() <= limit
        assert w.size >= 10_000
        assert abs(w.mean()) <= 0.01 * 2 * limit

    def test_dims(self):
        net = init_params(NetworkDims(6, 16, 4, 3), 0)
        assert net.dims == NetworkDims(6, 16, 4, 3)
        assert net.layers[1].w_x.shape == (64, 16)
        assert net.n_params() == sum(a.size for a in net.arrays())


class TestLstmStep:
    def test_zero_weights_give_zero_state(self):
        net = init_params(NetworkDims(3, 4, 2, 1), 0).zeros_like()
        state, gates = lstm_step(net.layers[0], np.ones((2, 3)), LayerState.zeros(2, 4))
        np.testing.assert_array_equal(state.h, 0.0)
        np.testing.assert_array_equal(state.c, 0.0)
        np.testing.assert_array_equal(gates.f, 0.5)

    def test_saturated_forget_keeps_cell(self):
        layer = init_params(NetworkDims(3, 4, 2, 1), 0).zeros_like().layers[0]
        layer.bias[:4] = 50.0
        c0 = np.array([[0.3, -0.2, 1.5, 0.0]])
        state, _ = lstm_step(layer, np.ones((1, 3)), LayerState(np.zeros((1, 4)), c0.copy()))
        np.testing.assert_allclose(state.c, c0, atol=1e-15)

    def test_matches_scalar_loop(self):
        net = random_net(2, d=3, h=4, c=3, layers=1)
        x = np.random.default_rng(2).normal(size=(1, 3))
        state, _ = lstm_step(net.layers[0], x, LayerState.zeros(1, 4))
        probs, _, _ = forward_window(net, x[:, None, :])
        np.testing.assert_allclose(probs[0], scalar_lstm(net, x), atol=1e-12)
        assert state.h.shape == (1, 4)

    def test_shape_errors(self):
        layer = init_params(NetworkDims(3, 4, 2, 1), 0).layers[0]
        with pytest.raises(ShapeError):
            lstm_step(layer, np.ones((2, 5)), LayerState.zeros(2, 4))
        with pytest.raises(ShapeError):
            lstm_step(layer, np.ones((2, 3)), LayerState.zeros(3, 4))


class TestForward:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_scalar_loop(self, seed):
        net = random_net(seed)
        x = np.random.default_rng(seed + 100).normal(size=(2, 6, 3))
        probs, _, _ = forward_window(net, x)
        for lane in range(2):
            np.testing.assert_allclose(probs[lane], scalar_lstm(net, x[lane]), atol=1e-12, rtol=0)

    def test_split_window_equals_whole(self):
        net = random_net(7)
        x = np.random.default_rng(7).normal(size=(3, 20, 3))
        whole, final_whole, _ = forward_window(net, x)
        for t in (1, 9, 19):
            a, s, _ = forward_window(net, x[:, :t])
            b, final, _ = forward_window(net, x[:, t:], s)
            np.testing.assert_allclose(np.concatenate([a, b], axis=1), whole, atol=1e-12, rtol=0)
            np.testing.assert_allclose(final[-1].h, final_whole[-1].h, atol=1e-12)

    def test_zero_dropout_train_equals_infer(self):
        net = random_net(1)
        x = np.random.default_rng(1).normal(size=(2, 5, 3))
        a, _, _ = forward_window(net, x, mode="infer")
        b, _, _ = forward_window(net, x, mode="train", dropout_p=0.0, rng=RngStream(0))
        assert np.array_equal(a, b)

    def test_zero_params_uniform(self):
        net = random_net(1).zeros_like()
        probs, _, _ = forward_window(net, np.ones((2, 3, 3)))
        np.testing.assert_array_equal(probs, 0.25)

    def test_dropout_masks_shared_over_window(self):
        net = random_net(3)
        x = np.random.default_rng(3).normal(size=(4, 5, 3))
        _, _, cache = forward_window(net, x, mode="train", dropout_p=0.5, rng=RngStream(1, "d"))
        for keep in cache.keep:
            assert keep.shape == (4, 5)
            assert set(np.unique(keep)) <= {0.0, 2.0}

    def test_infer_ignores_dropout(self):
        net = random_net(3)
        x = np.random.default_rng(3).normal(size=(2, 5, 3))
        a, _, _ = forward_window(net, x, mode="infer", dropout_p=0.5, rng=RngStream(1))
        b, _, _ = forward_window(net, x)
        assert np.array_equal(a, b)

    def test_errors(self):
        net = random_net(0)
        with pytest.raises(ShapeError):
            forward_window(net, np.ones((2, 3, 4)))
        with pytest.raises(ValueError):
            forward_window(net, np.ones((2, 3, 3)), mode="train", dropout_p=1.0)
        with pytest.raises(ShapeError):
            forward_window(net, np.ones((2, 3, 3)), zero_state(net, 3))


class TestBackward:
    def test_all_masked(self):
        net = random_net(0)
        x = np.ones((2, 3, 3))
        _, _, cache = forward_window(net, x)
        grads, loss = backward_window(net, cache, np.zeros((2, 3), int), np.zeros((2, 3), bool))
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.arrays())

    def test_ln2(self):
        net = init_params(NetworkDims(1, 2, 2, 1), 0).zeros_like()
        _, _, cache = forward_window(net, np.zeros((1, 1, 1)))
        _, loss = backward_window(net, cache, np.zeros((1, 1), int), np.ones((1, 1), bool))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_masked_steps_do_not_contribute(self):
        net = random_net(4)
        x = np.random.default_rng(4).normal(size=(2, 6, 3))
        y = np.random.default_rng(5).integers(0, 4, size=(2, 6))
        mask = np.ones((2, 6), bool)
        mask[:, 4:] = False
        _, _, cache = forward_window(net, x)
        g_masked, loss_masked = backward_window(net, cache, y, mask)
        _, _, cache_short = forward_window(net, x[:, :4])
        g_short, loss_short = backward_window(net, cache_short, y[:, :4], mask[:, :4])
        assert loss_masked == pytest.approx(loss_short, abs=1e-14)
        for a, b in zip(g_masked.arrays(), g_short.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_cache_mismatch(self):
        net = random_net(0)
        _, _, cache = forward_window(net, np.ones((1, 2, 3)))
        other = random_net(0, h=6)
        with pytest.raises(ShapeError):
            backward_window(other, cache, np.zeros((1, 2), int), np.ones((1, 2), bool))


class TestGradientCheck:
    def instance(self, seed):
        net = init_params(NetworkDims(6, 16, 4, 2), seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 8, 6))
        y = rng.integers(0, 4, size=(3, 8))
        return net, x, y, np.ones((3, 8), bool)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_bptt_matches_finite_differences(self, seed):
        net, x, y, mask = self.instance(seed)
        assert gradient_check(net, x, y, mask) <= 1e-4

    def test_with_state_dropout_and_mask(self):
        net, x, y, mask = self.instance(3)
        mask[1, :3] = False
        state0 = [LayerState(np.full((3, 16), 0.1), np.full((3, 16), -0.2)) for _ in range(2)]
        assert gradient_check(net, x, y, mask, state0=state0, dropout_p=0.3, seed=3) <= 1e-4

    def test_detects_corrupted_w_h(self):
        net, x, y, mask = self.instance(0)

        def corrupt(grads):
            grads.layers[0].w_h *= 1.01

        assert gradient_check(net, x, y, mask, grad_transform=corrupt) > 1e-3

    def test_zero_net_well_defined(self):
        net = init_params(NetworkDims(2, 3, 2, 1), 0).zeros_like()
        x = np.random.default_rng(0).normal(size=(1, 3, 2))
        y = np.array([[0, 1, 0]])
        err = gradient_check(net, x, y, np.ones((1, 3), bool))
        assert np.isfinite(err) and err <= 1e-4
