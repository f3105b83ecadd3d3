"""Tests for the network substrate: forward/backward math, optimizers,
finite-difference agreement and the binary checkpoint container."""

import numpy as np
import pytest

from fwalloc import nn


def _relative_error(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def _straight_line_forward(params, x, hidden="tanh"):
    """Independent two-hidden-layer evaluation written out step by step."""
    act = np.tanh if hidden == "tanh" else lambda z: np.maximum(z, 0.0)
    h1 = act(params.weight(0) @ x + params.bias(0))
    h2 = act(params.weight(1) @ h1 + params.bias(1))
    return params.weight(2) @ h2 + params.bias(2)


def _random_net(rng, widths=(3, 5, 4, 2), **kw):
    spec = nn.MlpSpec(widths, **kw)
    return spec, nn.init_params(spec, rng)


class TestSpecAndParams:
    def test_rejects_single_layer(self):
        with pytest.raises(ValueError):
            nn.MlpSpec((4,))

    def test_bounded_requires_range(self):
        with pytest.raises(ValueError):
            nn.MlpSpec((2, 2), output_activation="bounded")
        with pytest.raises(ValueError):
            nn.MlpSpec((2, 2), output_activation="bounded", output_range=(5.0, -5.0))

    def test_layout_views_alias_flat_values(self):
        spec = nn.MlpSpec((2, 3, 1))
        params = nn.ParamVector.zeros_for(spec)
        params.weight(0)[1, 0] = 7.0
        assert params.values[2] == 7.0
        assert params.size == spec.param_count() == 2 * 3 + 3 + 3 * 1 + 1

    def test_init_respects_fan_in_bound(self):
        rng = np.random.default_rng(0)
        spec = nn.MlpSpec((9, 64, 64, 1))
        params = nn.init_params(spec, rng)
        for layer in range(spec.n_layers):
            bound = 1.0 / np.sqrt(params.layout[layer].in_width)
            assert np.all(np.abs(params.weight(layer)) <= bound)
            assert np.all(np.abs(params.bias(layer)) <= bound)

    def test_init_is_deterministic(self):
        spec = nn.MlpSpec((9, 64, 64, 1))
        a = nn.init_params(spec, np.random.default_rng(123))
        b = nn.init_params(spec, np.random.default_rng(123))
        assert np.array_equal(a.values, b.values)


class TestForward:
    def test_identity_single_layer_passthrough(self):
        # weights = I, bias = 0: the network is the identity map
        spec = nn.MlpSpec((3, 3))
        params = nn.ParamVector.zeros_for(spec)
        params.weight(0)[...] = np.eye(3)
        x = np.array([0.4, -1.2, 2.0])
        assert np.array_equal(nn.forward(spec, params, x), x)

    def test_wrong_input_width_names_layer(self):
        spec = nn.MlpSpec((3, 2))
        params = nn.ParamVector.zeros_for(spec)
        with pytest.raises(nn.ShapeError, match="layer 0"):
            nn.forward(spec, params, np.zeros(4))

    @pytest.mark.parametrize("hidden", ["tanh", "relu"])
    def test_matches_straight_line_evaluation(self, hidden):
        rng = np.random.default_rng(7)
        spec, params = _random_net(rng, (4, 6, 5, 2), hidden_activation=hidden)
        for _ in range(20):
            x = rng.normal(size=4)
            got = nn.forward(spec, params, x)
            want = _straight_line_forward(params, x, hidden)
            assert _relative_error(got, want) < 1e-12

    def test_batched_rows_match_single_calls(self):
        rng = np.random.default_rng(11)
        spec, params = _random_net(rng)
        xs = rng.normal(size=(17, 3))
        batch = nn.forward(spec, params, xs)
        assert batch.shape == (17, 2)
        for i in range(17):
            assert np.allclose(batch[i], nn.forward(spec, params, xs[i]), atol=0)

    def test_bounded_output_stays_in_range(self):
        rng = np.random.default_rng(3)
        spec = nn.MlpSpec(
            (5, 8, 1), output_activation="bounded", output_range=(-5.0, 5.0)
        )
        params = nn.init_params(spec, rng)
        params.values *= 50.0  # drive the squash hard toward saturation
        xs = rng.normal(scale=10.0, size=(200, 5))
        ys = nn.forward(spec, params, xs)
        assert np.all(ys >= -5.0) and np.all(ys <= 5.0)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        spec, params = _random_net(rng)
        x = rng.normal(size=3)
        a = nn.forward(spec, params, x)
        b = nn.forward(spec, params, x)
        assert np.array_equal(a, b)


class TestBackward:
    def test_linear_net_gradient_is_input_outer_product(self):
        # single linear layer, scalar output: dS/dW = og * x, dS/db = og
        spec = nn.MlpSpec((3, 1))
        params = nn.ParamVector.zeros_for(spec)
        params.weight(0)[...] = [[0.5, -1.0, 2.0]]
        x = np.array([1.0, 2.0, 3.0])
        og = np.array([2.5])
        grad, input_grad = nn.backward(spec, params, x, og)
        assert np.allclose(grad.weight(0), 2.5 * x[None, :], atol=0)
        assert np.allclose(grad.bias(0), [2.5], atol=0)
        assert np.allclose(input_grad, 2.5 * params.weight(0)[0], atol=0)

    def test_zero_output_grad_gives_zero_gradients(self):
        rng = np.random.default_rng(9)
        spec, params = _random_net(rng)
        grad, input_grad = nn.backward(spec, params, rng.normal(size=3), np.zeros(2))
        assert np.all(grad.values == 0.0)
        assert np.all(input_grad == 0.0)

    def test_output_grad_shape_mismatch_raises(self):
        rng = np.random.default_rng(2)
        spec, params = _random_net(rng)
        with pytest.raises(nn.ShapeError):
            nn.backward(spec, params, np.zeros(3), np.zeros(3))

    @pytest.mark.parametrize("hidden", ["tanh", "relu"])
    @pytest.mark.parametrize("out", ["identity", "bounded"])
    def test_param_gradient_matches_finite_differences(self, hidden, out):
        rng = np.random.default_rng(hash((hidden, out)) % 2**32)
        kw = {"hidden_activation": hidden, "output_activation": out}
        if out == "bounded":
            kw["output_range"] = (-5.0, 5.0)
        spec, params = _random_net(rng, (4, 6, 5, 1), **kw)
        # keep relu pre-activations away from the kink
        x = rng.normal(size=4) + 0.1
        og = rng.normal(size=1)

        def scalar(values):
            p = nn.ParamVector(values, params.layout)
            return float(np.sum(og * nn.forward(spec, p, x)))

        grad, _ = nn.backward(spec, params, x, og)
        fd = nn.finite_difference_gradient(scalar, params.values, h=1e-5)
        assert _relative_error(grad.values, fd) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        spec, params = _random_net(rng, (5, 8, 8, 1))
        x = rng.normal(size=5)
        og = np.array([1.0])

        def scalar(xv):
            return float(nn.forward(spec, params, xv)[0])

        _, input_grad = nn.backward(spec, params, x, og)
        fd = nn.finite_difference_gradient(scalar, x, h=1e-5)
        assert _relative_error(input_grad, fd) < 1e-4

    def test_batched_gradient_sums_over_rows(self):
        rng = np.random.default_rng(4)
        spec, params = _random_net(rng)
        xs = rng.normal(size=(6, 3))
        ogs = rng.normal(size=(6, 2))
        batch_grad, batch_input = nn.backward(spec, params, xs, ogs)
        total = np.zeros(params.size)
        for i in range(6):
            g, gi = nn.backward(spec, params, xs[i], ogs[i])
            total += g.values
            assert np.allclose(batch_input[i], gi, atol=1e-12)
        assert np.allclose(batch_grad.values, total, atol=1e-9)


class TestOptimizer:
    def test_zero_gradient_changes_nothing(self):
        rng = np.random.default_rng(1)
        spec, params = _random_net(rng)
        before = params.values.copy()
        state = nn.OptimState.for_params(params, mode="adam")
        nn.optimizer_step(params, nn.ParamVector.zeros_for(spec), state)
        assert np.array_equal(params.values, before)
        assert state.step_count == 1

    def test_plain_step_moves_opposite_gradient(self):
        spec = nn.MlpSpec((1, 1))
        params = nn.ParamVector.zeros_for(spec)
        grads = nn.ParamVector.zeros_for(spec)
        grads.values[...] = 1.0
        state = nn.OptimState.for_params(params, learning_rate=0.001, mode="plain")
        nn.optimizer_step(params, grads, state)
        assert np.allclose(params.values, -0.001, atol=0)

    def test_non_finite_gradient_raises(self):
        spec = nn.MlpSpec((1, 1))
        params = nn.ParamVector.zeros_for(spec)
        grads = nn.ParamVector.zeros_for(spec)
        grads.values[0] = np.nan
        state = nn.OptimState.for_params(params)
        with pytest.raises(nn.NonFiniteError):
            nn.optimizer_step(params, grads, state)

    def test_plain_descent_on_quadratic_bowl(self):
        # minimize 0.5 * p^2; gradient is p itself
        spec = nn.MlpSpec((1, 1))
        params = nn.ParamVector.zeros_for(spec)
        params.values[...] = [3.0, -2.0]
        state = nn.OptimState.for_params(params, learning_rate=0.01, mode="plain")
        losses = []
        for _ in range(1000):
            losses.append(0.5 * float(np.sum(params.values**2)))
            grads = nn.ParamVector(params.values.copy(), params.layout)
            nn.optimizer_step(params, grads, state)
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert np.max(np.abs(params.values)) < 0.1

    def test_adam_descends_quadratic_bowl(self):
        spec = nn.MlpSpec((1, 1))
        params = nn.ParamVector.zeros_for(spec)
        params.values[...] = [3.0, -2.0]
        state = nn.OptimState.for_params(params, learning_rate=0.05, mode="adam")
        for _ in range(1000):
            grads = nn.ParamVector(params.values.copy(), params.layout)
            nn.optimizer_step(params, grads, state)
        assert np.max(np.abs(params.values)) < 0.1
        assert state.step_count == 1000

    def test_step_is_deterministic(self):
        def run():
            rng = np.random.default_rng(77)
            spec, params = _random_net(rng)
            state = nn.OptimState.for_params(params, mode="adam")
            for _ in range(25):
                x = rng.normal(size=3)
                og = rng.normal(size=2)
                grads, _ = nn.backward(spec, params, x, og)
                nn.optimizer_step(params, grads, state)
            return params.values.copy()

        assert np.array_equal(run(), run())


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(42)
        spec = nn.MlpSpec(
            (9, 64, 64, 1), output_activation="bounded", output_range=(-5.0, 5.0)
        )
        params = nn.init_params(spec, rng)
        path = tmp_path / "net.fwnn"
        nn.save_params(path, spec, params)
        spec2, params2 = nn.load_params(path)
        assert spec2 == spec
        assert np.array_equal(params2.values, params.values)

    def test_save_twice_byte_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        spec, params = _random_net(rng)
        a, b = tmp_path / "a.fwnn", tmp_path / "b.fwnn"
        nn.save_params(a, spec, params)
        nn.save_params(b, spec, params)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.fwnn"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_params(path)

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(8)
        spec, params = _random_net(rng)
        path = tmp_path / "net.fwnn"
        nn.save_params(path, spec, params)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(nn.CheckpointError, match="payload"):
            nn.load_params(path)
