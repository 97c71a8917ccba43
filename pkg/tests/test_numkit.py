"""Numeric core: forward passes, reverse-mode gradients, flattening."""

import numpy as np
import pytest

from o2olab.errors import NumericError, ShapeError
from o2olab.numkit import (
    EXP_CLAMP_HI,
    EXP_CLAMP_LO,
    MlpSpec,
    ParamVector,
    finite_diff_check,
    flatten,
    init_params,
    mlp_forward,
    mlp_grad,
    mlp_grad_batch,
    mlp_second_grad,
    unflatten,
)


def reference_forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Independent loop-based forward pass used as an oracle."""
    layers = unflatten(params)
    spec = params.spec
    h = np.array(x, dtype=np.float64)
    for idx, (w, b) in enumerate(layers):
        z = np.array([float(row @ h) + bv for row, bv in zip(w, b)])
        last = idx == len(layers) - 1
        kind = spec.output_transform if last else spec.activation
        if kind == "relu":
            h = np.maximum(z, 0.0)
        elif kind in ("tanh", "tanh_squash"):
            h = np.tanh(z)
        elif kind == "identity":
            h = z
        elif kind == "exp":
            h = np.exp(np.clip(z, EXP_CLAMP_LO, EXP_CLAMP_HI))
    return h


def linear_1_1(weight, bias):
    spec = MlpSpec((1, 1))
    return ParamVector(spec, np.array([weight, bias]))


class TestSpecAndFlattening:
    def test_spec_validation(self):
        with pytest.raises(ShapeError):
            MlpSpec((4,))
        with pytest.raises(ShapeError):
            MlpSpec((4, 0, 2))
        with pytest.raises(ValueError):
            MlpSpec((4, 2), activation="sigmoid")
        with pytest.raises(ValueError):
            MlpSpec((4, 2), output_transform="softmax")

    def test_param_count(self):
        spec = MlpSpec((4, 8, 2))
        assert spec.param_count == 4 * 8 + 8 + 8 * 2 + 2

    def test_flatten_round_trip_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            depth = rng.integers(2, 5)
            widths = tuple(int(w) for w in rng.integers(1, 7, size=depth))
            spec = MlpSpec(widths)
            params = init_params(spec, rng)
            rebuilt = flatten(spec, unflatten(params))
            assert np.array_equal(rebuilt.values, params.values)

    def test_wrong_length_rejected(self):
        spec = MlpSpec((2, 2))
        with pytest.raises(ShapeError):
            ParamVector(spec, np.zeros(5))

    def test_init_weight_range(self):
        rng = np.random.default_rng(1)
        spec = MlpSpec((10, 20, 5))
        params = init_params(spec, rng)
        for (w, b), (in_w, out_w) in zip(unflatten(params), [(10, 20), (20, 5)]):
            bound = np.sqrt(6.0 / (in_w + out_w))
            assert np.all(np.abs(w) <= bound)
            assert np.all(b == 0.0)


class TestForward:
    def test_zero_network_gives_zero(self):
        spec = MlpSpec((3, 4, 2), activation="relu")
        params = ParamVector(spec, np.zeros(spec.param_count))
        out = mlp_forward(params, np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(out, np.zeros(2))

    def test_affine_1_1(self):
        out = mlp_forward(linear_1_1(2.0, 1.0), np.array([3.0]))
        assert out[0] == 7.0

    def test_matches_independent_forward(self):
        rng = np.random.default_rng(2)
        for activation in ("relu", "tanh"):
            for transform in ("identity", "tanh_squash", "exp"):
                spec = MlpSpec((4, 8, 2), activation=activation, output_transform=transform)
                params = init_params(spec, rng)
                x = rng.standard_normal(4)
                got = mlp_forward(params, x)
                want = reference_forward(params, x)
                assert np.max(np.abs(got - want)) <= 1e-12

    def test_pure_function_bit_identical(self):
        rng = np.random.default_rng(3)
        spec = MlpSpec((5, 7, 3), activation="tanh")
        params = init_params(spec, rng)
        x = rng.standard_normal(5)
        assert np.array_equal(mlp_forward(params, x), mlp_forward(params, x))

    def test_dimension_mismatch_rejected(self):
        spec = MlpSpec((3, 2))
        params = ParamVector(spec, np.zeros(spec.param_count))
        with pytest.raises(ShapeError):
            mlp_forward(params, np.zeros(4))

    def test_exp_transform_clamps(self):
        spec = MlpSpec((1, 1), output_transform="exp")
        params = ParamVector(spec, np.array([1.0, 0.0]))
        assert mlp_forward(params, np.array([100.0]))[0] == np.exp(EXP_CLAMP_HI)
        assert mlp_forward(params, np.array([-100.0]))[0] == np.exp(EXP_CLAMP_LO)

    def test_non_finite_intermediate_names_layer(self):
        spec = MlpSpec((1, 1))
        params = ParamVector(spec, np.array([1e308, 1e308]))
        with pytest.raises(NumericError, match="layer 0"):
            mlp_forward(params, np.array([10.0]))


class TestGradients:
    def test_affine_1_1_grads(self):
        grads, gin = mlp_grad(linear_1_1(2.0, 1.0), np.array([3.0]), np.array([1.0]))
        assert gin[0] == 2.0
        assert grads.values[0] == 3.0  # d/dw
        assert grads.values[1] == 1.0  # d/db

    def test_tanh_net_input_grad_at_zero(self):
        # tanh'(0) = 1, so the input gradient is the product of the
        # weight matrices.
        rng = np.random.default_rng(4)
        spec = MlpSpec((3, 4, 2), activation="tanh")
        params = init_params(spec, rng)
        layers = unflatten(params)
        upstream = rng.standard_normal(2)
        _, gin = mlp_grad(params, np.zeros(3), upstream)
        want = upstream @ layers[1][0] @ layers[0][0]
        assert np.max(np.abs(gin - want)) <= 1e-12

    def test_random_nets_match_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            depth = int(rng.integers(2, 5))
            widths = tuple(int(w) for w in rng.integers(2, 6, size=depth))
            spec = MlpSpec(widths, activation="tanh")
            params = init_params(spec, rng)
            x = rng.standard_normal(widths[0])
            u = rng.standard_normal(widths[-1])

            def f(pv):
                g, _ = mlp_grad(pv, x, u)
                return float(u @ mlp_forward(pv, x)), g.values

            assert finite_diff_check(f, params, 1e-5, rng=rng, max_coords=64) <= 1e-5

    def test_batched_grads_sum_over_batch(self):
        rng = np.random.default_rng(6)
        spec = MlpSpec((3, 4, 2), activation="tanh")
        params = init_params(spec, rng)
        xs = rng.standard_normal((4, 3))
        us = rng.standard_normal((4, 2))
        flat, gins = mlp_grad_batch(params, xs, us)
        single = sum(mlp_grad(params, x, u)[0].values for x, u in zip(xs, us))
        assert np.max(np.abs(flat - single)) <= 1e-12
        for i in range(4):
            _, gi = mlp_grad(params, xs[i], us[i])
            assert np.max(np.abs(gins[i] - gi)) <= 1e-12


class TestSecondGrad:
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_matches_finite_differences(self, activation):
        rng = np.random.default_rng(7)
        spec = MlpSpec((4, 6, 1), activation=activation)
        params = init_params(spec, rng)
        x = rng.standard_normal((3, 4))
        u = np.ones((3, 1))
        v = rng.standard_normal((3, 4))

        def f(pv):
            _, gins = mlp_grad_batch(pv, x, u)
            val = float(np.sum(gins * v))
            _, flat = mlp_second_grad(pv, x, u, v)
            return val, flat

        assert finite_diff_check(f, params, 1e-5, rng=rng) <= 1e-5

    def test_jvp_value_matches_vjp(self):
        rng = np.random.default_rng(8)
        spec = MlpSpec((4, 5, 2), activation="tanh")
        params = init_params(spec, rng)
        x = rng.standard_normal((2, 4))
        u = rng.standard_normal((2, 2))
        v = rng.standard_normal((2, 4))
        ydot, _ = mlp_second_grad(params, x, u, v)
        _, gins = mlp_grad_batch(params, x, u)
        assert abs(float(np.sum(u * ydot)) - float(np.sum(gins * v))) <= 1e-10

    def test_linear_net_param_grad(self):
        # For f(x) = w x + b, d/dw <1, J v> = v and d/db = 0.
        params = linear_1_1(2.0, 1.0)
        _, flat = mlp_second_grad(
            params, np.array([[3.0]]), np.array([[1.0]]), np.array([[0.7]])
        )
        assert np.allclose(flat, [0.7, 0.0], atol=1e-15)


class TestFiniteDiffCheck:
    def test_quadratic_near_exact(self):
        spec = MlpSpec((4, 4))
        rng = np.random.default_rng(9)
        at = ParamVector(spec, rng.standard_normal(spec.param_count))

        def f(pv):
            return float(pv.values @ pv.values), 2.0 * pv.values

        assert finite_diff_check(f, at, 1e-5) <= 1e-9

    def test_constant_function_zero_error(self):
        spec = MlpSpec((2, 2))
        at = ParamVector(spec, np.zeros(spec.param_count))

        def f(pv):
            return 1.0, np.zeros(pv.values.size)

        assert finite_diff_check(f, at, 1e-5) == 0.0

    def test_bad_step_rejected(self):
        spec = MlpSpec((2, 2))
        at = ParamVector(spec, np.zeros(spec.param_count))
        with pytest.raises(ValueError):
            finite_diff_check(lambda pv: (0.0, np.zeros(pv.values.size)), at, 0.0)

    def test_samples_subset_on_large_vectors(self):
        # Roundoff in f grows with the parameter count, so the sampled
        # variant gets a looser (still tiny) bound.
        spec = MlpSpec((40, 40))
        rng = np.random.default_rng(10)
        at = ParamVector(spec, rng.standard_normal(spec.param_count))

        def f(pv):
            return float(pv.values @ pv.values), 2.0 * pv.values

        assert finite_diff_check(f, at, 1e-5, rng=rng, max_coords=64) <= 1e-7
