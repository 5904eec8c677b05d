"""Tensor core: forward fixtures, backward rules, finite-difference agreement."""

import math

import numpy as np
import pytest

from apf import gradcheck
from apf import tensor as tc
from apf.errors import NumericError, ShapeError
from apf.tensor import Parameters, Tensor


class TestConstruction:
    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(NumericError):
            Tensor([[float("inf")]])

    def test_row_major_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.shape == (2, 2)


class TestMatmul:
    def test_identity_times_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(tc.matmul(eye, eye).data, np.eye(2))

    def test_identity_right_operand(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tc.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(tc.matmul(a, b).data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_associativity_on_random_chains(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            a, b, c = (Tensor(rng.uniform(-2, 2, (4, 4))) for _ in range(3))
            left = tc.matmul(tc.matmul(a, b), c).data
            right = tc.matmul(a, tc.matmul(b, c)).data
            np.testing.assert_allclose(left, right, atol=1e-9)


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = tc.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_stable_under_large_inputs(self):
        out = tc.softmax_lastdim(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_closed_form_ln3(self):
        out = tc.softmax_lastdim(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-2, 2, (6, 9)))
        out = tc.softmax_lastdim(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(-2, 2, (4, 5)))
        mask = rng.random((4, 5)) > 0.4
        mask[:, 2] = True
        out = tc.softmax_lastdim(x, mask)
        assert np.all(out.data[~mask] == 0.0)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_fully_masked_row_raises(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(NumericError):
            tc.softmax_lastdim(x, mask)


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        x = Tensor(np.full((2, 4), 7.0))
        out = tc.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)

    def test_two_point_row_hand_value(self):
        out = tc.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_affine_override(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(-2, 2, (3, 5)))
        out = tc.layer_norm(x, Tensor(np.zeros(5)), Tensor(np.full(5, 5.0)))
        np.testing.assert_array_equal(out.data, np.full((3, 5), 5.0))

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-2, 2, (10, 16)))
        out = tc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-10
        np.testing.assert_allclose(out.var(axis=-1), np.ones(10), atol=1e-4)


class TestActivation:
    def test_zero_maps_to_zero(self):
        assert tc.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        np.testing.assert_allclose(tc.gelu(Tensor([10.0])).data, [10.0], atol=1e-9)

    def test_unit_input_closed_form(self):
        # x * Phi(x) at x=1, with Phi the standard normal CDF
        expected = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        np.testing.assert_allclose(tc.gelu(Tensor([1.0])).data, [expected], atol=1e-12)
        assert abs(expected - 0.8413) < 1e-4

    def test_relu_dispatch(self):
        out = tc.activation(Tensor([-1.0, 2.0]), kind="relu")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tc.backward(tc.tensor_sum(p))
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_quadratic_gives_2p(self):
        p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        tc.backward(tc.tensor_sum(tc.mul(p, p)))
        np.testing.assert_allclose(p.grad, 2 * p.data, atol=1e-12)

    def test_repeated_backward_accumulates(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        tc.backward(tc.tensor_sum(p))
        tc.backward(tc.tensor_sum(p))
        np.testing.assert_array_equal(p.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            tc.backward(tc.mul(p, p))

    def test_gradient_shapes_match_parameters(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        tc.backward(tc.tensor_sum(tc.matmul(a, b)))
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_no_grad_suppresses_tape(self):
        p = Tensor([1.0], requires_grad=True)
        with tc.no_grad():
            out = tc.mul(p, p)
        assert not out.requires_grad

    def test_no_grad_is_per_thread(self):
        # overlapping no_grad blocks on worker threads must not be able to
        # leave the tape switched off for anyone else
        from concurrent.futures import ThreadPoolExecutor

        def worker(_):
            with tc.no_grad():
                for _ in range(200):
                    tc.mul(Tensor([1.0]), 2.0)
            return tc.is_grad_enabled()

        with ThreadPoolExecutor(max_workers=8) as pool:
            assert all(pool.map(worker, range(64)))
        assert tc.is_grad_enabled()
        p = Tensor([3.0], requires_grad=True)
        assert tc.mul(p, p).requires_grad


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        p = Tensor(np.array([0.3, -0.7, 1.1]))
        g = tc.finite_diff_grad(lambda t: tc.tensor_sum(t), p)
        np.testing.assert_allclose(g, np.ones(3), atol=1e-9)

    def test_norm_squared(self):
        p = Tensor([1.0, 2.0])
        g = tc.finite_diff_grad(lambda t: tc.tensor_sum(tc.mul(t, t)), p)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_softmax_cross_entropy_matches_analytic(self):
        # loss = -log softmax(x)[k]; analytic gradient is softmax(x) - onehot(k)
        x = Tensor([0.2, -1.3, 0.7, 0.1])
        k = 2

        def fd_loss(t):
            sm = np.exp(t.data - t.data.max())
            sm = sm / sm.sum()
            return -math.log(sm[k])

        numeric = tc.finite_diff_grad(fd_loss, x)
        sm = np.exp(x.data - x.data.max())
        sm = sm / sm.sum()
        analytic = sm.copy()
        analytic[k] -= 1.0
        assert gradcheck.rel_error(analytic, numeric) < 1e-4


class TestGradientSweep:
    def test_every_op_matches_finite_differences(self):
        results = gradcheck.suite_tensor_ops(seeds=20)
        failing = [r for r in results if not r.ok]
        assert not failing, f"ops over bound: {[(r.name, r.worst) for r in failing]}"

    def test_sweep_covers_all_ops(self):
        names = {r.name.removeprefix("tensor.") for r in gradcheck.suite_tensor_ops(seeds=1)}
        expected = {
            "add", "sub", "mul", "div", "neg", "matmul", "bmm", "sum_axis", "mean",
            "transpose", "reshape", "concat", "take", "relu", "gelu", "sigmoid",
            "softplus", "absolute", "pow_const", "clamp", "minimum", "maximum",
            "softmax_lastdim", "softmax_lastdim_masked", "layer_norm", "gather_time",
            "window_dots", "window_mix", "cosine_weights", "shift_time",
            "shift_channels", "shift_cols",
        }
        assert names == expected


class TestParameters:
    def test_named_leaves_accumulate(self):
        params = Parameters()
        w = params.add("w", np.array([1.0, 2.0]))
        tc.backward(tc.tensor_sum(tc.mul(w, w)))
        np.testing.assert_allclose(w.grad, [2.0, 4.0])
        params.zero_grad()
        assert w.grad is None

    def test_state_dict_round_trip(self):
        params = Parameters()
        params.add("a", np.array([1.0, 2.0]))
        params.add("b", np.eye(2))
        state = params.state_dict()
        params["a"].data[:] = 0.0
        params.load_state_dict(state)
        np.testing.assert_array_equal(params["a"].data, [1.0, 2.0])


class TestShifts:
    def test_shift_cols_right(self):
        x = Tensor(np.arange(8.0).reshape(2, 4))
        out = tc.shift_cols(x, 1)
        np.testing.assert_array_equal(out.data, [[0, 0, 1, 2], [0, 4, 5, 6]])

    def test_shift_time_matches_explicit_remap(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (2, 6, 4))
        off = np.array([-1, 0, 1, 2])
        out = tc.shift_time(Tensor(x), off).data
        expected = np.zeros_like(x)
        for h in range(2):
            for t in range(6):
                for d in range(4):
                    src = t - off[d]
                    if 0 <= src < 6:
                        expected[h, t, d] = x[h, src, d]
        np.testing.assert_array_equal(out, expected)
