import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dinetkit import tensor as T
from dinetkit.gradcheck import numeric_grad, rel_error
from dinetkit.optim import AdamState, adam_step, step_decay
from dinetkit.tensor import ConvSpec, Tensor
from oracles import naive_conv, zero_inflate


class TestEffectiveKernelSize:
    @pytest.mark.parametrize("k,r,expected", [(3, 2, 5), (3, 1, 3), (3, 3, 7), (3, 4, 9), (1, 16, 1)])
    def test_values(self, k, r, expected):
        assert T.effective_kernel_size(k, r) == expected

    @pytest.mark.parametrize("k,r", [(0, 1), (3, 0)])
    def test_rejects_nonpositive(self, k, r):
        with pytest.raises(ValueError):
            T.effective_kernel_size(k, r)

    def test_spec_same_padding(self):
        assert ConvSpec(1, 1, 3, r=4).padding == 4
        assert ConvSpec(1, 1, 3, r=4).output_size(8, 8) == (8, 8)


class TestConvForward:
    def test_hand_evaluated_dilated_row(self):
        # x=[1..5], w=[1,1,1], r=2, pad 2: center output = x0 + x2 + x4
        x = np.array([1.0, 2, 3, 4, 5]).reshape(1, 1, 1, 5)
        w = np.ones((1, 1, 1, 3))
        spec = ConvSpec(1, 1, 3, r=2, padding=2, bias=False)
        # a 1 x 3 kernel: pad rows of a 3 x 3 kernel with zeros instead
        w3 = np.zeros((1, 1, 3, 3))
        w3[0, 0, 1] = w[0, 0, 0]
        out = T.conv2d_forward(x, w3, None, spec)
        assert out.shape == (1, 1, 1, 5)
        assert out[0, 0, 0, 2] == 9.0

    def test_zero_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 6))
        spec = ConvSpec(3, 4, 3, r=2, bias=False)
        assert np.all(T.conv2d_forward(x, np.zeros(spec.weight_shape), None, spec) == 0)

    def test_r1_bit_identical_to_naive(self):
        rng = np.random.default_rng(1)
        # integer-valued data: every partial sum is exact, so summation order cannot matter
        x = rng.integers(-8, 9, (1, 1, 8, 8)).astype(np.float64)
        w = rng.integers(-8, 9, (1, 1, 3, 3)).astype(np.float64)
        spec = ConvSpec(1, 1, 3, r=1, bias=False)
        np.testing.assert_array_equal(T.conv2d_forward(x, w, None, spec), naive_conv(x, w, None, 3, 1, 1, 1))

    @pytest.mark.parametrize("r,stride,k", [(1, 1, 3), (2, 1, 3), (3, 2, 3), (1, 2, 1), (2, 1, 5)])
    def test_matches_naive_on_real_data(self, r, stride, k):
        rng = np.random.default_rng(r * 10 + stride)
        x = rng.standard_normal((2, 3, 9, 10))
        spec = ConvSpec(3, 2, k, r=r, stride=stride)
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(2)
        got = T.conv2d_forward(x, w, b, spec)
        want = naive_conv(x, w, b, k, r, stride, spec.padding)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_dilated_equals_zero_inflated_standard(self, r):
        rng = np.random.default_rng(r)
        x = rng.standard_normal((2, 3, 12, 12))
        spec = ConvSpec(3, 4, 3, r=r)
        w = rng.standard_normal(spec.weight_shape)
        wi = zero_inflate(w, r)
        std = ConvSpec(3, 4, spec.k_d, r=1)
        np.testing.assert_allclose(T.conv2d_forward(x, w, None, spec), T.conv2d_forward(x, wi, None, std),
                                   rtol=0, atol=1e-12)

    def test_output_size_formula(self):
        spec = ConvSpec(1, 1, 3, r=2, stride=2, padding=1)
        x = np.zeros((1, 1, 11, 11))
        out = T.conv2d_forward(x, np.zeros(spec.weight_shape), None, spec)
        assert out.shape[-1] == (11 + 2 - 5) // 2 + 1

    def test_shape_errors(self):
        spec = ConvSpec(3, 4, 3)
        with pytest.raises(ValueError, match="channels"):
            T.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros(spec.weight_shape), None, spec)
        with pytest.raises(ValueError, match="weight shape"):
            T.conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros((4, 3, 5, 5)), None, spec)
        with pytest.raises(ValueError):
            ConvSpec(3, 4, 3, r=0)
        with pytest.raises(ValueError):
            ConvSpec(3, 4, 0)

    def test_dilation_adds_no_parameters(self):
        assert ConvSpec(8, 8, 3, r=1).weight_count() == ConvSpec(8, 8, 3, r=16).weight_count() == 8 * 8 * 9


class TestConvBackward:
    def _sum_loss_grads(self, r, dtype=np.float64):
        rng = np.random.default_rng(7 + r)
        x = rng.standard_normal((1, 1, 4, 4))
        spec = ConvSpec(1, 1, 3, r=r)
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(1)
        out = T.conv2d_forward(x, w, b, spec)
        dx, dw, db = T.conv2d_backward(np.ones_like(out), x, w, spec)
        f = lambda: T.conv2d_forward(x, w, b, spec).sum()
        return (dx, numeric_grad(f, x)), (dw, numeric_grad(f, w)), (db, numeric_grad(f, b))

    @pytest.mark.parametrize("r", [1, 2])
    def test_sum_loss_matches_finite_differences(self, r):
        for analytic, numeric in self._sum_loss_grads(r):
            assert rel_error(analytic, numeric) < 1e-6

    def test_zero_output_grad(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 5, 5))
        spec = ConvSpec(2, 3, 3, r=2)
        w = rng.standard_normal(spec.weight_shape)
        dx, dw, db = T.conv2d_backward(np.zeros((2, 3, 5, 5)), x, w, spec)
        assert not dx.any() and not dw.any() and not db.any()

    def test_mismatched_saved_input(self):
        spec = ConvSpec(2, 3, 3)
        with pytest.raises(ValueError):
            T.conv2d_backward(np.zeros((1, 3, 5, 5)), np.zeros((1, 2, 6, 6)), np.zeros(spec.weight_shape), spec)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(5, 9),
           st.integers(1, 3), st.integers(1, 2), st.sampled_from([1, 3]), st.integers(0, 10_000))
    def test_random_shapes_match_finite_differences(self, n, c, o, h, r, stride, k, seed):
        rng = np.random.default_rng(seed)
        spec = ConvSpec(c, o, k, r=r, stride=stride)
        if spec.output_size(h, h)[0] < 1:
            return
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(o)
        out = T.conv2d_forward(x, w, b, spec)
        g = rng.standard_normal(out.shape)
        dx, dw, db = T.conv2d_backward(g, x, w, spec)
        f = lambda: float((T.conv2d_forward(x, w, b, spec) * g).sum())
        assert rel_error(dx, numeric_grad(f, x)) < 1e-4
        assert rel_error(dw, numeric_grad(f, w)) < 1e-4
        assert rel_error(db, numeric_grad(f, b)) < 1e-4


class TestActivation:
    def test_relu(self):
        np.testing.assert_array_equal(T.activation(np.array([-1.0, 0.0, 2.0]), "relu"), [0, 0, 2])

    def test_sigmoid_zero(self):
        assert T.activation(np.array([0.0]), "sigmoid")[0] == 0.5

    def test_sigmoid_range_and_stability(self):
        y = T.activation(np.array([-800.0, -30.0, 30.0, 800.0]), "sigmoid")
        assert np.all(np.isfinite(y)) and np.all(y >= 0) and np.all(y <= 1)

    def test_sigmoid_grad_at_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        T.sigmoid(x).backward()
        assert x.grad.item() == 0.25
        num = numeric_grad(lambda: float(T.activation(x.data, "sigmoid").sum()), x.data)
        assert abs(num.item() - 0.25) < 1e-9

    def test_unknown(self):
        with pytest.raises(ValueError):
            T.activation(np.zeros(1), "tanh")


class TestUpsample:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 3, 4))
        np.testing.assert_array_equal(T.bilinear_upsample(x, 1), x)

    def test_constant(self):
        out = T.bilinear_upsample(np.full((1, 1, 3, 5), 0.7), 4)
        assert out.shape == (1, 1, 12, 20)
        np.testing.assert_allclose(out, 0.7, atol=1e-15)

    def test_hand_evaluated_half_pixel(self):
        # sample positions (j + 0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
        out = T.bilinear_upsample(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]), 2)
        np.testing.assert_allclose(out[0, 0], np.tile([0.0, 0.25, 0.75, 1.0], (4, 1)), atol=1e-15)

    def test_zero_factor(self):
        with pytest.raises(ValueError):
            T.bilinear_upsample(np.zeros((1, 1, 2, 2)), 0)

    def test_backward_is_transpose(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 3, 4))
        g = rng.standard_normal((1, 1, 9, 12))
        lhs = (T.bilinear_upsample(x, 3) * g).sum()
        rhs = (x * T.bilinear_upsample_backward(g, (3, 4), 3)).sum()
        assert math.isclose(lhs, rhs, rel_tol=1e-12)


class TestAutograd:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([[[[1.5, -2.0]]]]), requires_grad=True)
        y = T.relu(x)
        T.add(y, y, x).backward()
        np.testing.assert_array_equal(x.grad, [[[[3.0, 1.0]]]])

    def test_concat_split(self):
        a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = T.concat([a, b])
        g = np.arange(12.0).reshape(1, 3, 2, 2)
        out.backward(g)
        np.testing.assert_array_equal(a.grad, g[:, :2])
        np.testing.assert_array_equal(b.grad, g[:, 2:])

    @pytest.mark.parametrize("op", ["pool", "minmax"])
    def test_pool_and_scaling_gradients(self, op):
        from dinetkit.gradcheck import check_op

        rng = np.random.default_rng(11)
        fn = (lambda x: T.max_pool2d(x, 3, 1)) if op == "pool" else T.minmax_scale
        assert check_op(fn, [rng.standard_normal((2, 2, 5, 5))], rng) < 1e-6

    def test_minmax_range(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 1, 4, 4)))
        y = T.minmax_scale(x).data
        assert np.allclose(y.reshape(3, -1).min(1), 0) and np.allclose(y.reshape(3, -1).max(1), 1)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(p, {"w": np.array([1.0, 1.0])}, state, 0.1)
        before = p["w"].copy()
        m_before = state.m["w"].copy()
        # a zero gradient still moves by the decayed momentum, so use a fresh state
        fresh = AdamState()
        q = {"w": before.copy()}
        adam_step(q, {"w": np.zeros(2)}, fresh, 0.1)
        np.testing.assert_array_equal(q["w"], before)
        adam_step(p, {"w": np.zeros(2)}, state, 0.1)
        assert np.all(np.abs(state.m["w"]) < np.abs(m_before))

    def test_first_step_closed_form(self):
        p = {"w": np.array([0.5])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 1e-3)
        # m_hat = 1, v_hat = 1: step = lr / (1 + eps)
        assert abs(p["w"][0] - (0.5 - 1e-3 / (1 + 1e-8))) < 1e-15

    def test_two_steps_against_scalar_oracle(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        grads = [0.3, -1.7]
        w, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p = {"w": np.array([2.0])}
        state = AdamState()
        for g in grads:
            adam_step(p, {"w": np.array([g])}, state, lr, (b1, b2), eps)
        assert state.step == 2
        assert abs(p["w"][0] - w) < 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(FloatingPointError, match="decoder.weight"):
            adam_step({"decoder.weight": np.zeros(2)}, {"decoder.weight": np.array([np.nan, 0])}, AdamState(), 0.1)

    def test_step_decay(self):
        assert [step_decay(1e-4, e) for e in range(5)] == pytest.approx([1e-4, 1e-4, 1e-5, 1e-5, 1e-6])
