import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dinetkit.gradcheck import numeric_grad, rel_error
from dinetkit.losses import (
    DISTRIBUTION_KINDS,
    NORMALIZATIONS,
    DegenerateInputWarning,
    batch_loss,
    loss_grad,
    loss_value,
    norm_range_bounds,
    normalize,
    nss_loss,
)

# zero or comfortably normal, so rescaling by small powers of two cannot underflow
unit_values = st.one_of(st.just(0.0), st.floats(1e-300, 1))
unit_arrays = arrays(np.float64, st.integers(2, 64), elements=unit_values)


class TestNormalize:
    def test_linear_example(self):
        np.testing.assert_allclose(normalize([0.2, 0.3, 0.5], "linear"), [0.2, 0.3, 0.5], rtol=1e-15)

    def test_softmax_uniform(self):
        np.testing.assert_array_equal(normalize(np.zeros(4), "softmax"), 0.25)

    def test_all_zero_linear_warns(self):
        with pytest.warns(DegenerateInputWarning):
            p = normalize(np.zeros(5), "linear")
        np.testing.assert_array_equal(p, 0.2)

    def test_negative_linear_rejected(self):
        with pytest.raises(ValueError):
            normalize(np.array([0.5, -0.1]), "linear")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            normalize(np.ones(3), "l2")

    @given(unit_arrays, st.sampled_from(["softmax", "linear"]))
    def test_sums_to_one(self, x, mode):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateInputWarning)
            assert abs(normalize(x, mode).sum() - 1) < 1e-9

    def test_linear_keeps_ratios_exactly(self):
        # the sum is a power of two, so every quotient is exact
        x = np.array([0.25, 0.5, 0.125, 0.125])
        p = normalize(x, "linear")
        for i in range(4):
            for j in range(4):
                assert p[i] / p[j] == x[i] / x[j]

    @given(arrays(np.float64, st.integers(2, 64), elements=st.floats(0.01, 1)))
    def test_linear_keeps_ratios(self, x):
        p = normalize(x, "linear")
        np.testing.assert_allclose(p[1:] / p[0], x[1:] / x[0], rtol=4e-16 * 8)

    def test_softmax_changes_ratios(self):
        x = np.array([0.2, 0.4])
        p = normalize(x, "softmax")
        assert abs(p[1] / p[0] - 2.0) > 0.5

    @given(unit_arrays, st.integers(-4, 4))
    def test_linear_scale_invariant_power_of_two(self, x, e):
        if x.sum() == 0:
            return
        np.testing.assert_array_equal(normalize(x * 2.0 ** e, "linear"), normalize(x, "linear"))

    @given(unit_arrays, st.floats(0.01, 100))
    def test_linear_scale_invariant(self, x, c):
        if x.sum() == 0:
            return
        np.testing.assert_allclose(normalize(c * x, "linear"), normalize(x, "linear"), rtol=1e-14, atol=0)

    def test_softmax_scale_witness(self):
        x = np.array([0.0, 1.0])
        assert not np.allclose(normalize(3 * x, "softmax"), normalize(x, "softmax"))


class TestRangeBounds:
    def test_zero_one(self):
        lin = norm_range_bounds(np.array([0.0, 1.0]), "linear")
        soft = norm_range_bounds(np.array([0.0, 1.0]), "softmax")
        assert (lin.a, lin.b) == (0.0, 1.0)
        e = np.e
        assert abs(soft.a - 1 / (1 + e)) < 1e-15 and abs(soft.b - e / (1 + e)) < 1e-15
        assert abs(soft.a - 0.2689) < 1e-4 and abs(soft.b - 0.7311) < 1e-4

    @pytest.mark.parametrize("mode", ["linear", "softmax"])
    def test_constant(self, mode):
        b = norm_range_bounds(np.full(7, 0.4), mode)
        assert abs(b.a - 1 / 7) < 1e-15 and abs(b.b - 1 / 7) < 1e-15

    def test_empty(self):
        with pytest.raises(ValueError):
            norm_range_bounds(np.array([]), "linear")

    def test_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x = rng.random(256)
            x[rng.integers(256)] = 0.0
            x[rng.integers(256)] = 1.0
            if x.min() != 0 or x.max() != 1:
                continue
            lin, soft = norm_range_bounds(x, "linear"), norm_range_bounds(x, "softmax")
            assert soft.a > lin.a == 0 and soft.b <= lin.b

    @settings(max_examples=300)
    @given(arrays(np.float64, st.integers(2, 300), elements=st.floats(0, 1)),
           st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
    def test_softmax_range_inside_linear(self, x, i, j):
        i, j = i % x.size, j % x.size
        if i == j:
            return
        x[i], x[j] = 0.0, 1.0
        lin, soft = norm_range_bounds(x, "linear"), norm_range_bounds(x, "softmax")
        assert lin.a < soft.a and soft.b <= lin.b


class TestLossValues:
    def test_tv_l1_example(self):
        assert loss_value([1, 0], [0, 1], "total_variation", "none") == 2.0

    def test_tv_none_is_l1(self):
        rng = np.random.default_rng(1)
        p, g = rng.random(20), rng.random(20)
        assert loss_value(p, g, "total_variation", "none") == np.abs(p - g).sum()

    def test_kld_uniform(self):
        u = np.full(16, 0.3)
        assert loss_value(u, u, "kld", "linear") == 0

    @pytest.mark.parametrize("kind", DISTRIBUTION_KINDS)
    @pytest.mark.parametrize("mode", NORMALIZATIONS)
    def test_identity(self, kind, mode):
        g = np.random.default_rng(2).uniform(0.05, 1, 30)
        if mode == "none":
            g /= g.sum()
        assert abs(loss_value(g, g, kind, mode)) < 1e-7

    def test_euclidean_identity(self):
        g = np.random.default_rng(2).random(10)
        assert loss_value(g, g, "euclidean") == 0

    def test_bce_minimized_at_target(self):
        rng = np.random.default_rng(4)
        g = rng.uniform(0.05, 0.95, 16)
        assert loss_value(g, g, "bce") > 0
        # zero up to the 1e-8 log floor
        assert np.abs(loss_grad(g, g, "bce")).max() < 1e-7
        for _ in range(20):
            assert loss_value(np.clip(g + rng.normal(0, 0.02, 16), 0.01, 0.99), g, "bce") > loss_value(g, g, "bce")

    @pytest.mark.parametrize("kind", ["kld", "chi_square", "bhattacharyya"])
    def test_zero_bins_finite(self, kind):
        p = np.array([0.0, 0.0, 1.0, 0.5])
        g = np.array([1.0, 0.0, 0.0, 0.5])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            for mode in NORMALIZATIONS:
                assert np.isfinite(loss_value(p, g, kind, mode))
                assert np.all(np.isfinite(loss_grad(p, g, kind, mode)))

    @given(unit_arrays, st.data())
    def test_tv_linear_symmetric_and_bounded(self, p, data):
        g = data.draw(arrays(np.float64, p.size, elements=unit_values))
        if p.sum() == 0 or g.sum() == 0:
            return
        a = loss_value(p, g, "total_variation", "linear")
        b = loss_value(g, p, "total_variation", "linear")
        assert abs(a - b) < 1e-12
        assert 0 <= a <= 2 + 1e-12

    def test_raw_kind_rejects_normalization(self):
        with pytest.raises(ValueError):
            loss_value([0.5], [0.5], "bce", "linear")

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="elements"):
            loss_value([0.1, 0.2], [0.1], "kld", "linear")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            loss_value([0.1], [0.1], "hinge", "none")


class TestGradients:
    @pytest.mark.parametrize("kind", DISTRIBUTION_KINDS)
    @pytest.mark.parametrize("mode", NORMALIZATIONS)
    def test_finite_differences(self, kind, mode):
        rng = np.random.default_rng([DISTRIBUTION_KINDS.index(kind), NORMALIZATIONS.index(mode)])
        p, g = rng.uniform(0.05, 0.95, 32), rng.uniform(0, 1, 32)
        num = numeric_grad(lambda: loss_value(p, g, kind, mode), p)
        assert rel_error(loss_grad(p, g, kind, mode), num) < 1e-5

    @pytest.mark.parametrize("kind", ["bce", "euclidean"])
    def test_raw_kinds(self, kind):
        rng = np.random.default_rng(7)
        p, g = rng.uniform(0.05, 0.95, 32), rng.uniform(0, 1, 32)
        num = numeric_grad(lambda: loss_value(p, g, kind), p)
        assert rel_error(loss_grad(p, g, kind), num) < 1e-5

    def test_nss_loss(self):
        rng = np.random.default_rng(8)
        p = rng.random(32)
        q = (rng.random(32) < 0.25).astype(float)
        q[3] = 1
        num = numeric_grad(lambda: loss_value(p, q, "nss_loss"), p)
        assert rel_error(loss_grad(p, q, "nss_loss"), num) < 1e-5

    def test_tv_tie_subgradient(self):
        g = np.random.default_rng(3).random(9)
        grad = loss_grad(g, g, "total_variation", "linear")
        assert np.all(np.isfinite(grad))
        np.testing.assert_array_equal(grad, 0)

    @pytest.mark.parametrize("kind", DISTRIBUTION_KINDS)
    def test_chain_rule_linear(self, kind):
        """Linear-mode gradient = Jacobian of x/sum(x) applied to the distance
        gradient at the normalized point."""
        rng = np.random.default_rng(4)
        x, gx = rng.uniform(0.1, 1, 16), rng.uniform(0.1, 1, 16)
        s = x.sum()
        p, g = x / s, gx / gx.sum()
        d_none = loss_grad(p, g, kind, "none")
        jac = (np.eye(16) - np.outer(np.ones(16), p)) / s
        np.testing.assert_allclose(loss_grad(x, gx, kind, "linear"), jac @ d_none, rtol=1e-10, atol=1e-13)

    def test_batch_loss_is_mean(self):
        rng = np.random.default_rng(5)
        pred, tgt = rng.random((3, 1, 4, 4)), rng.random((3, 1, 4, 4))
        val, grad = batch_loss(pred, tgt, "kld", "softmax")
        per = [loss_value(pred[i], tgt[i], "kld", "softmax") for i in range(3)]
        assert abs(val - np.mean(per)) < 1e-14
        np.testing.assert_allclose(grad[1].ravel(), loss_grad(pred[1], tgt[1], "kld", "softmax") / 3)


class TestNssLoss:
    def test_constant_map(self):
        assert nss_loss(np.full(9, 0.3), np.eye(3).ravel()) == 0

    def test_peak_at_fixation(self):
        p = np.zeros(25)
        p[12] = 1.0
        q = np.zeros(25)
        q[12] = 1
        assert nss_loss(p, q) < 0

    def test_no_fixations(self):
        with pytest.raises(ValueError):
            nss_loss(np.random.default_rng(0).random(9), np.zeros(9))
