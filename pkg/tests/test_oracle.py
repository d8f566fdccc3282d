"""Tests for the reference implementations themselves: the finite-difference
checker must flag wrong gradients, and the naive computations must satisfy
closed-form identities."""

import math

import numpy as np
import pytest

from emifusion.data import PlantedConfig, PlantedGenerator
from emifusion.oracle import (
    check_gradients,
    finite_diff_grad,
    least_squares_readout,
    naive_attention,
    naive_layer_norm,
    naive_mse,
    naive_pearson,
    naive_softmax,
    relative_error,
)
from emifusion.tensor import NumericError, Tensor, scale, tensor_sum


class TestFiniteDiff:
    def test_quadratic_gradient(self):
        # f(x) = sum(x^2): gradient is exactly 2x up to O(eps^2).
        x = np.array([1.0, -2.0, 0.5])
        grad = finite_diff_grad(lambda v: float((v * v).sum()), x)
        np.testing.assert_allclose(grad, 2.0 * x, atol=1e-7)
        assert np.array_equal(x, [1.0, -2.0, 0.5])  # input restored

    def test_trig_gradient(self):
        x = np.array([0.3, 1.1])
        grad = finite_diff_grad(lambda v: float(np.sin(v).sum()), x)
        np.testing.assert_allclose(grad, np.cos(x), atol=1e-8)

    def test_non_finite_loss_names_coordinate(self):
        x = np.array([0.0, 1.0])

        def f(v):
            with np.errstate(divide="ignore"):
                return float(1.0 / v[0])

        with pytest.raises(NumericError):
            finite_diff_grad(f, x)

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 1.0) == 0.0
        assert abs(relative_error(1.0, 2.0) - 0.5) < 1e-15
        # Tiny absolute differences stay finite thanks to the floor.
        assert relative_error(1e-12, 0.0) <= 1e-4


class TestCheckGradients:
    def quadratic_setup(self):
        rng = np.random.default_rng(31)
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        b = Tensor(rng.standard_normal(1), requires_grad=True)

        def loss_fn():
            return tensor_sum(w * w) + scale(tensor_sum(b * b), 3.0)

        return loss_fn, [("w", w), ("b", b)]

    def test_correct_gradients_pass(self):
        loss_fn, params = self.quadratic_setup()
        report = check_gradients(loss_fn, params, tol=1e-5)
        assert report.passed
        assert {e.name for e in report.entries} == {"w", "b"}
        assert "PASS" in report.format()

    def test_detached_parameter_is_caught(self):
        # A parameter that influences the loss but reports a zero gradient
        # must fail the check: this is the canary for broken backward rules.
        rng = np.random.default_rng(32)
        w = Tensor(rng.standard_normal(3), requires_grad=True)
        hidden = Tensor(w.data, requires_grad=False)

        def loss_fn():
            return tensor_sum(hidden * hidden)

        report = check_gradients(loss_fn, [("w", w)], tol=1e-5)
        assert not report.passed
        assert "FAIL" in report.format()

    def test_coordinate_sampling_budget(self):
        loss_fn, params = self.quadratic_setup()
        report = check_gradients(loss_fn, params, tol=1e-5,
                                 max_coords_per_param=2,
                                 rng=np.random.default_rng(0))
        assert report.passed
        for entry in report.entries:
            assert entry.n_checked <= 2


class TestNaiveAttention:
    def test_softmax_sums_to_one_and_orders(self):
        w = naive_softmax(np.array([1.0, 2.0, 3.0]))
        assert abs(w.sum() - 1.0) < 1e-12
        assert w[0] < w[1] < w[2]

    def test_uniform_scores_give_uniform_weights(self):
        rng = np.random.default_rng(40)
        values = rng.standard_normal((4, 3))
        q = np.zeros(5)
        keys = rng.standard_normal((4, 5))
        out = naive_attention(np.zeros(5), np.zeros((4, 5)), values)
        np.testing.assert_allclose(out, values.mean(axis=0), atol=1e-12)
        del q, keys

    def test_one_hot_mask_selects_single_value(self):
        rng = np.random.default_rng(41)
        keys = rng.standard_normal((5, 4))
        values = rng.standard_normal((5, 3))
        mask = np.array([False, False, True, False, False])
        out = naive_attention(rng.standard_normal(4), keys, values, mask)
        np.testing.assert_allclose(out, values[2], atol=1e-12)

    def test_constant_values_pass_through(self):
        # Whatever the weights, a convex combination of identical values is
        # that value.
        rng = np.random.default_rng(42)
        out = naive_attention(rng.standard_normal(4),
                              rng.standard_normal((6, 4)),
                              np.full((6, 3), 5.0))
        np.testing.assert_allclose(out, np.full(3, 5.0), atol=1e-12)

    def test_layer_norm_output_statistics(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((3, 9)) * 4 + 2
        out = naive_layer_norm(x, np.ones(9), np.zeros(9), 1e-5)
        for row in out:
            assert abs(row.mean()) < 1e-12
            # eps shrinks the variance slightly below 1
            assert abs((row * row).mean() - 1.0) < 1e-4


class TestNaiveMetrics:
    def test_mse_identities(self):
        assert naive_mse(np.ones((2, 3)), np.ones((2, 3))) == 0.0
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        target = np.zeros((2, 2))
        assert abs(naive_mse(pred, target) - (1 + 4 + 9 + 16) / 4) < 1e-12

    def test_pearson_identities(self):
        a = np.arange(8.0)
        assert abs(naive_pearson(a, 5 * a - 3) - 1.0) < 1e-12
        assert math.isnan(naive_pearson(np.ones(4), a[:4]))


class TestLeastSquaresCeiling:
    def gen(self, **kw):
        cfg = PlantedConfig(seed=12, d_audio=12, d_vision=9, d_text=8,
                            audio_len_range=(2, 4),
                            vision_len_range=(2, 3), **kw)
        return PlantedGenerator(cfg)

    def test_recovers_noiseless_signal_exactly(self):
        records = self.gen(sigma=0.0).generate(120, "train")
        report = least_squares_readout(records)
        assert report.mean_rho > 0.9999
        assert report.n_features == 12 + 9 + 8 + 1

    def test_noisy_signal_still_highly_recoverable(self):
        records = self.gen(sigma=0.1).generate(300, "train")
        report = least_squares_readout(records)
        assert report.mean_rho > 0.99

    def test_pure_noise_has_no_signal_out_of_sample(self):
        # With signal_fraction=0 the fit is pure overfitting; use many more
        # samples than features so in-sample rho stays small.
        records = self.gen(sigma=1.0, signal_fraction=0.0).generate(
            2000, "train")
        report = least_squares_readout(records)
        assert abs(report.mean_rho) < 0.3

    def test_handles_missing_modalities(self):
        records = self.gen(missing_prob_audio=0.3).generate(150, "train")
        report = least_squares_readout(records)
        assert report.mean_rho > 0.9

    def test_all_missing_modality_rejected(self):
        records = self.gen(missing_prob_audio=1.0).generate(10, "train")
        with pytest.raises(ValueError, match="modality 0"):
            least_squares_readout(records)

    def test_format_has_per_dim_line(self):
        records = self.gen(sigma=0.0).generate(40, "train")
        text = least_squares_readout(records).format()
        assert "rho per dim" in text
        assert "mean rho" in text
