"""Outcome model tests: OLS solutions, forest behavior, treatment regression."""

import numpy as np
import pytest

from dlw import outcome_models as om
from dlw.datagen import DgpConfig, gen_setting
from dlw.outcome_models import OutcomeModelError, att_ols_regression, fit_forest, fit_ols


class TestOls:
    def test_exact_linear_data(self):
        x = np.linspace(-3, 3, 40)[:, None]
        model = fit_ols(x, 2 * x[:, 0] + 3)
        assert model.coefficients[0] == pytest.approx(3.0, abs=1e-8)
        assert model.coefficients[1] == pytest.approx(2.0, abs=1e-8)

    def test_noisy_slope_within_sampling_error(self):
        rng = np.random.default_rng(0)
        n = 4000
        x = rng.standard_normal((n, 1))
        y = x[:, 0] + rng.standard_normal(n)
        model = fit_ols(x, y)
        assert abs(model.coefficients[1] - 1.0) < 3 / np.sqrt(n)

    def test_constant_target(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((60, 2))
        model = fit_ols(x, np.full(60, 4.0))
        assert model.coefficients[0] == pytest.approx(4.0, abs=1e-9)
        assert np.all(np.abs(model.coefficients[1:]) < 1e-9)

    def test_residuals_orthogonal_to_design(self):
        rng = np.random.default_rng(2)
        n = 500
        X = rng.standard_normal((n, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(n)
        model = fit_ols(X, y)
        r = y - model.predict(X)
        design = np.column_stack([np.ones(n), X])
        assert np.max(np.abs(design.T @ r)) < 1e-8 * n

    def test_rank_deficiency_rejected(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 1))
        X = np.column_stack([x, x])  # duplicated column
        with pytest.raises(OutcomeModelError, match="rank"):
            fit_ols(X, x[:, 0])

    def test_affine_equivariance(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((200, 2))
        y = X @ np.array([1.5, -0.5]) + rng.standard_normal(200)
        base = fit_ols(X, y)
        scaled_X = X.copy()
        scaled_X[:, 0] *= 10.0
        scaled = fit_ols(scaled_X, y)
        assert scaled.coefficients[1] == pytest.approx(base.coefficients[1] / 10.0, abs=1e-10)
        assert np.allclose(scaled.predict(scaled_X), base.predict(X), atol=1e-10)


class TestForest:
    def test_constant_target_predicts_constant(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((50, 2))
        model = fit_forest(X, np.full(50, 4.2), trees=5, max_depth=3, seed=6)
        assert np.all(model.predict(X) == 4.2)

    def test_nonlinear_surface_held_out_r2(self):
        rng = np.random.default_rng(7)
        n = 5000
        X = rng.uniform(-2, 2, (n, 2))
        y = np.sin(3 * X[:, 0]) * X[:, 1]
        model = fit_forest(X[:4000], y[:4000], trees=200, max_depth=8, seed=8)
        pred = model.predict(X[4000:])
        resid = y[4000:] - pred
        r2 = 1 - resid @ resid / ((y[4000:] - y[4000:].mean()) ** 2).sum()
        assert r2 > 0.7

    def test_single_depth_one_tree_recovers_step_threshold(self):
        # step data with an empty band around 0: the optimal split midpoint of
        # any bootstrap bag must land inside that band
        rng = np.random.default_rng(9)
        x = np.sort(np.concatenate([rng.uniform(-1, -0.2, 200), rng.uniform(0.2, 1, 200)]))
        y = (x > 0).astype(float)
        model = fit_forest(x[:, None], y, trees=1, max_depth=1, bag_fraction=1.0, seed=10)
        root = model.trees[0]
        assert not root.is_leaf
        assert -0.2 <= root.threshold <= 0.2
        assert root.left.value == 0.0 and root.right.value == 1.0

    def test_predictions_within_training_range(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((300, 3))
        y = rng.uniform(-5, 7, 300)
        model = fit_forest(X, y, trees=20, max_depth=6, seed=12)
        grid = rng.standard_normal((100, 3)) * 4
        pred = model.predict(grid)
        assert pred.min() >= y.min() and pred.max() <= y.max()

    def test_seeded_reproducibility(self):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((200, 2))
        y = X[:, 0] ** 2 + rng.standard_normal(200)
        a = fit_forest(X, y, trees=10, max_depth=4, seed=77)
        b = fit_forest(X, y, trees=10, max_depth=4, seed=77)
        assert np.array_equal(a.predict(X), b.predict(X))

    def test_zero_trees_rejected(self):
        with pytest.raises(OutcomeModelError, match="trees"):
            fit_forest(np.zeros((30, 1)), np.zeros(30), trees=0)

    def test_too_few_rows_rejected(self):
        with pytest.raises(OutcomeModelError, match="20"):
            fit_forest(np.zeros((10, 1)), np.zeros(10))


class TestAttOlsRegression:
    def test_no_confounding_recovers_unit_effect(self):
        estimates = [
            att_ols_regression(gen_setting(DgpConfig(setting=1, d=3, n=1000, s_c=0.0, seed=s))).att_hat
            for s in range(20)
        ]
        assert np.mean(estimates) == pytest.approx(1.0, abs=0.05)

    def test_correctly_specified_setting_1(self):
        errors = [
            att_ols_regression(gen_setting(DgpConfig(setting=1, d=8, n=5000, s_c=0.2, seed=s))).att_hat - 1.0
            for s in range(10)
        ]
        assert abs(np.mean(errors)) < 0.05

    def test_mis_specified_setting_2_is_badly_biased(self):
        errors = [
            att_ols_regression(gen_setting(DgpConfig(setting=2, d=8, n=5000, s_c=0.2, seed=s))).att_hat - 1.0
            for s in range(5)
        ]
        assert np.mean(errors) < -2.0
