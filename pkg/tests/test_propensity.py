"""Tests the boosted-tree, logistic and constant propensity estimators."""

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logit

from cdite.datagen import gen_covariates, propensity_true
from cdite.errors import ConfigError, ConvergenceError, DataError, NumericError, ShapeError
from cdite.propensity import (
    ConstantModel,
    LogisticModel,
    PropensityConfig,
    fit_constant,
    fit_gbm,
    fit_gbm_regressor,
    fit_logistic,
    fit_propensity,
    logistic_deviance,
    predict_propensity,
    predict_regression,
    summarize,
)


def test_no_trees_predicts_treated_fraction() -> None:
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    T = (rng.random(200) < 0.3).astype(float)
    model = fit_gbm(X, T, PropensityConfig(n_trees=0))
    np.testing.assert_allclose(predict_propensity(model, X), T.mean())


def test_separable_data() -> None:
    """Tests that depth-one boosting classifies separable data perfectly."""

    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(300, 1))
    T = (X[:, 0] > 0).astype(float)
    model = fit_gbm(X, T, PropensityConfig(n_trees=30, max_depth=1))
    assert all(tree.depth() == 1 for tree in model.trees)
    p = predict_propensity(model, X)
    assert np.all((p > 0.5) == (T == 1))
    assert logistic_deviance(model, X, T) < logistic_deviance(fit_gbm(X, T, PropensityConfig(n_trees=0)), X, T)


@pytest.mark.parametrize(
    "intercept,expected",
    [
        (logit(0.999), 0.95),
        (logit(0.001), 0.05),
        (0.0, 0.5),
    ],
)
def test_predict_clips(intercept: float, expected: float) -> None:
    """Tests clipping and the sigmoid midpoint.

    Args:
        intercept: Raw log-odds of the model.
        expected: The clipped probability.
    """

    model = LogisticModel(np.zeros(2), float(intercept), (0.05, 0.95))
    assert predict_propensity(model, np.array([0.3, -1.0])) == pytest.approx(expected)
    assert predict_propensity(model, np.zeros((4, 2))).shape == (4,)


def test_constant_model() -> None:
    model = fit_constant(np.array([0, 1, 0, 1]), 3)
    assert isinstance(model, ConstantModel)
    assert predict_propensity(model, np.zeros(3)) == 0.5
    assert predict_propensity(fit_constant(np.ones(10), 3), np.zeros(3)) == pytest.approx(0.95)
    with pytest.raises(DataError):
        fit_constant(np.array([]), 3)
    with pytest.raises(ShapeError):
        predict_propensity(model, np.zeros(4))


def test_logistic_null_model() -> None:
    """Tests that treatment independent of the covariates gives near-zero coefficients."""

    rng = np.random.default_rng(2)
    X = rng.normal(size=(20_000, 3))
    T = (rng.random(20_000) < 0.5).astype(float)
    model = fit_logistic(X, T)
    assert np.all(np.abs(model.coef) < 0.05)
    assert abs(model.intercept) < 0.05


def test_logistic_intercept_only() -> None:
    """Tests the closed-form MLE and the dropped zero-variance column."""

    X = np.ones((400, 1))
    T = np.array([1.0] * 300 + [0.0] * 100)
    model = fit_logistic(X, T)
    assert model.intercept == pytest.approx(1.0986, abs=1e-4)
    assert model.dropped == (0,)
    assert model.coef[0] == 0.0


def test_logistic_recovers_slope() -> None:
    rng = np.random.default_rng(3)
    X = np.column_stack([rng.normal(size=5000), np.full(5000, 2.0)])
    T = (rng.random(5000) < 1 / (1 + np.exp(-(0.5 + 1.5 * X[:, 0])))).astype(float)
    model = fit_logistic(X, T)
    assert model.dropped == (1,)
    assert model.coef[0] == pytest.approx(1.5, abs=0.15)
    assert model.intercept == pytest.approx(0.5, abs=0.15)


def test_logistic_separable_does_not_converge() -> None:
    X = np.linspace(-1, 1, 50)[:, None]
    T = (X[:, 0] > 0).astype(float)
    with pytest.raises(ConvergenceError) as info:
        fit_logistic(X, T, PropensityConfig(max_iter=5))
    assert isinstance(info.value, NumericError)
    assert info.value.iterations >= 1


@pytest.mark.parametrize("estimator", ["gbm", "logistic"])
def test_single_class(estimator: str) -> None:
    """Tests that one treatment class points to the constant estimator.

    Args:
        estimator: The estimator that should refuse.
    """

    X = np.random.default_rng(4).normal(size=(50, 2))
    with pytest.raises(DataError, match="constant"):
        fit_propensity(X, np.ones(50), PropensityConfig(estimator=estimator))
    model = fit_propensity(X, np.ones(50), PropensityConfig(estimator="constant"))
    assert predict_propensity(model, X[0]) == pytest.approx(0.95)


def test_invalid_inputs() -> None:
    X = np.zeros((40, 2))
    with pytest.raises(DataError):
        fit_gbm(X, np.full(40, 2.0))
    with pytest.raises(ShapeError):
        fit_gbm(X, np.zeros(39))
    with pytest.raises(ConfigError):
        fit_gbm(X[:5], np.array([0, 1, 0, 1, 0.0]))
    with pytest.raises(ConfigError):
        PropensityConfig(clip=(0.0, 0.9))
    with pytest.raises(ConfigError):
        PropensityConfig(estimator="forest")
    with pytest.raises(ConfigError):
        PropensityConfig.from_dict({"trees": 10})


def test_gbm_regressor() -> None:
    """Tests squared-loss boosting on a step function."""

    rng = np.random.default_rng(5)
    X = rng.uniform(size=(500, 2))
    y = np.where(X[:, 0] > 0.5, 3.0, -1.0)
    model = fit_gbm_regressor(X, y, PropensityConfig(n_trees=50, shrinkage=0.3))
    assert np.mean(np.abs(predict_regression(model, X) - y)) < 0.1
    with pytest.raises(ConfigError):
        predict_regression(fit_gbm(X, (y > 0).astype(float), PropensityConfig(n_trees=2)), X)


def test_gbm_recovers_true_propensity() -> None:
    """Tests the boosted estimate against the generator's propensity on fresh covariates."""

    rng = np.random.default_rng(6)
    X = gen_covariates(5000, 10, rng)
    T = (rng.random(5000) < propensity_true(X)).astype(float)
    model = fit_gbm(X, T)
    fresh = gen_covariates(5000, 10, rng)
    error = np.abs(predict_propensity(model, fresh) - propensity_true(fresh))
    assert error.mean() <= 0.10

    summary = summarize(model, X)
    assert summary.estimator == "gbm"
    assert 0.05 <= summary.minimum <= summary.mean <= summary.maximum <= 0.95


def test_subsample_is_seeded() -> None:
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 2))
    T = (X[:, 0] + rng.normal(size=200) > 0).astype(float)
    config = PropensityConfig(n_trees=10, subsample=0.5, seed=3)
    first, second = fit_gbm(X, T, config), fit_gbm(X, T, config)
    np.testing.assert_array_equal(predict_propensity(first, X), predict_propensity(second, X))


def test_gbm_deviance_never_increases() -> None:
    """Tests that each boosting round lowers or keeps the training deviance."""

    rng = np.random.default_rng(9)
    X = gen_covariates(1000, 5, rng)
    T = (rng.random(1000) < propensity_true(X)).astype(float)
    model = fit_gbm(X, T, PropensityConfig(n_trees=40))
    deviances = [logistic_deviance(replace(model, trees=model.trees[:k]), X, T) for k in range(41)]
    assert all(after <= before + 1e-12 for before, after in zip(deviances, deviances[1:]))
    assert deviances[-1] < deviances[0]
