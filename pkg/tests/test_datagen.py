"""Tests the synthetic and semi-synthetic data generators and the CSV format."""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import ks_2samp, kstest, norm

from cdite.datagen import (
    Dataset,
    DgpConfig,
    SemiSyntheticConfig,
    beta24_cdf,
    fit_semi_synthetic,
    gen_covariates,
    gen_dataset,
    mean_highdim,
    mean_lowdim,
    propensity_true,
    ramp_weights,
    read_dataset,
    read_header,
    sample_noise,
    semi_synthetic_from_csv,
    sigma_fn,
    write_dataset,
)
from cdite.errors import ConfigError, DataError, ShapeError
from cdite.propensity import PropensityConfig, predict_regression

SMALL = DgpConfig(d=10, n_train=300, n_cal=100, n_test=50, seed=4)


def test_covariates_are_uniform() -> None:
    assert norm.cdf(0.0) == 0.5
    X = gen_covariates(20_000, 3, np.random.default_rng(0))
    assert X.shape == (20_000, 3)
    assert np.all((X > 0) & (X < 1))
    np.testing.assert_allclose(X.mean(axis=0), 0.5, atol=0.01)


@pytest.mark.parametrize(
    "x,expected",
    [
        ([0.5, 0.5], 1.0),
        ([1.0, 0.5], 1.99505),
        ([0.5, 1.0, 0.0], 1.99505),
    ],
)
def test_mean_lowdim(x: list[float], expected: float) -> None:
    """Tests the product of logistic bumps in the first two coordinates.

    Args:
        x: Covariate vector.
        expected: The conditional mean.
    """

    assert mean_lowdim(np.array(x)) == pytest.approx(expected, abs=1e-5)


def test_mean_highdim() -> None:
    """Tests the block means at the center and the ramp weights."""

    assert mean_highdim(np.full(12, 0.5)) == pytest.approx(5.0 - math.e - 1.0)
    assert mean_highdim(np.full(12, 0.5)) == pytest.approx(1.28172, abs=1e-5)
    weights = ramp_weights(5)
    assert weights[0] / weights[-1] == pytest.approx(1 / 10)
    assert mean_highdim(np.full((3, 8), 0.5)).shape == (3,)
    with pytest.raises(ShapeError):
        mean_highdim(np.full(10, 0.5))


@pytest.mark.parametrize("family", ["gaussian", "gamma", "nlm"])
def test_noise_is_standardized(family: str) -> None:
    """Tests that every noise family has mean zero and unit spread.

    Args:
        family: The noise family.
    """

    draws = sample_noise(family, np.random.default_rng(1), 1_000_000)
    assert abs(draws.mean()) <= 0.01
    assert draws.std() == pytest.approx(1.0, abs=0.01)
    if family == "gaussian":
        assert kstest(draws[:5000], "norm").pvalue > 1e-3
    assert isinstance(sample_noise(family, np.random.default_rng(1)), float)


def test_noise_shapes() -> None:
    """Tests the skew of the gamma family and the second moment of the bimodal family."""

    gamma = sample_noise("gamma", np.random.default_rng(2), 1_000_000)
    assert np.mean(gamma**3) > 1.0
    nlm = sample_noise("nlm", np.random.default_rng(3), 1_000_000)
    assert np.mean((nlm * math.sqrt(11.0)) ** 2) == pytest.approx(11.0, abs=0.05)
    assert np.mean(np.abs(nlm) < 0.2) < 0.01
    with pytest.raises(ConfigError):
        sample_noise("cauchy", np.random.default_rng(3))


@pytest.mark.parametrize(
    "value,mode,expected",
    [
        (0.3, "homo", 1.0),
        (0.25, "hetero", 0.5),
        (0.75, "hetero", 5.0 * math.sqrt(0.5)),
        (0.9, "hetero", 5.0 * abs(math.cos(0.9 * math.pi))),
    ],
)
def test_sigma_fn(value: float, mode: str, expected: float) -> None:
    """Tests the homoscedastic and heteroscedastic scales at d = 10.

    Args:
        value: Value of every coordinate.
        mode: Variance mode.
        expected: The noise scale.
    """

    assert sigma_fn(np.full(10, value), mode) == pytest.approx(expected)


def test_propensity() -> None:
    assert beta24_cdf(0.5) == pytest.approx(0.8125)
    assert beta24_cdf(0.0) == 0.0
    assert beta24_cdf(1.0) == pytest.approx(1.0)
    assert propensity_true(np.array([0.5, 0.9])) == pytest.approx(0.25 * 1.8125)
    p = propensity_true(gen_covariates(1000, 3, np.random.default_rng(4)))
    assert np.all((p >= 0.25) & (p <= 0.5))


def test_gen_dataset() -> None:
    """Tests sizes, split tags, the oracle columns and seeded determinism."""

    data = gen_dataset(SMALL)
    assert len(data) == 450
    assert data.d == 10
    assert [int(np.sum(data.split == s)) for s in ("train", "cal", "test")] == [300, 100, 50]
    np.testing.assert_array_equal(data.y0, 0.0)
    np.testing.assert_array_equal(data.Y[data.T == 1], data.y1[data.T == 1])
    np.testing.assert_array_equal(data.Y[data.T == 0], 0.0)
    np.testing.assert_array_equal(data.tau, data.y1)
    assert np.all((data.pi >= 0.25) & (data.pi <= 0.5))

    again = gen_dataset(SMALL)
    np.testing.assert_array_equal(data.X, again.X)
    np.testing.assert_array_equal(data.Y, again.Y)
    assert not np.array_equal(data.X, gen_dataset(DgpConfig(d=10, n_train=300, n_cal=100, n_test=50, seed=5)).X)


def test_hetero_test_rows_are_shifted() -> None:
    """Tests that heteroscedastic test covariates lie in the outer norm region."""

    data = gen_dataset(DgpConfig(variance="hetero", n_train=1500, n_cal=500, n_test=200))
    fit_norms = np.linalg.norm(data.subset("train").X, axis=1)
    test_norms = np.linalg.norm(data.subset("test").X, axis=1)
    assert test_norms.shape == (200,)
    assert test_norms.min() > np.quantile(fit_norms, 0.8)


def test_homo_test_rows_are_not_shifted() -> None:
    """Tests that homoscedastic test covariates match a fresh draw and heteroscedastic ones do not."""

    fresh = gen_covariates(2000, 10, np.random.default_rng(99))
    homo = gen_dataset(DgpConfig(n_train=300, n_cal=100, n_test=2000, seed=6)).subset("test").X
    for j in range(10):
        assert ks_2samp(homo[:, j], fresh[:, j]).pvalue > 1e-4
    fresh_norms = np.linalg.norm(fresh, axis=1)
    assert ks_2samp(np.linalg.norm(homo, axis=1), fresh_norms).pvalue > 1e-4
    hetero = gen_dataset(DgpConfig(variance="hetero", n_train=300, n_cal=100, n_test=500, seed=6)).subset("test").X
    assert ks_2samp(np.linalg.norm(hetero, axis=1), fresh_norms).pvalue < 1e-6


def test_highdim_dataset() -> None:
    data = gen_dataset(DgpConfig(scenario="highdim", noise="gamma", d=16, n_train=50, n_cal=20, n_test=10))
    assert data.X.shape == (80, 16)
    assert np.all(np.isfinite(data.y1))


@pytest.mark.parametrize(
    "values",
    [
        {"scenario": "midrange"},
        {"noise": "cauchy"},
        {"variance": "mixed"},
        {"d": 1},
        {"scenario": "highdim", "d": 10},
        {"n_test": 0},
        {"dimension": 10},
    ],
)
def test_dgp_config_validation(values: dict) -> None:
    """Tests the rejected scenario settings.

    Args:
        values: Settings to pass to ``DgpConfig.from_dict``.
    """

    with pytest.raises(ConfigError):
        DgpConfig.from_dict(values)


def test_dataset_access() -> None:
    data = Dataset(np.zeros((3, 2)), np.array([1, 0, 1]), np.array([1.0, 0.0, 2.0]))
    assert not data.has_oracles
    assert len(data.arm(1)) == 2
    with pytest.raises(DataError):
        data.tau
    with pytest.raises(DataError):
        data.subset("train")
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3))


def test_csv_round_trip(tmpdir: Path) -> None:
    """Tests the column layout, the header line and exact float round trips.

    Args:
        tmpdir: Where to write the CSV.
    """

    data = gen_dataset(SMALL)
    path = Path(tmpdir) / "data.csv"
    write_dataset(path, data, header="cdite 0.1.0 config=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# cdite 0.1.0 config=abc"
    assert lines[1] == ",".join([f"x{j}" for j in range(1, 11)] + ["t", "y", "y1_true", "y0_true", "pi_true", "split"])
    assert read_header(path) == "cdite 0.1.0 config=abc"

    back = read_dataset(path)
    for name in ("X", "T", "Y", "y1", "y0", "pi", "split"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))

    again = Path(tmpdir) / "again.csv"
    write_dataset(again, gen_dataset(SMALL), header="cdite 0.1.0 config=abc")
    assert again.read_bytes() == path.read_bytes()


def test_read_dataset_errors(tmpdir: Path) -> None:
    """Tests rejected CSV contents.

    Args:
        tmpdir: Where to write the CSVs.
    """

    path = Path(tmpdir) / "bad.csv"
    pd.DataFrame({"x1": [0.1, 0.2], "t": [0, 2], "y": [1.0, 2.0]}).to_csv(path, index=False)
    with pytest.raises(DataError):
        read_dataset(path)
    pd.DataFrame({"x1": [0.1, 0.2], "t": [0, 1]}).to_csv(path, index=False)
    with pytest.raises(DataError):
        read_dataset(path)
    pd.DataFrame({"x1": [0.1], "t": [1], "y": [1.0], "split": ["holdout"]}).to_csv(path, index=False)
    with pytest.raises(DataError):
        read_dataset(path)

    pd.DataFrame({"x2": [0.1], "x1": [0.3], "treated": [1], "outcome": [2.0]}).to_csv(path, index=False)
    data = read_dataset(path, treatment="treated", outcome="outcome")
    np.testing.assert_array_equal(data.X, [[0.3, 0.1]])
    assert data.split is None


def _real_frame() -> pd.DataFrame:
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=600), rng.uniform(size=600)
    t = (rng.random(600) < 1 / (1 + np.exp(-a))).astype(int)
    y = np.where(t == 1, 2.0 * a + b + rng.normal(size=600), 0.5 * b)
    return pd.DataFrame({"a": a, "b": b, "t": t, "y": y})


def test_semi_synthetic() -> None:
    """Tests sizes, the subgroup filter, the clipped propensity and determinism."""

    config = SemiSyntheticConfig(
        n_train=100,
        n_cal=50,
        n_test_pool=50,
        test_filter="a > 0",
        regressor=PropensityConfig(n_trees=10, min_leaf=5),
        seed=2,
    )
    data = semi_synthetic_from_csv(_real_frame(), config)
    assert data.d == 2
    assert [int(np.sum(data.split == s)) for s in ("train", "cal")] == [100, 50]
    test = data.subset("test")
    assert 0 < len(test) <= 50
    assert np.all(test.X[:, 0] > 0)
    np.testing.assert_array_equal(data.y0, 0.0)
    assert np.all((data.pi >= 0.1) & (data.pi <= 0.9))

    again = semi_synthetic_from_csv(_real_frame(), config)
    np.testing.assert_array_equal(data.Y, again.Y)


def test_semi_synthetic_errors(tmpdir: Path) -> None:
    """Tests missing columns and an empty test subgroup.

    Args:
        tmpdir: Where to write the CSV.
    """

    path = Path(tmpdir) / "real.csv"
    _real_frame().drop(columns=["y"]).to_csv(path, index=False)
    small = PropensityConfig(n_trees=5, min_leaf=5)
    with pytest.raises(DataError):
        semi_synthetic_from_csv(path, SemiSyntheticConfig(regressor=small))
    with pytest.raises(DataError):
        semi_synthetic_from_csv(_real_frame(), SemiSyntheticConfig(test_filter="a > 100", regressor=small))
    with pytest.raises(ConfigError):
        SemiSyntheticConfig(fit_fraction=1.0)


def test_semi_synthetic_noise_scale() -> None:
    """Tests that treated outcomes scatter around the fitted mean with the fitted noise scale."""

    small = PropensityConfig(n_trees=10, min_leaf=5)
    config = SemiSyntheticConfig(n_train=4000, n_cal=1000, n_test_pool=1000, regressor=small)
    fit = fit_semi_synthetic(_real_frame(), config)
    assert fit.noise_sd > 0
    assert fit.columns == ("a", "b")
    data = semi_synthetic_from_csv(_real_frame(), config)
    resid = data.y1 - predict_regression(fit.regressor, data.X)
    assert abs(resid.mean()) < 0.1 * fit.noise_sd
    assert resid.std() / fit.noise_sd == pytest.approx(1.0, abs=0.05)


def test_semi_synthetic_constant_outcome() -> None:
    """Tests that a constant outcome gives zero noise and constant treated outcomes."""

    frame = _real_frame().assign(y=3.0)
    small = PropensityConfig(n_trees=5, min_leaf=5)
    config = SemiSyntheticConfig(n_train=100, n_cal=50, n_test_pool=50, regressor=small)
    assert fit_semi_synthetic(frame, config).noise_sd == 0.0
    data = semi_synthetic_from_csv(frame, config)
    np.testing.assert_array_equal(data.y1, 3.0)
    np.testing.assert_array_equal(data.Y, np.where(data.T == 1, 3.0, 0.0))
