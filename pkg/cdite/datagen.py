"""Synthetic and semi-synthetic data-generating processes.

Synthetic units have covariates ``X = Phi(Z)`` with ``Z`` standard normal,
treated outcome ``Y(1) = mean(X) + sigma(X) * eps``, control outcome
``Y(0) = 0`` and treatment drawn from ``pi(X) = 0.25 * (1 + Beta24_cdf(X_1))``.
The heteroscedastic scenario also shifts the test covariates to the tail of
``|X|_2``.
"""

import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from cdite.errors import ConfigError, DataError, ShapeError
from cdite.propensity import (
    BoostedTreesModel,
    PropensityConfig,
    PropensityModel,
    fit_gbm_regressor,
    fit_propensity,
    predict_propensity,
    predict_regression,
)
from cdite.utils.io import atomic_write
from cdite.utils.seeding import make_rng

__all__ = [
    "SCENARIOS",
    "NOISE_FAMILIES",
    "VARIANCE_MODES",
    "DgpConfig",
    "Dataset",
    "gen_covariates",
    "mean_lowdim",
    "ramp_weights",
    "mean_highdim",
    "conditional_mean",
    "sample_noise",
    "sigma_fn",
    "beta24_cdf",
    "propensity_true",
    "gen_dataset",
    "SemiSyntheticConfig",
    "SemiSyntheticFit",
    "fit_semi_synthetic",
    "semi_synthetic_from_csv",
    "dataset_frame",
    "write_dataset",
    "read_header",
    "read_dataset",
]

logger = logging.getLogger(__name__)

SCENARIOS = ("lowdim", "highdim")
NOISE_FAMILIES = ("gaussian", "gamma", "nlm")
VARIANCE_MODES = ("homo", "hetero")
SPLITS = ("train", "cal", "test")

# Non-local moment density is proportional to x^(2 nu) * phi(x).
NLM_NU = 5
SHIFT_QUANTILE = 0.9
IQR_TO_SD = 0.74


@dataclass(frozen=True)
class DgpConfig:
    scenario: str = "lowdim"
    noise: str = "gaussian"
    variance: str = "homo"
    d: int = 10
    n_train: int = 7500
    n_cal: int = 2500
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"Unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.noise not in NOISE_FAMILIES:
            raise ConfigError(f"Unknown noise family {self.noise!r}; expected one of {NOISE_FAMILIES}")
        if self.variance not in VARIANCE_MODES:
            raise ConfigError(f"Unknown variance mode {self.variance!r}; expected one of {VARIANCE_MODES}")
        if self.d < 2:
            raise ConfigError(f"Need at least two covariates, got d={self.d}")
        if self.scenario == "highdim" and (self.d % 4 != 0 or self.d < 8):
            raise ConfigError(f"The highdim scenario needs d divisible by 4 and at least 8, got d={self.d}")
        if min(self.n_train, self.n_cal, self.n_test) < 1:
            raise ConfigError(f"Split sizes must be positive: {self.n_train}, {self.n_cal}, {self.n_test}")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "DgpConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown data settings: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    """Units with observed data and, for generated data, the oracle columns.

    ``y1``, ``y0`` and ``pi`` are None for ingested data without oracle
    columns; ``split`` is None when the source has no split tags.
    """

    X: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    y1: np.ndarray | None = field(default=None, repr=False)
    y0: np.ndarray | None = field(default=None, repr=False)
    pi: np.ndarray | None = field(default=None, repr=False)
    split: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if self.X.ndim != 2:
            raise ShapeError(f"Covariates must be a matrix, got shape {self.X.shape}")
        for name in ("T", "Y", "y1", "y0", "pi", "split"):
            value = getattr(self, name)
            if value is not None and value.shape != (n,):
                raise ShapeError(f"Column {name} has shape {value.shape}, expected ({n},)")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_oracles(self) -> bool:
        return self.y1 is not None and self.y0 is not None

    @property
    def tau(self) -> np.ndarray:
        if self.y1 is None or self.y0 is None:
            raise DataError("Dataset has no potential-outcome columns")
        return self.y1 - self.y0

    def take(self, mask: np.ndarray) -> "Dataset":
        def pick(value: np.ndarray | None) -> np.ndarray | None:
            return None if value is None else value[mask]

        return Dataset(
            self.X[mask], self.T[mask], self.Y[mask], pick(self.y1), pick(self.y0), pick(self.pi), pick(self.split)
        )

    def subset(self, split: str) -> "Dataset":
        if self.split is None:
            raise DataError("Dataset has no split column")
        if split not in SPLITS:
            raise DataError(f"Unknown split {split!r}")
        return self.take(self.split == split)

    def arm(self, arm: int) -> "Dataset":
        return self.take(self.T == arm)


def gen_covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws mapped through the normal CDF, so each entry is uniform on (0, 1)."""

    return norm.cdf(rng.standard_normal((n, d)))


def _rows(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _logistic_bump(x: np.ndarray, slope: float) -> np.ndarray:
    return 2.0 * expit(slope * (x - 0.5))


def mean_lowdim(x: np.ndarray) -> np.ndarray | float:
    """``f(x_1) * f(x_2)`` with ``f(u) = 2 / (1 + exp(-12 (u - 0.5)))``."""

    X, single = _rows(x)
    out = _logistic_bump(X[:, 0], 12.0) * _logistic_bump(X[:, 1], 12.0)
    return float(out[0]) if single else out


def ramp_weights(size: int) -> np.ndarray:
    """Block weights rising linearly from 1 to 10."""

    return 1.0 + 9.0 * np.arange(size) / (size - 1)


def mean_highdim(x: np.ndarray) -> np.ndarray | float:
    """``f1(Z1) * f2(Z2) - f3(Z3)`` over ramp-weighted block averages.

    ``Z1`` averages the first quarter of the coordinates, ``Z2`` the second
    quarter and ``Z3`` the second half.

    Args:
        x: One covariate vector or a matrix of rows; ``d`` must be divisible by 4.

    Returns:
        The conditional mean of the treated outcome.

    Raises:
        ShapeError: If ``d`` is not divisible by 4 or smaller than 8.
    """

    X, single = _rows(x)
    d = X.shape[1]
    if d % 4 != 0 or d < 8:
        raise ShapeError(f"Need d divisible by 4 and at least 8, got d={d}")
    q = d // 4
    blocks = [X[:, :q], X[:, q : 2 * q], X[:, 2 * q :]]
    z1, z2, z3 = (block @ ramp_weights(block.shape[1]) / ramp_weights(block.shape[1]).sum() for block in blocks)
    f1 = _logistic_bump(z1, 60.0)
    f2 = 4.0 / (1.0 + (z2 - 0.5) ** 2) + 1.0
    f3 = np.exp((z3 - 0.5) ** 3 + 1.0) + 1.0
    out = f1 * f2 - f3
    return float(out[0]) if single else out


def conditional_mean(X: np.ndarray, scenario: str) -> np.ndarray:
    if scenario == "lowdim":
        return np.asarray(mean_lowdim(X))
    if scenario == "highdim":
        return np.asarray(mean_highdim(X))
    raise ConfigError(f"Unknown scenario {scenario!r}")


def sample_noise(family: str, rng: np.random.Generator, size: int | None = None) -> np.ndarray | float:
    """Draws noise with mean zero and unit standard deviation.

    Args:
        family: ``gaussian``, ``gamma`` (shape 2, scale 1) or ``nlm`` (density
            proportional to ``x^10 * phi(x)``).
        rng: The generator.
        size: Number of draws, or None for a single float.

    Returns:
        The standardized draws.

    Raises:
        ConfigError: If the family is unknown.
    """

    if family == "gaussian":
        out = rng.standard_normal(size)
    elif family == "gamma":
        out = (rng.gamma(2.0, 1.0, size) - 2.0) / math.sqrt(2.0)
    elif family == "nlm":
        # The square of the draw is Gamma(nu + 1/2, scale 2), with mean 2 nu + 1.
        g = rng.gamma(NLM_NU + 0.5, 2.0, size)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        out = sign * np.sqrt(g) / math.sqrt(2 * NLM_NU + 1)
    else:
        raise ConfigError(f"Unknown noise family {family!r}; expected one of {NOISE_FAMILIES}")
    return float(out) if size is None else np.asarray(out)


def sigma_fn(x: np.ndarray, variance_mode: str, d: int | None = None) -> np.ndarray | float:
    """Noise scale.

    Homoscedastic scale is one. Heteroscedastic scale is 0.5 when the
    coordinate mean ``mu`` is below 0.5 and ``5 * sqrt(d / 10) * |cos(pi mu)|``
    otherwise.
    """

    X, single = _rows(x)
    if variance_mode == "homo":
        out = np.ones(X.shape[0])
    elif variance_mode == "hetero":
        d = X.shape[1] if d is None else d
        mu = X.mean(axis=1)
        out = np.where(mu < 0.5, 0.5, 5.0 * math.sqrt(d / 10.0) * np.abs(np.cos(math.pi * mu)))
    else:
        raise ConfigError(f"Unknown variance mode {variance_mode!r}")
    return float(out[0]) if single else out


def beta24_cdf(u: np.ndarray | float) -> np.ndarray | float:
    """Beta(2, 4) CDF, ``10u^2 - 20u^3 + 15u^4 - 4u^5``."""

    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    out = u * u * (10.0 + u * (-20.0 + u * (15.0 - 4.0 * u)))
    return float(out) if out.ndim == 0 else out


def propensity_true(x: np.ndarray) -> np.ndarray | float:
    X, single = _rows(x)
    out = 0.25 * (1.0 + np.asarray(beta24_cdf(X[:, 0])))
    return float(out[0]) if single else out


def _shifted_covariates(config: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    reference = gen_covariates(config.n_train + config.n_cal, config.d, rng)
    threshold = float(np.quantile(np.linalg.norm(reference, axis=1), SHIFT_QUANTILE))
    kept: list[np.ndarray] = []
    need = config.n_test
    while need > 0:
        candidates = gen_covariates(max(20 * need, 1000), config.d, rng)
        chosen = candidates[np.linalg.norm(candidates, axis=1) >= threshold][:need]
        kept.append(chosen)
        need -= chosen.shape[0]
    logger.debug("Selected %d shifted test rows above |X|_2 = %.4f", config.n_test, threshold)
    return np.concatenate(kept, axis=0)


def gen_dataset(config: DgpConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Generates train, calibration and test units.

    Args:
        config: The scenario and split sizes.
        rng: The data stream; defaults to the ``data`` stream of ``config.seed``.

    Returns:
        A dataset with oracle columns and split tags, rows ordered train, cal, test.
    """

    rng = make_rng(config.seed, "data") if rng is None else rng
    n_fit = config.n_train + config.n_cal
    X_fit = gen_covariates(n_fit, config.d, rng)
    if config.variance == "hetero":
        X_test = _shifted_covariates(config, rng)
    else:
        X_test = gen_covariates(config.n_test, config.d, rng)
    X = np.concatenate([X_fit, X_test], axis=0)
    n = X.shape[0]

    eps = np.asarray(sample_noise(config.noise, rng, n))
    y1 = conditional_mean(X, config.scenario) + np.asarray(sigma_fn(X, config.variance, config.d)) * eps
    y0 = np.zeros(n)
    pi = np.asarray(propensity_true(X))
    T = (rng.random(n) < pi).astype(np.int64)
    Y = np.where(T == 1, y1, y0)
    split = np.array(["train"] * config.n_train + ["cal"] * config.n_cal + ["test"] * config.n_test)
    logger.info(
        "Generated %s/%s/%s data with d=%d: %d rows, treated fraction %.3f",
        config.scenario,
        config.noise,
        config.variance,
        config.d,
        n,
        T.mean(),
    )
    return Dataset(X, T, Y, y1, y0, pi, split)


@dataclass(frozen=True)
class SemiSyntheticConfig:
    """Settings for generating units from a model fitted on a real CSV.

    ``test_filter`` is a pandas query over the original covariate columns
    selecting the test subgroup from the generated pool.
    """

    treatment: str = "t"
    outcome: str = "y"
    covariates: tuple[str, ...] | None = None
    fit_fraction: float = 7716 / 19716
    n_train: int = 7500
    n_cal: int = 2500
    n_test_pool: int = 1000
    test_filter: str | None = None
    propensity_clip: tuple[float, float] = (0.1, 0.9)
    regressor: PropensityConfig = PropensityConfig()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "propensity_clip", tuple(float(c) for c in self.propensity_clip))
        if not 0.0 < self.fit_fraction < 1.0:
            raise ConfigError(f"fit_fraction must be in (0, 1), got {self.fit_fraction}")
        if min(self.n_train, self.n_cal, self.n_test_pool) < 1:
            raise ConfigError("Semi-synthetic split sizes must be positive")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "SemiSyntheticConfig":
        values = dict(values)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown semi-synthetic settings: {sorted(unknown)}")
        if isinstance(values.get("regressor"), dict):
            values["regressor"] = PropensityConfig.from_dict(values["regressor"])
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["covariates"] = None if self.covariates is None else list(self.covariates)
        out["propensity_clip"] = list(self.propensity_clip)
        out["regressor"]["clip"] = list(self.regressor.clip)
        return out


def _frame_columns(frame: pd.DataFrame, config: SemiSyntheticConfig) -> list[str]:
    missing = [c for c in (config.treatment, config.outcome, *(config.covariates or ())) if c not in frame.columns]
    if missing:
        raise DataError(f"CSV is missing columns {missing}")
    if config.covariates is not None:
        return list(config.covariates)
    return [c for c in frame.columns if c not in (config.treatment, config.outcome)]


@dataclass(frozen=True)
class SemiSyntheticFit:
    """Models fitted on the real rows, plus the covariate pool new units are drawn from."""

    regressor: BoostedTreesModel
    noise_sd: float
    propensity: PropensityModel
    pool: pd.DataFrame
    columns: tuple[str, ...]


def fit_semi_synthetic(csv: str | Path | pd.DataFrame, config: SemiSyntheticConfig) -> SemiSyntheticFit:
    """Fits the outcome and treatment models of the semi-synthetic generator.

    A seeded permutation splits the CSV into a fitting part and a covariate
    pool. On the fitting part, a boosted-tree regressor estimates the treated
    outcome mean ``m``; the noise scale is ``0.74`` times the interquartile
    range of its treated residuals, and the propensity model is truncated to
    ``config.propensity_clip``.

    Args:
        csv: Path to the CSV, or an already loaded frame.
        config: Column roles and fitting settings.

    Returns:
        The fitted models and the pool.

    Raises:
        DataError: If columns are missing, the pool is empty or there are no treated fitting rows.
    """

    frame = csv if isinstance(csv, pd.DataFrame) else pd.read_csv(csv, comment="#")
    columns = _frame_columns(frame, config)
    frame = frame.dropna(subset=[*columns, config.treatment, config.outcome]).reset_index(drop=True)
    rng = make_rng(config.seed, "semi-synthetic", "fit")

    order = rng.permutation(len(frame))
    n_fit = int(round(config.fit_fraction * len(frame)))
    fit_part, pool_part = frame.iloc[order[:n_fit]], frame.iloc[order[n_fit:]]
    if pool_part.empty:
        raise DataError("No rows left for the covariate pool")

    X_fit = fit_part[columns].to_numpy(dtype=np.float64)
    T_fit = fit_part[config.treatment].to_numpy(dtype=np.float64)
    Y_fit = fit_part[config.outcome].to_numpy(dtype=np.float64)
    treated = T_fit == 1
    if not treated.any():
        raise DataError("No treated rows in the fitting part")

    regressor = fit_gbm_regressor(X_fit[treated], Y_fit[treated], config.regressor)
    resid = Y_fit[treated] - predict_regression(regressor, X_fit[treated])
    q75, q25 = np.percentile(resid, [75, 25])
    iqr = float(q75 - q25)
    propensity = fit_propensity(X_fit, T_fit, replace(config.regressor, clip=config.propensity_clip))
    logger.info("Fitted semi-synthetic models on %d rows; residual IQR %.4f", len(fit_part), iqr)
    return SemiSyntheticFit(regressor, IQR_TO_SD * iqr, propensity, pool_part.reset_index(drop=True), tuple(columns))


def semi_synthetic_from_csv(csv: str | Path | pd.DataFrame, config: SemiSyntheticConfig) -> Dataset:
    """Generates units whose outcome and treatment models are fitted on real data.

    Generated units draw covariates from the pool of ``fit_semi_synthetic``
    and get ``Y(1) = m(X) + noise_sd * eps`` with standard normal ``eps``,
    ``Y(0) = 0`` and ``T ~ Bernoulli(pi(X))``.

    Args:
        csv: Path to the CSV, or an already loaded frame.
        config: Column roles, sizes and fitting settings.

    Returns:
        A dataset with oracle columns; test rows are the pool rows passing ``test_filter``.

    Raises:
        DataError: If columns are missing, there are no treated fitting rows, or no test row passes the filter.
    """

    fit = fit_semi_synthetic(csv, config)
    rng = make_rng(config.seed, "semi-synthetic", "generate")
    n_gen = config.n_train + config.n_cal + config.n_test_pool
    rows = rng.choice(len(fit.pool), size=n_gen, replace=n_gen > len(fit.pool))
    pool = fit.pool.iloc[rows].reset_index(drop=True)
    X = pool[list(fit.columns)].to_numpy(dtype=np.float64)
    eps = rng.standard_normal(n_gen)
    y1 = predict_regression(fit.regressor, X) + fit.noise_sd * eps
    y0 = np.zeros(n_gen)
    pi = np.asarray(predict_propensity(fit.propensity, X))
    T = (rng.random(n_gen) < pi).astype(np.int64)
    Y = np.where(T == 1, y1, y0)
    split = np.array(["train"] * config.n_train + ["cal"] * config.n_cal + ["test"] * config.n_test_pool)

    keep = np.ones(n_gen, dtype=bool)
    if config.test_filter:
        selected = np.asarray(pool.eval(config.test_filter), dtype=bool)
        keep = (split != "test") | selected
        if not selected[split == "test"].any():
            raise DataError(f"No generated test rows satisfy {config.test_filter!r}")
    dataset = Dataset(X, T, Y, y1, y0, pi, split).take(keep)
    logger.info("Generated %d semi-synthetic rows (%d test)", len(dataset), int(np.sum(dataset.split == "test")))
    return dataset


def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    columns: dict[str, np.ndarray] = {f"x{j + 1}": dataset.X[:, j] for j in range(dataset.d)}
    columns["t"] = dataset.T.astype(np.int64)
    columns["y"] = dataset.Y
    for name, value in (("y1_true", dataset.y1), ("y0_true", dataset.y0), ("pi_true", dataset.pi)):
        if value is not None:
            columns[name] = value
    if dataset.split is not None:
        columns["split"] = dataset.split
    return pd.DataFrame(columns)


def write_dataset(path: str | Path, dataset: Dataset, header: str | None = None) -> None:
    """Writes the dataset CSV, optionally preceded by a ``#`` comment line."""

    buffer = io.StringIO()
    dataset_frame(dataset).to_csv(buffer, index=False, float_format="%.17g", lineterminator="\n")
    with atomic_write(path) as fh:
        if header is not None:
            fh.write(f"# {header}\n")
        fh.write(buffer.getvalue())


def read_header(path: str | Path) -> str | None:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    return first[1:].strip() if first.startswith("#") else None


def read_dataset(path: str | Path, treatment: str = "t", outcome: str = "y") -> Dataset:
    """Reads a dataset CSV.

    Covariates are the ``x1..xd`` columns in numeric order; oracle and split
    columns are optional.

    Args:
        path: The CSV path.
        treatment: Name of the treatment column.
        outcome: Name of the outcome column.

    Returns:
        The dataset.

    Raises:
        DataError: If required columns are missing or values are invalid.
    """

    frame = pd.read_csv(path, comment="#")
    covariates = sorted(
        (c for c in frame.columns if c.startswith("x") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    missing = [c for c in (treatment, outcome) if c not in frame.columns]
    if missing or not covariates:
        raise DataError(f"{path}: missing columns {missing or ['x1']}")
    T = frame[treatment].to_numpy()
    if not np.isin(T, (0, 1)).all():
        raise DataError(f"{path}: treatment column must be 0/1")

    def optional(name: str) -> np.ndarray | None:
        return frame[name].to_numpy(dtype=np.float64) if name in frame.columns else None

    split = frame["split"].astype(str).to_numpy() if "split" in frame.columns else None
    if split is not None and not np.isin(split, SPLITS).all():
        raise DataError(f"{path}: split tags must be one of {SPLITS}")
    return Dataset(
        frame[covariates].to_numpy(dtype=np.float64),
        T.astype(np.int64),
        frame[outcome].to_numpy(dtype=np.float64),
        optional("y1_true"),
        optional("y0_true"),
        optional("pi_true"),
        split,
    )
