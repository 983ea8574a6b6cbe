"""Propensity score estimation.

Gradient-boosted regression trees on the logistic loss are the default
estimator. A damped-Newton logistic regression and an intercept-only model
are the fallbacks. The same tree learner also runs in squared-loss mode for
outcome regression.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit, logit

from cdite.errors import ConfigError, ConvergenceError, DataError, ShapeError

__all__ = [
    "PropensityConfig",
    "RegressionTree",
    "BoostedTreesModel",
    "LogisticModel",
    "ConstantModel",
    "PropensityModel",
    "fit_gbm",
    "fit_gbm_regressor",
    "predict_regression",
    "logistic_deviance",
    "fit_logistic",
    "fit_constant",
    "fit_propensity",
    "predict_propensity",
    "PropensitySummary",
    "summarize",
]

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class PropensityConfig:
    """Settings for every propensity estimator; each one reads the fields it needs."""

    estimator: str = "gbm"
    n_trees: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 10
    subsample: float = 1.0
    clip: tuple[float, float] = (0.05, 0.95)
    max_iter: int = 100
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "clip", tuple(float(c) for c in self.clip))
        if self.estimator not in ("gbm", "logistic", "constant"):
            raise ConfigError(f"Unknown propensity estimator: {self.estimator}")
        lo, hi = self.clip
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"Clip bounds must satisfy 0 < lo < hi < 1, got {self.clip}")
        if self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1 or not 0 < self.shrinkage:
            raise ConfigError(f"Invalid boosting settings: {self}")
        if not 0.0 < self.subsample <= 1.0 or self.max_iter < 1 or not self.tol > 0:
            raise ConfigError(f"Invalid solver settings: {self}")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "PropensityConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown propensity settings: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class RegressionTree:
    """Axis-aligned binary tree stored as parallel arrays in pre-order.

    Node ``i`` is a leaf when ``feature[i] == -1``; otherwise rows with
    ``x[feature[i]] <= threshold[i]`` go to ``left[i]`` and the rest to ``right[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] == LEAF:
            return 0
        return 1 + max(self.depth(int(self.left[node])), self.depth(int(self.right[node])))

    def predict(self, X: np.ndarray) -> np.ndarray:
        rows = np.arange(X.shape[0])
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            internal = feat != LEAF
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.maximum(feat, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)


@dataclass(frozen=True)
class BoostedTreesModel:
    """Additive tree ensemble on the log-odds (``logistic``) or outcome (``squared``) scale."""

    trees: tuple[RegressionTree, ...]
    shrinkage: float
    init: float
    clip: tuple[float, float]
    n_features: int
    loss: str = "logistic"

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        out = np.full(X.shape[0], self.init)
        for tree in self.trees:
            out += self.shrinkage * tree.predict(X)
        return out


@dataclass(frozen=True)
class LogisticModel:
    coef: np.ndarray
    intercept: float
    clip: tuple[float, float] = (0.05, 0.95)
    dropped: tuple[int, ...] = ()
    iterations: int = 0

    @property
    def n_features(self) -> int:
        return len(self.coef)

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        return X @ self.coef + self.intercept


@dataclass(frozen=True)
class ConstantModel:
    """Intercept-only propensity, the treated fraction of the training rows."""

    value: float
    n_features: int
    clip: tuple[float, float] = (0.05, 0.95)

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.n_features)
        return np.full(X.shape[0], logit(self.value))


PropensityModel = BoostedTreesModel | LogisticModel | ConstantModel


def _check_features(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ShapeError(f"Expected {n_features} features, got shape {X.shape}")
    return X


def _check_treatment(X: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if X.ndim != 2 or T.shape != (X.shape[0],):
        raise ShapeError(f"Got features {X.shape} and treatments {T.shape}")
    if not np.all((T == 0) | (T == 1)):
        raise DataError("Treatment must be binary (0/1)")
    if T.min() == T.max():
        raise DataError(
            f"Only one treatment class present (T={int(T[0])}); use the constant propensity estimator instead"
        )
    return X, T


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int) -> tuple[float, int, float]:
    """Exact split search maximizing the squared-error reduction of ``r``.

    Ties go to the lowest feature index, then the lowest threshold.
    """

    n = X.shape[0]
    total = r.sum()
    parent = total * total / n
    n_left = np.arange(1, n, dtype=np.float64)
    best_gain, best_feature, best_threshold = 0.0, LEAF, 0.0
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        left_sum = np.cumsum(r[order])[:-1]
        right_sum = total - left_sum
        gain = left_sum**2 / n_left + right_sum**2 / (n - n_left) - parent
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain, best_feature, best_threshold = float(gain[i]), j, float(xs[i])
    return best_gain, best_feature, best_threshold


def _grow_tree(X: np.ndarray, r: np.ndarray, h: np.ndarray, max_depth: int, min_leaf: int) -> RegressionTree:
    """Fits one tree to residuals ``r``; leaf values are the Newton steps ``sum(r) / sum(h)``."""

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(r[idx].sum() / max(h[idx].sum(), 1e-12)))
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return node
        gain, j, thr = _best_split(X[idx], r[idx], min_leaf)
        if j == LEAF or not gain > 0:
            return node
        mask = X[idx, j] <= thr
        feature[node], threshold[node] = j, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


def _boost(X: np.ndarray, y: np.ndarray, init: float, loss: str, config: PropensityConfig) -> BoostedTreesModel:
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    F = np.full(n, init)
    trees = []
    for _ in range(config.n_trees):
        if loss == "logistic":
            p = expit(F)
            r, h = y - p, p * (1.0 - p)
        else:
            r, h = y - F, np.ones(n)
        rows = np.arange(n)
        if config.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(2 * config.min_leaf, int(config.subsample * n)), replace=False))
        tree = _grow_tree(X[rows], r[rows], h[rows], config.max_depth, config.min_leaf)
        F = F + config.shrinkage * tree.predict(X)
        trees.append(tree)
    return BoostedTreesModel(tuple(trees), config.shrinkage, init, config.clip, X.shape[1], loss)


def fit_gbm(X: np.ndarray, T: np.ndarray, config: PropensityConfig = PropensityConfig()) -> BoostedTreesModel:
    """Fits a boosted-tree classifier for ``P(T = 1 | X)``.

    Args:
        X: Covariates, one row per unit.
        T: Binary treatment indicators.
        config: Boosting settings.

    Returns:
        The fitted ensemble; the initial log-odds is the logit of the treated fraction.

    Raises:
        DataError: If ``T`` is not binary or only one class is present.
        ConfigError: If there are fewer than ``2 * min_leaf`` rows.
    """

    X, T = _check_treatment(X, T)
    if X.shape[0] < 2 * config.min_leaf:
        raise ConfigError(f"Need at least {2 * config.min_leaf} rows for min_leaf={config.min_leaf}")
    model = _boost(X, T, float(logit(T.mean())), "logistic", config)
    logger.info("Fitted %d propensity trees on %d rows (treated fraction %.3f)", len(model.trees), len(T), T.mean())
    return model


def fit_gbm_regressor(X: np.ndarray, y: np.ndarray, config: PropensityConfig = PropensityConfig()) -> BoostedTreesModel:
    """Squared-loss boosting, started from the mean outcome."""

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"Got features {X.shape} and targets {y.shape}")
    if X.shape[0] < 2 * config.min_leaf:
        raise ConfigError(f"Need at least {2 * config.min_leaf} rows for min_leaf={config.min_leaf}")
    return _boost(X, y, float(y.mean()), "squared", config)


def predict_regression(model: BoostedTreesModel, X: np.ndarray) -> np.ndarray:
    if model.loss != "squared":
        raise ConfigError("predict_regression needs a squared-loss model")
    return model.raw(X)


def logistic_deviance(model: BoostedTreesModel | LogisticModel, X: np.ndarray, T: np.ndarray) -> float:
    """Mean negative log-likelihood of the unclipped model."""

    eta = model.raw(X)
    return float(np.mean(np.logaddexp(0.0, eta) - T * eta))


def fit_logistic(X: np.ndarray, T: np.ndarray, config: PropensityConfig = PropensityConfig()) -> LogisticModel:
    """Maximum-likelihood logistic regression by damped Newton iterations.

    Zero-variance columns are excluded and their coefficients set to zero.

    Args:
        X: Covariates, one row per unit.
        T: Binary treatment indicators.
        config: Uses ``max_iter``, ``tol`` (on the mean gradient norm) and ``clip``.

    Returns:
        The fitted model.

    Raises:
        ConvergenceError: If the gradient norm is still above ``tol`` after ``max_iter`` iterations.
    """

    X, T = _check_treatment(X, T)
    n, d = X.shape
    keep = np.flatnonzero(X.std(axis=0) > 0)
    dropped = tuple(int(j) for j in np.setdiff1d(np.arange(d), keep))
    if dropped:
        logger.warning("Dropping zero-variance columns %s from the logistic propensity model", list(dropped))
    Z = np.concatenate([np.ones((n, 1)), X[:, keep]], axis=1)

    def loglik(beta: np.ndarray) -> float:
        eta = Z @ beta
        return float(np.sum(T * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(Z.shape[1])
    beta[0] = logit(T.mean())
    current = loglik(beta)
    grad_norm = math.inf
    for it in range(1, config.max_iter + 1):
        p = expit(Z @ beta)
        grad = Z.T @ (T - p)
        grad_norm = float(np.linalg.norm(grad) / n)
        if grad_norm <= config.tol:
            coef = np.zeros(d)
            coef[keep] = beta[1:]
            return LogisticModel(coef, float(beta[0]), config.clip, dropped, it - 1)
        hess = (Z * (p * (1.0 - p))[:, None]).T @ Z
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        while scale > 1e-10:
            candidate = beta + scale * step
            value = loglik(candidate)
            if value >= current:
                beta, current = candidate, value
                break
            scale *= 0.5
        else:
            raise ConvergenceError("Line search failed in logistic regression", it, grad_norm)
    raise ConvergenceError("Logistic regression did not converge", config.max_iter, grad_norm, dropped=dropped)


def fit_constant(T: np.ndarray, n_features: int, config: PropensityConfig = PropensityConfig()) -> ConstantModel:
    T = np.asarray(T, dtype=np.float64)
    if T.size == 0:
        raise DataError("Cannot estimate a propensity from zero rows")
    lo, hi = config.clip
    return ConstantModel(float(np.clip(T.mean(), lo, hi)), n_features, config.clip)


def fit_propensity(X: np.ndarray, T: np.ndarray, config: PropensityConfig = PropensityConfig()) -> PropensityModel:
    """Fits the estimator named by ``config.estimator``."""

    if config.estimator == "constant":
        return fit_constant(T, np.asarray(X).shape[1], config)
    if config.estimator == "logistic":
        return fit_logistic(X, T, config)
    return fit_gbm(X, T, config)


def predict_propensity(model: PropensityModel, X: np.ndarray) -> np.ndarray:
    """Clipped probabilities ``P(T = 1 | X)``.

    Args:
        model: A fitted propensity model.
        X: One covariate vector or a matrix of rows.

    Returns:
        Probabilities within the model's clip bounds (a scalar array for one vector).
    """

    lo, hi = model.clip
    single = np.asarray(X).ndim == 1
    p = np.clip(expit(model.raw(X)), lo, hi)
    return p[0] if single else p


@dataclass(frozen=True)
class PropensitySummary:
    """Diagnostics logged after fitting."""

    estimator: str
    mean: float
    minimum: float
    maximum: float
    clipped_fraction: float = 0.0


def summarize(model: PropensityModel, X: np.ndarray) -> PropensitySummary:
    raw = expit(model.raw(X))
    p = predict_propensity(model, X)
    name = {BoostedTreesModel: "gbm", LogisticModel: "logistic", ConstantModel: "constant"}[type(model)]
    return PropensitySummary(name, float(p.mean()), float(p.min()), float(p.max()), float(np.mean(raw != p)))
