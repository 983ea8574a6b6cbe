"""Weighted split-conformal calibration of generative samples.

Scores are the distance from an observed outcome to the nearest of ``M``
generated samples. Calibration scores are reweighted by a Gaussian
localization kernel and an inverse-propensity balancing weight, the
``1 - alpha`` quantile is taken with the test point's mass at ``+inf``, and
the prediction set is the union of radius-``Q`` intervals around the test
point's samples.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from cdite.errors import ConfigError, ConformalError, ShapeError

__all__ = [
    "NO_LOCALIZATION",
    "CalibrationRecord",
    "Calibration",
    "WeightedScoreSet",
    "PredictionSet",
    "ConformalResult",
    "nonconformity_score",
    "nonconformity_scores",
    "bandwidth",
    "local_weights",
    "balance_weight",
    "normalize_weights",
    "weighted_quantile",
    "build_prediction_set",
    "contains",
    "total_length",
    "membership_equivalence_check",
    "lemma1_check",
    "calibrate",
    "weigh_scores",
    "conformalize",
]

logger = logging.getLogger(__name__)

NO_LOCALIZATION = math.inf

# Partial sums of masses carry rounding error; a crossing within this relative
# distance of the level counts, so uniform weights hit exact integer ranks.
LEVEL_RTOL = 1e-10


@dataclass(frozen=True)
class CalibrationRecord:
    x: np.ndarray
    score: float
    weight: float

    def __post_init__(self) -> None:
        if not self.score >= 0:
            raise ConformalError(f"Scores must be non-negative, got {self.score}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise ConformalError(f"Weights must be finite and non-negative, got {self.weight}")


@dataclass(frozen=True)
class Calibration:
    """Scored calibration units of one arm.

    ``balance`` holds the unnormalized balancing weight of each unit; the
    localization weight depends on the test point and is applied later.
    """

    X: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    balance: np.ndarray = field(repr=False)
    arm: int = 1

    def __post_init__(self) -> None:
        n = self.scores.shape[0]
        if self.X.ndim != 2 or self.X.shape[0] != n or self.balance.shape != (n,):
            raise ShapeError(f"Got covariates {self.X.shape}, scores {self.scores.shape}, weights {self.balance.shape}")
        if n == 0:
            raise ConformalError("Calibration needs at least one unit")

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def records(self) -> Iterator[CalibrationRecord]:
        for x, score, weight in zip(self.X, self.scores, self.balance):
            yield CalibrationRecord(x, float(score), float(weight))


@dataclass(frozen=True)
class WeightedScoreSet:
    """Calibration scores with normalized masses; the test mass sits at ``+inf``."""

    scores: np.ndarray
    masses: np.ndarray
    test_mass: float

    def __post_init__(self) -> None:
        if self.scores.shape != self.masses.shape:
            raise ShapeError(f"Got {self.scores.shape} scores and {self.masses.shape} masses")
        total = float(self.masses.sum()) + self.test_mass
        if abs(total - 1.0) > 1e-12 or np.any(self.masses < 0) or self.test_mass < 0:
            raise ConformalError(f"Masses must be non-negative and sum to 1, got total {total}")

    def quantile(self, level: float) -> float:
        return weighted_quantile(self.scores, self.masses, self.test_mass, level)


@dataclass(frozen=True)
class PredictionSet:
    """Sorted, pairwise disjoint closed intervals, or the entire real line."""

    intervals: tuple[tuple[float, float], ...] = ()
    entire_line: bool = False

    def __post_init__(self) -> None:
        for lo, hi in self.intervals:
            if not lo <= hi:
                raise ConformalError(f"Invalid interval [{lo}, {hi}]")
        for (_, hi), (lo, _) in zip(self.intervals[:-1], self.intervals[1:]):
            if not hi < lo:
                raise ConformalError("Intervals must be sorted and disjoint")

    def contains(self, value: float) -> bool:
        return contains(self, value)

    def total_length(self) -> float:
        return total_length(self)

    def to_dict(self) -> dict[str, Any]:
        return {"intervals": [[lo, hi] for lo, hi in self.intervals], "entire_line": self.entire_line}

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "PredictionSet":
        intervals = tuple((float(lo), float(hi)) for lo, hi in values.get("intervals", []))
        return cls(intervals, bool(values.get("entire_line", False)))


@dataclass(frozen=True)
class ConformalResult:
    prediction_set: PredictionSet
    quantile: float
    test_mass: float


def nonconformity_score(y: float, samples: np.ndarray) -> float:
    """Distance from ``y`` to the nearest generated sample."""

    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ConformalError("Need at least one generated sample")
    return float(np.min(np.abs(y - samples)))


def nonconformity_scores(Y: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Row-wise scores for outcomes ``Y`` against a ``(n, M)`` sample matrix."""

    Y = np.asarray(Y, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] != Y.shape[0] or samples.shape[1] == 0:
        raise ShapeError(f"Got outcomes {Y.shape} and samples {samples.shape}")
    return np.min(np.abs(Y[:, None] - samples), axis=1)


def bandwidth(c: float, d: int) -> float:
    """``h = c * sqrt(d)``; ``c = inf`` selects no localization."""

    if math.isinf(c) and c > 0:
        return NO_LOCALIZATION
    if not c > 0:
        raise ConfigError(f"Bandwidth factor must be positive, got {c}")
    return c * math.sqrt(d)


def local_weights(cal_X: np.ndarray, x_test: np.ndarray, h: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian localization weights over the calibration units and the test point.

    Draws one surrogate point ``x_tilde ~ N(x_test, h^2 I)`` and returns
    ``exp(-|X_j - x_tilde|^2 / (2 h^2))`` for every calibration unit followed
    by the test point. Values are divided by their maximum, a common factor
    which normalization removes; this keeps far-away kernels from underflowing
    all at once.

    Args:
        cal_X: Calibration covariates, one row per unit.
        x_test: The test covariate vector.
        h: Bandwidth, or ``NO_LOCALIZATION``.
        rng: The replicate's localization stream; one draw of ``d`` normals.

    Returns:
        ``len(cal_X) + 1`` weights, the test point last.

    Raises:
        ConfigError: If ``h`` is not positive.
        ShapeError: If the dimensions disagree.
    """

    cal_X = np.asarray(cal_X, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    if cal_X.ndim != 2 or x_test.shape != (cal_X.shape[1],):
        raise ShapeError(f"Got calibration covariates {cal_X.shape} and test point {x_test.shape}")
    if h == NO_LOCALIZATION:
        return np.ones(cal_X.shape[0] + 1)
    if not h > 0:
        raise ConfigError(f"Bandwidth must be positive, got {h}")
    x_tilde = x_test + h * rng.standard_normal(x_test.shape[0])
    points = np.concatenate([cal_X, x_test[None, :]], axis=0)
    log_kernel = -np.sum((points - x_tilde) ** 2, axis=1) / (2.0 * h * h)
    return np.exp(log_kernel - log_kernel.max())


def balance_weight(t: int | np.ndarray, pi_hat: float | np.ndarray) -> np.ndarray:
    """Inverse-propensity weight ``t / pi + (1 - t) / (1 - pi)``."""

    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    if np.any(pi_hat <= 0.0) or np.any(pi_hat >= 1.0):
        raise ConformalError("Propensities must lie strictly inside (0, 1)")
    t = np.asarray(t, dtype=np.float64)
    return t / pi_hat + (1.0 - t) / (1.0 - pi_hat)


def normalize_weights(raw: np.ndarray) -> np.ndarray:
    """Divides non-negative weights by their sum."""

    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0 or np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ConformalError("Weights must be finite and non-negative")
    total = raw.sum()
    if not total > 0:
        raise ConformalError("All weights are zero")
    return raw / total


def _first_crossing(scores: np.ndarray, masses: np.ndarray, level: float) -> float:
    order = np.argsort(scores, kind="stable")
    cumulative = np.cumsum(masses[order])
    hit = np.flatnonzero(cumulative >= level * (1.0 - LEVEL_RTOL))
    if hit.size == 0:
        return math.inf
    return float(scores[order[hit[0]]])


def weighted_quantile(scores: np.ndarray, masses: np.ndarray, test_mass: float, level: float) -> float:
    """Level quantile of ``sum_j masses_j * delta(scores_j) + test_mass * delta(+inf)``.

    This is ``inf {v : sum(masses[scores <= v]) >= level}``, or ``+inf`` when
    the finite mass never reaches ``level``. The test mass only matters
    through the masses it leaves for the finite scores.

    Args:
        scores: Calibration scores.
        masses: Normalized calibration masses.
        test_mass: Normalized mass of the test point.
        level: The quantile level ``1 - alpha``.

    Returns:
        The quantile, possibly ``+inf``.

    Raises:
        ConfigError: If ``level`` is outside ``(0, 1)``.
    """

    if not 0.0 < level < 1.0:
        raise ConfigError(f"Quantile level must be in (0, 1), got {level}")
    del test_mass
    return _first_crossing(np.asarray(scores, dtype=np.float64), np.asarray(masses, dtype=np.float64), level)


def _snap_upper(samples: np.ndarray, radius: float) -> np.ndarray:
    """Largest floats ``u`` with ``|u - s| <= radius`` for each sample ``s``."""

    hi = samples + radius
    over = np.abs(hi - samples) > radius
    while over.any():
        hi[over] = np.nextafter(hi[over], -np.inf)
        over = np.abs(hi - samples) > radius
    nxt = np.nextafter(hi, np.inf)
    grow = np.abs(nxt - samples) <= radius
    while grow.any():
        hi[grow] = nxt[grow]
        nxt = np.nextafter(hi, np.inf)
        grow = np.abs(nxt - samples) <= radius
    return hi


def _snap_lower(samples: np.ndarray, radius: float) -> np.ndarray:
    return -_snap_upper(-samples, radius)


def build_prediction_set(samples: np.ndarray, q: float) -> PredictionSet:
    """Union of closed intervals of radius ``q`` around each sample.

    Endpoints are the outermost floats whose distance to the sample, as
    computed by ``nonconformity_score``, is at most ``q``; touching or
    overlapping intervals are merged.

    Args:
        samples: Generated samples at the test point.
        q: The calibrated quantile, possibly ``+inf``.

    Returns:
        The prediction set.

    Raises:
        ConformalError: If ``q`` is negative or NaN, or there are no samples.
    """

    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ConformalError("Need at least one generated sample")
    if math.isnan(q) or q < 0:
        raise ConformalError(f"Quantile must be non-negative, got {q}")
    if math.isinf(q):
        return PredictionSet(entire_line=True)

    samples = np.sort(samples)
    los, his = _snap_lower(samples, q), _snap_upper(samples, q)
    merged: list[list[float]] = []
    for lo, hi in zip(los.tolist(), his.tolist()):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return PredictionSet(tuple((lo, hi) for lo, hi in merged))


def contains(prediction_set: PredictionSet, value: float) -> bool:
    """Closed-interval membership by binary search."""

    if prediction_set.entire_line:
        return True
    if not prediction_set.intervals:
        return False
    los = np.fromiter((lo for lo, _ in prediction_set.intervals), dtype=np.float64)
    idx = int(np.searchsorted(los, value, side="right")) - 1
    return idx >= 0 and value <= prediction_set.intervals[idx][1]


def total_length(prediction_set: PredictionSet) -> float:
    if prediction_set.entire_line:
        return math.inf
    return float(sum(hi - lo for lo, hi in prediction_set.intervals))


def membership_equivalence_check(y: float, samples: np.ndarray, q: float) -> bool:
    """Checks that ``y`` is in the prediction set exactly when its score is at most ``q``.

    Args:
        y: An outcome value.
        samples: Generated samples.
        q: The quantile.

    Returns:
        The shared truth value of both sides.

    Raises:
        ConformalError: If the two sides disagree.
    """

    inside = contains(build_prediction_set(samples, q), y)
    within = nonconformity_score(y, samples) <= q
    if inside != within:
        raise ConformalError(f"Membership mismatch for y={y!r}, q={q!r}: set says {inside}, score says {within}")
    return inside


def lemma1_check(values: Sequence[float], masses: Sequence[float], beta: float) -> bool:
    """Checks the quantile swap used in the coverage argument.

    With ``v = values`` and ``p = masses`` (last entry is the test point),
    ``v[-1] <= Quantile(beta; sum p_i delta(v_i))`` holds exactly when
    ``v[-1] <= Quantile(beta; sum_{i<n} p_i delta(v_i) + p[-1] delta(+inf))``.

    Args:
        values: ``n + 1`` values.
        masses: ``n + 1`` non-negative masses summing to one.
        beta: Quantile level in ``[0, 1]``.

    Returns:
        True when both sides agree.

    Raises:
        ShapeError: If the inputs differ in length or are empty.
    """

    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(masses, dtype=np.float64)
    if v.shape != p.shape or v.size < 1:
        raise ShapeError(f"Got {v.shape} values and {p.shape} masses")
    full = _first_crossing(v, p, beta)
    swapped = _first_crossing(v[:-1], p[:-1], beta) if v.size > 1 else math.inf
    return bool((v[-1] <= full) == (v[-1] <= swapped))


def calibrate(X: np.ndarray, Y: np.ndarray, samples: np.ndarray, pi_hat: np.ndarray, arm: int = 1) -> Calibration:
    """Scores one arm's calibration units.

    Args:
        X: Covariates of the arm's calibration units.
        Y: Their observed outcomes.
        samples: ``(n, M)`` generated samples at ``X``.
        pi_hat: Estimated propensities at ``X``.
        arm: The treatment arm the units belong to.

    Returns:
        Scores plus balancing weights ``balance_weight(arm, pi_hat)``.
    """

    if arm not in (0, 1):
        raise ConfigError(f"Arm must be 0 or 1, got {arm}")
    X = np.asarray(X, dtype=np.float64)
    scores = nonconformity_scores(Y, samples)
    balance = balance_weight(np.full(len(scores), arm), pi_hat)
    return Calibration(X, scores, balance, arm)


def weigh_scores(
    calibration: Calibration,
    x_test: np.ndarray,
    pi_test: float,
    h: float,
    rng: np.random.Generator,
) -> WeightedScoreSet:
    """Combines localization and balancing weights for one test point.

    The test point's balancing weight is the arm's theoretical weight,
    ``1 / pi`` for the treated arm and ``1 / (1 - pi)`` for the control arm.
    """

    local = local_weights(calibration.X, x_test, h, rng)
    balance = np.append(calibration.balance, balance_weight(calibration.arm, pi_test))
    masses = normalize_weights(local * balance)
    return WeightedScoreSet(calibration.scores, masses[:-1], float(masses[-1]))


def conformalize(
    calibration: Calibration,
    X_test: np.ndarray,
    pi_test: np.ndarray,
    test_samples: np.ndarray,
    alpha: float,
    h: float,
    rng: np.random.Generator,
) -> list[ConformalResult]:
    """Prediction sets for a batch of test points.

    Test points are processed in order and each takes exactly one surrogate
    draw from ``rng`` (none without localization).

    Args:
        calibration: Scored calibration units.
        X_test: Test covariates.
        pi_test: Estimated propensities at ``X_test``.
        test_samples: ``(n_test, M)`` generated samples at ``X_test``.
        alpha: Miscoverage level.
        h: Bandwidth or ``NO_LOCALIZATION``.
        rng: The replicate's localization stream.

    Returns:
        One result per test point.
    """

    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    X_test = np.asarray(X_test, dtype=np.float64)
    test_samples = np.asarray(test_samples, dtype=np.float64)
    if test_samples.ndim != 2 or test_samples.shape[0] != X_test.shape[0]:
        raise ShapeError(f"Got {X_test.shape[0]} test points and samples {test_samples.shape}")
    results = []
    for x, pi, samples in zip(X_test, np.asarray(pi_test, dtype=np.float64), test_samples):
        weighted = weigh_scores(calibration, x, float(pi), h, rng)
        q = weighted.quantile(1.0 - alpha)
        results.append(ConformalResult(build_prediction_set(samples, q), q, weighted.test_mass))
    n_inf = sum(math.isinf(r.quantile) for r in results)
    if n_inf:
        logger.warning("%d of %d test points have an infinite quantile", n_inf, len(results))
    return results
