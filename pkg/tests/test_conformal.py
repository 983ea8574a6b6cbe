"""Tests weighted split-conformal calibration and prediction sets."""

import logging
import math

import numpy as np
import pytest

from cdite.conformal import (
    NO_LOCALIZATION,
    Calibration,
    PredictionSet,
    WeightedScoreSet,
    balance_weight,
    bandwidth,
    build_prediction_set,
    calibrate,
    conformalize,
    contains,
    lemma1_check,
    local_weights,
    membership_equivalence_check,
    nonconformity_score,
    nonconformity_scores,
    normalize_weights,
    total_length,
    weigh_scores,
    weighted_quantile,
)
from cdite.errors import ConfigError, ConformalError, ShapeError

EXAMPLE_SET = PredictionSet(((-0.3, 0.8), (2.7, 3.3)))


@pytest.mark.parametrize(
    "y,samples,expected",
    [
        (0.5, [0.5, 2.0], 0.0),
        (1.0, [0.5, 1.2, 3.0], 0.2),
        (-2.0, [1.5], 3.5),
    ],
)
def test_nonconformity_score(y: float, samples: list[float], expected: float) -> None:
    """Tests the nearest-sample distance.

    Args:
        y: The outcome.
        samples: Generated samples.
        expected: The expected score.
    """

    assert nonconformity_score(y, np.array(samples)) == pytest.approx(expected)


def test_nonconformity_scores_batch() -> None:
    samples = np.array([[0.0, 1.0], [5.0, 7.0]])
    np.testing.assert_allclose(nonconformity_scores(np.array([0.25, 6.5]), samples), [0.25, 0.5])
    with pytest.raises(ShapeError):
        nonconformity_scores(np.array([1.0]), samples)
    with pytest.raises(ConformalError):
        nonconformity_score(1.0, np.array([]))


def test_bandwidth() -> None:
    assert bandwidth(math.inf, 10) == NO_LOCALIZATION
    assert bandwidth(0.1, 4) == pytest.approx(0.2)
    for c in (0.0, -1.0, -math.inf):
        with pytest.raises(ConfigError):
            bandwidth(c, 4)


def test_local_weights_sentinel() -> None:
    """Tests that no localization gives unit weights without consuming randomness."""

    rng = np.random.default_rng(0)
    weights = local_weights(np.zeros((4, 2)), np.ones(2), NO_LOCALIZATION, rng)
    np.testing.assert_array_equal(weights, np.ones(5))
    assert rng.random() == np.random.default_rng(0).random()


def test_local_weights_kernel() -> None:
    """Tests the kernel mode and the ratio of weights at distances r and 2r."""

    d, h, r = 3, 0.7, 0.4
    x_test = np.array([0.2, 0.5, 0.9])
    x_tilde = x_test + h * np.random.default_rng(1).standard_normal(d)
    direction = np.array([1.0, 0.0, 0.0])
    cal_X = np.stack([x_tilde + r * direction, x_tilde + 2 * r * direction, x_tilde])

    weights = local_weights(cal_X, x_test, h, np.random.default_rng(1))
    assert weights.shape == (4,)
    assert weights[2] == weights.max() == 1.0
    assert weights[0] / weights[1] == pytest.approx(math.exp(3 * r * r / (2 * h * h)))

    with pytest.raises(ConfigError):
        local_weights(cal_X, x_test, 0.0, np.random.default_rng(1))
    with pytest.raises(ShapeError):
        local_weights(cal_X, np.zeros(2), h, np.random.default_rng(1))


def test_local_weights_far_points_do_not_underflow() -> None:
    weights = local_weights(np.full((3, 2), 1e3), np.zeros(2), 0.01, np.random.default_rng(2))
    assert np.all(np.isfinite(weights))
    assert weights.max() == 1.0


@pytest.mark.parametrize(
    "t,pi,expected",
    [
        (1, 0.25, 4.0),
        (0, 0.25, 4.0 / 3.0),
        (1, 0.5, 2.0),
        (0, 0.5, 2.0),
    ],
)
def test_balance_weight(t: int, pi: float, expected: float) -> None:
    """Tests the inverse-propensity weights.

    Args:
        t: Treatment indicator.
        pi: Estimated propensity.
        expected: The expected weight.
    """

    assert balance_weight(t, pi) == pytest.approx(expected)


@pytest.mark.parametrize("pi", [0.0, 1.0, -0.1])
def test_balance_weight_rejects_boundary(pi: float) -> None:
    """Tests that propensities outside (0, 1) are rejected.

    Args:
        pi: The invalid propensity.
    """

    with pytest.raises(ConformalError):
        balance_weight(1, pi)


def test_normalize_weights() -> None:
    np.testing.assert_allclose(normalize_weights(np.full(9, 3.0)), np.full(9, 0.1))
    np.testing.assert_array_equal(normalize_weights(np.array([1.0, 3.0])), [0.25, 0.75])
    rng = np.random.default_rng(3)
    for _ in range(100):
        masses = normalize_weights(rng.exponential(size=int(rng.integers(1, 50))))
        assert abs(masses.sum() - 1.0) <= 1e-12
    for raw in ([0.0, 0.0], [1.0, -1.0], [1.0, math.nan], [math.inf, 1.0], []):
        with pytest.raises(ConformalError):
            normalize_weights(np.array(raw))


def test_weighted_quantile_examples() -> None:
    """Tests the worked quantile examples, including the infinite case."""

    scores = np.array([1.0, 2.0, 3.0])
    masses = np.array([0.3, 0.3, 0.3])
    assert weighted_quantile(scores, masses, 0.1, 1 - 0.4) == 2.0
    assert weighted_quantile(scores, masses, 0.1, 1 - 0.05) == math.inf
    assert WeightedScoreSet(scores, masses, 0.1).quantile(0.6) == 2.0

    with pytest.raises(ConfigError):
        weighted_quantile(scores, masses, 0.1, 1.0)
    with pytest.raises(ConformalError):
        WeightedScoreSet(scores, masses, 0.2)


def _oracle_quantile(scores: np.ndarray, masses: np.ndarray, level: float) -> float:
    acc = 0.0
    for score, mass in sorted(zip(scores.tolist(), masses.tolist()), key=lambda pair: pair[0]):
        acc += mass
        if acc >= level:
            return score
    return math.inf


def test_weighted_quantile_matches_oracle() -> None:
    """Tests random weighted score sets against a sort-and-accumulate oracle."""

    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(1, 40))
        scores = np.round(rng.exponential(size=n), 1)
        raw = rng.exponential(size=n + 1)
        masses = raw / raw.sum()
        level = float(rng.uniform(0.05, 0.99))
        expected = _oracle_quantile(scores, masses[:-1], level)
        assert weighted_quantile(scores, masses[:-1], float(masses[-1]), level) == expected


def _order_statistic(scores: np.ndarray, alpha: float) -> float:
    n = scores.size
    k = math.ceil(round((1 - alpha) * (n + 1), 9))
    return float(np.sort(scores)[k - 1]) if k <= n else math.inf


@pytest.mark.parametrize(
    "n,expected",
    [
        (9, 9.0),
        (10, 10.0),
        (29, 27.0),
        (69, 63.0),
        (79, 72.0),
        (89, 81.0),
        (109, 99.0),
        (8, math.inf),
    ],
)
def test_uniform_weights_at_integer_ranks(n: int, expected: float) -> None:
    """Tests scores ``1..n`` at alpha 0.1, where ``0.9 (n + 1)`` can be a whole number.

    Args:
        n: Number of calibration scores.
        expected: The order statistic.
    """

    masses = normalize_weights(np.ones(n + 1))
    assert weighted_quantile(np.arange(1.0, n + 1.0), masses[:-1], float(masses[-1]), 0.9) == expected


def test_uniform_weights_give_order_statistic() -> None:
    """Tests the classical split-conformal order statistic under uniform weights."""

    rng = np.random.default_rng(5)
    alphas = [0.5, 0.25, 0.2, 0.1, 0.05, 0.01] + rng.uniform(0.01, 0.5, size=200).tolist()
    for i, alpha in enumerate(alphas):
        for n in (range(1, 121) if i < 6 else [int(rng.integers(1, 100))]):
            scores = rng.exponential(size=n)
            masses = normalize_weights(np.ones(n + 1))
            q = weighted_quantile(scores, masses[:-1], float(masses[-1]), 1 - alpha)
            assert q == _order_statistic(scores, alpha)


def test_build_prediction_set_example() -> None:
    """Tests the merge of three samples into two intervals."""

    result = build_prediction_set(np.array([0.0, 0.5, 3.0]), 0.3)
    assert len(result.intervals) == 2
    (a, b), (c, d) = result.intervals
    assert (a, b, c, d) == pytest.approx((-0.3, 0.8, 2.7, 3.3))
    assert total_length(result) == pytest.approx(1.7)
    assert not result.entire_line


def test_build_prediction_set_degenerate() -> None:
    """Tests the zero-radius, infinite and invalid quantiles."""

    points = build_prediction_set(np.array([2.0, 1.0, 1.0]), 0.0)
    assert points.intervals == ((1.0, 1.0), (2.0, 2.0))
    assert total_length(points) == 0.0

    everything = build_prediction_set(np.array([0.0]), math.inf)
    assert everything.entire_line
    assert contains(everything, -1e300)
    assert total_length(everything) == math.inf

    for q in (-0.1, math.nan):
        with pytest.raises(ConformalError):
            build_prediction_set(np.array([0.0]), q)
    with pytest.raises(ConformalError):
        build_prediction_set(np.array([]), 1.0)


def test_weighted_quantile_is_monotone_in_level() -> None:
    """Tests that a higher level never gives a smaller quantile."""

    rng = np.random.default_rng(11)
    levels = np.linspace(0.01, 0.99, 99)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        scores = np.round(rng.normal(size=n), 1)
        masses = rng.dirichlet(np.ones(n + 1))
        quantiles = [weighted_quantile(scores, masses[:-1], float(masses[-1]), float(b)) for b in levels]
        assert all(a <= b for a, b in zip(quantiles, quantiles[1:]))


@pytest.mark.parametrize("scale", [0.125, 4.0, 3.7, 1e6])
def test_weight_scale_does_not_matter(scale: float) -> None:
    """Tests that rescaling the raw weights leaves masses, quantile and set unchanged.

    Args:
        scale: Factor applied to every raw weight.
    """

    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        raw = rng.exponential(size=n + 1)
        scores, samples = rng.exponential(size=n), rng.normal(size=5)
        base, scaled = normalize_weights(raw), normalize_weights(raw * scale)
        np.testing.assert_allclose(scaled, base, rtol=1e-12)
        q = weighted_quantile(scores, base[:-1], float(base[-1]), 0.9)
        q_scaled = weighted_quantile(scores, scaled[:-1], float(scaled[-1]), 0.9)
        assert q_scaled == q
        assert build_prediction_set(samples, q_scaled) == build_prediction_set(samples, q)


def test_weigh_scores_ignores_common_balance_scale() -> None:
    """Tests that a constant propensity of any value gives the same weighted scores."""

    rng = np.random.default_rng(13)
    X, Y, samples = rng.normal(size=(30, 2)), rng.normal(size=30), rng.normal(size=(30, 4))
    x_test = rng.normal(size=2)
    sets = []
    for pi in (0.5, 0.25, 0.125):
        calibration = calibrate(X, Y, samples, np.full(30, pi))
        sets.append(weigh_scores(calibration, x_test, pi, NO_LOCALIZATION, rng))
    for other in sets[1:]:
        np.testing.assert_allclose(other.masses, sets[0].masses, rtol=1e-12)
        assert other.quantile(0.9) == sets[0].quantile(0.9)


def test_build_prediction_set_ignores_order_and_duplicates() -> None:
    """Tests that permuting or repeating the samples gives the same merged set."""

    rng = np.random.default_rng(14)
    for _ in range(200):
        samples = rng.normal(size=int(rng.integers(1, 12))) * 3
        q = float(rng.exponential())
        expected = build_prediction_set(samples, q)
        assert build_prediction_set(rng.permutation(samples), q) == expected
        assert build_prediction_set(np.concatenate([samples, samples[::-1]]), q) == expected
        assert PredictionSet(expected.intervals) == expected
        lows = [lo for lo, _ in expected.intervals]
        assert lows == sorted(lows)


@pytest.mark.parametrize(
    "value,inside",
    [
        (-0.3, True),
        (0.8, True),
        (0.0, True),
        (1.5, False),
        (2.7, True),
        (3.3, True),
        (3.31, False),
        (-5.0, False),
    ],
)
def test_contains(value: float, inside: bool) -> None:
    """Tests closed-interval membership in the two-interval example.

    Args:
        value: The value to look up.
        inside: Whether it belongs to the set.
    """

    assert contains(EXAMPLE_SET, value) == inside
    assert EXAMPLE_SET.contains(value) == inside


def test_prediction_set_validation() -> None:
    assert total_length(PredictionSet(((1.0, 4.0),))) == 3.0
    assert not contains(PredictionSet(), 0.0)
    with pytest.raises(ConformalError):
        PredictionSet(((0.0, 2.0), (1.0, 3.0)))
    with pytest.raises(ConformalError):
        PredictionSet(((2.0, 1.0),))
    assert PredictionSet.from_dict(EXAMPLE_SET.to_dict()) == EXAMPLE_SET


def test_membership_equivalence() -> None:
    """Tests set membership against the score on random instances with boundary ties."""

    rng = np.random.default_rng(6)
    for i in range(1000):
        samples = rng.normal(size=int(rng.integers(1, 10))) * 10 ** float(rng.uniform(-3, 3))
        kind = i % 4
        if kind == 0:
            y, q = float(rng.normal() * 3), float(rng.exponential())
        elif kind == 1:
            # The outcome sits exactly at distance q from its nearest sample.
            y = float(rng.normal() * 3)
            q = nonconformity_score(y, samples)
        elif kind == 2:
            q = float(rng.exponential())
            prediction_set = build_prediction_set(samples, q)
            lo, hi = prediction_set.intervals[int(rng.integers(len(prediction_set.intervals)))]
            y = lo if rng.random() < 0.5 else hi
            assert membership_equivalence_check(y, samples, q)
        else:
            y, q = float(rng.normal() * 1e6), math.inf
            assert membership_equivalence_check(y, samples, q)
        membership_equivalence_check(y, samples, q)
        membership_equivalence_check(float(np.nextafter(y, math.inf)), samples, q)
        membership_equivalence_check(float(np.nextafter(y, -math.inf)), samples, q)


def test_lemma1_examples() -> None:
    assert lemma1_check([1.0, 2.0], [0.5, 0.5], 0.5)
    assert lemma1_check([3.0, 1.0, 2.0], [0.6, 0.4, 0.0], 0.7)
    with pytest.raises(ShapeError):
        lemma1_check([1.0], [0.5, 0.5], 0.5)


def test_lemma1_random() -> None:
    """Tests the quantile swap on random instances, ties included."""

    rng = np.random.default_rng(7)
    for i in range(1000):
        n = int(rng.integers(1, 21))
        values = rng.integers(0, 5, size=n + 1).astype(float) if i % 2 else rng.normal(size=n + 1)
        masses = rng.dirichlet(np.ones(n + 1))
        if i % 10 == 0:
            masses[-1] = 0.0
            masses /= masses.sum()
        assert lemma1_check(values, masses, float(rng.uniform()))


def test_calibrate_control_arm() -> None:
    calibration = calibrate(np.zeros((2, 1)), np.array([0.0, 1.0]), np.array([[0.5], [0.5]]), np.array([0.25, 0.5]), 0)
    np.testing.assert_allclose(calibration.balance, [4.0 / 3.0, 2.0])
    np.testing.assert_allclose(calibration.scores, [0.5, 0.5])
    assert len(calibration) == 2
    assert [r.weight for r in calibration.records] == pytest.approx([4.0 / 3.0, 2.0])
    with pytest.raises(ConfigError):
        calibrate(np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)), np.full(2, 0.5), 2)
    with pytest.raises(ConformalError):
        Calibration(np.zeros((0, 1)), np.zeros(0), np.zeros(0))


def test_unlocalized_constant_propensity_is_split_conformal() -> None:
    """Tests that no localization and a constant propensity reduce to the order statistic."""

    rng = np.random.default_rng(8)
    alpha = 0.1
    for _ in range(100):
        n = int(rng.integers(10, 200))
        X = rng.normal(size=(n, 2))
        Y = rng.normal(size=n)
        samples = rng.normal(size=(n, 5))
        calibration = calibrate(X, Y, samples, np.full(n, 0.5))
        X_test, test_samples = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))
        results = conformalize(calibration, X_test, np.full(3, 0.5), test_samples, alpha, NO_LOCALIZATION, rng)

        expected = _order_statistic(calibration.scores, alpha)
        for result, row in zip(results, test_samples):
            assert result.quantile == expected
            assert result.test_mass == pytest.approx(1 / (n + 1))
            assert result.prediction_set == build_prediction_set(row, expected)


def test_conformalize_takes_one_draw_per_test_point() -> None:
    """Tests that the batch matches point-by-point weighting on the same stream."""

    rng = np.random.default_rng(9)
    n, d = 50, 3
    X, Y, samples = rng.uniform(size=(n, d)), rng.normal(size=n), rng.normal(size=(n, 8))
    calibration = calibrate(X, Y, samples, rng.uniform(0.2, 0.8, n))
    X_test, pi_test, test_samples = rng.uniform(size=(4, d)), rng.uniform(0.2, 0.8, 4), rng.normal(size=(4, 8))
    h = bandwidth(0.5, d)

    results = conformalize(calibration, X_test, pi_test, test_samples, 0.1, h, np.random.default_rng(10))
    stream = np.random.default_rng(10)
    for result, x, pi in zip(results, X_test, pi_test):
        weighted = weigh_scores(calibration, x, float(pi), h, stream)
        assert result.quantile == weighted.quantile(0.9)
        assert result.test_mass == weighted.test_mass


def test_conformalize_errors_and_warning(caplog: pytest.LogCaptureFixture, monkeypatch: pytest.MonkeyPatch) -> None:
    """Tests argument checks and the infinite-quantile warning.

    Args:
        caplog: Captures the warning.
        monkeypatch: Restores propagation, which the command line turns off.
    """

    monkeypatch.setattr(logging.getLogger("cdite"), "propagate", True)
    calibration = calibrate(np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)), np.full(2, 0.5))
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        conformalize(calibration, np.zeros((1, 1)), np.full(1, 0.5), np.zeros((1, 1)), 0.0, NO_LOCALIZATION, rng)
    with pytest.raises(ShapeError):
        conformalize(calibration, np.zeros((2, 1)), np.full(2, 0.5), np.zeros((1, 1)), 0.1, NO_LOCALIZATION, rng)

    with caplog.at_level(logging.WARNING, logger="cdite.conformal"):
        results = conformalize(calibration, np.zeros((1, 1)), np.full(1, 0.5), np.zeros((1, 1)), 0.05, math.inf, rng)
    assert results[0].prediction_set.entire_line
    assert "infinite quantile" in caplog.text
