"""Benchmark harness.

One replicate generates a dataset, fits the propensity model and the score
source (diffusion model or MLP regressor) on one treatment arm, calibrates,
and builds prediction sets for every test unit. Replicates run in a joblib
pool; their records are folded into per-method means with normal-theory
95% intervals.

Every random stream is keyed by the replicate seed and the pipeline stage,
so methods that share a stage see identical draws. The naive baseline
draws its own test samples.
"""

import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from cdite.conformal import (
    NO_LOCALIZATION,
    Calibration,
    ConformalResult,
    PredictionSet,
    bandwidth,
    calibrate,
    conformalize,
)
from cdite.datagen import Dataset, DgpConfig, SemiSyntheticConfig, gen_dataset, semi_synthetic_from_csv
from cdite.diffusion import DiffusionConfig, DiffusionModel, sample_batch, train_denoiser
from cdite.errors import ConfigError, CditeError, DataError, ReplicateError
from cdite.numerics import MlpRegressor, fit_mlp_regressor
from cdite.propensity import PropensityConfig, fit_propensity, predict_propensity, summarize
from cdite.utils.seeding import derive_seed, make_rng
from cdite.utils.version import code_version

logger = logging.getLogger(__name__)

METHODS = ("cdm", "cdm_nolocal", "mlp", "naive", "cqr", "cf")
EXTERNAL_METHODS = ("cqr", "cf")
DEFAULT_C_GRID = (0.02, 0.05, 0.1, 0.2, 0.5, 1.0, math.inf)
N_GROUPS = 5
Z_95 = 1.96


@dataclass(frozen=True)
class CsvSource:
    """Semi-synthetic data generated from a CSV file."""

    path: str
    config: SemiSyntheticConfig = SemiSyntheticConfig()


DataSource = DgpConfig | CsvSource


def format_c(c: float) -> str:
    return "inf" if math.isinf(c) else f"{c:g}"


@dataclass(frozen=True)
class MethodSpec:
    """One benchmarked method.

    ``c`` fixes the bandwidth factor; when it is None, ``cdm`` and ``mlp``
    select it from ``c_grid`` on held-out training rows. ``hidden`` sets the
    MLP baseline's widths and ``external_path`` points ``cqr``/``cf`` at
    externally produced records.
    """

    method: str
    M: int = 40
    alpha: float = 0.05
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    c: float | None = None
    hidden: tuple[int, ...] = (128, 128, 128)
    external_path: str | None = None
    label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "c_grid", tuple(float(c) for c in self.c_grid))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.c is not None:
            object.__setattr__(self, "c", float(self.c))
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.M < 1:
            raise ConfigError(f"M must be at least 1, got {self.M}")
        if self.c is not None and not self.c > 0:
            raise ConfigError(f"Bandwidth factor must be positive, got {self.c}")
        if any(not c > 0 for c in self.c_grid):
            raise ConfigError(f"Bandwidth grid entries must be positive, got {self.c_grid}")

    @property
    def name(self) -> str:
        return self.label or self.method

    @property
    def needs_selection(self) -> bool:
        return self.method in ("cdm", "mlp") and self.c is None and len(self.c_grid) > 1

    @classmethod
    def from_dict(cls, values: dict[str, Any] | str) -> "MethodSpec":
        if isinstance(values, str):
            return cls(values)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown method settings: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["c_grid"] = list(self.c_grid)
        out["hidden"] = list(self.hidden)
        return out


@dataclass(frozen=True)
class ReplicateRecord:
    """Result of one (replicate, method) cell."""

    method: str
    replicate: int
    seed: int
    alpha: float
    coverage: float | None = None
    median_length: float | None = None
    infinite_count: int = 0
    n_test: int = 0
    bandwidth: float | None = None
    group_coverage: tuple[float | None, ...] = ()
    wallclock_seconds: float | None = None
    status: str = "ok"
    error: str | None = None
    experiment_id: str = ""
    config_hash: str = ""
    code_version: str = field(default_factory=code_version)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["group_coverage"] = list(self.group_coverage)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ReplicateRecord":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        known["group_coverage"] = tuple(known.get("group_coverage") or ())
        return cls(**known)


@dataclass(frozen=True)
class Holdout:
    """Pseudo-test units for bandwidth selection, with the score source's draws at them."""

    X: np.ndarray
    Y: np.ndarray
    pi: np.ndarray
    samples: np.ndarray


@dataclass(frozen=True)
class BandwidthScore:
    c: float
    coverage: float
    median_length: float


def coverage_flags(sets: Sequence[PredictionSet], targets: np.ndarray) -> np.ndarray:
    return np.array([s.contains(float(y)) for s, y in zip(sets, targets)], dtype=bool)


def set_lengths(sets: Sequence[PredictionSet]) -> np.ndarray:
    return np.array([s.total_length() for s in sets], dtype=np.float64)


def norm_groups(X: np.ndarray, n_groups: int = N_GROUPS) -> np.ndarray:
    """Group index of each row by quantile bins of ``|X|_2``."""

    norms = np.linalg.norm(X, axis=1)
    edges = np.quantile(norms, np.linspace(0.0, 1.0, n_groups + 1)[1:-1])
    return np.searchsorted(edges, norms, side="right")


def subgroup_coverage(covered: np.ndarray, groups: np.ndarray, n_groups: int = N_GROUPS) -> tuple[float | None, ...]:
    """Empirical coverage within each group; None for empty groups."""

    out: list[float | None] = []
    for g in range(n_groups):
        members = covered[groups == g]
        out.append(float(members.mean()) if members.size else None)
    return tuple(out)


def choose_bandwidth(scores: Sequence[BandwidthScore], alpha: float) -> float:
    """Picks a bandwidth factor from validation results.

    The smallest factor reaching ``1 - alpha`` validation coverage wins. If
    none qualifies, the highest coverage wins, then the shorter median
    length, then the smaller factor.

    Args:
        scores: One validation result per candidate factor.
        alpha: Miscoverage level.

    Returns:
        The chosen factor.

    Raises:
        ConfigError: If there are no candidates.
    """

    if not scores:
        raise ConfigError("Bandwidth grid is empty")
    qualifying = [s for s in scores if s.coverage >= 1.0 - alpha]
    if qualifying:
        return min(s.c for s in qualifying)
    return min(scores, key=lambda s: (-s.coverage, s.median_length, s.c)).c


def select_bandwidth(
    calibration: Calibration,
    holdout: Holdout,
    grid: Sequence[float],
    alpha: float,
    seed: int,
) -> tuple[float, list[BandwidthScore]]:
    """Chooses the bandwidth factor by conformalizing held-out training units.

    Args:
        calibration: Calibration built from the remaining training units.
        holdout: Held-out units with known outcomes.
        grid: Candidate factors ``c``; ``inf`` means no localization.
        alpha: Miscoverage level.
        seed: Replicate seed; each factor gets its own localization stream.

    Returns:
        The chosen factor and the validation result of every candidate.

    Raises:
        ConfigError: If the grid is empty.
    """

    if not grid:
        raise ConfigError("Bandwidth grid is empty")
    if len(grid) == 1:
        return float(grid[0]), []
    d = holdout.X.shape[1]
    scores = []
    for c in grid:
        rng = make_rng(seed, "select", format_c(c))
        results = conformalize(calibration, holdout.X, holdout.pi, holdout.samples, alpha, bandwidth(c, d), rng)
        sets = [r.prediction_set for r in results]
        score = BandwidthScore(
            float(c),
            float(coverage_flags(sets, holdout.Y).mean()),
            float(np.median(set_lengths(sets))),
        )
        logger.debug(
            "c=%s validation coverage %.4f median length %.4f", format_c(c), score.coverage, score.median_length
        )
        scores.append(score)
    chosen = choose_bandwidth(scores, alpha)
    logger.info("Selected bandwidth factor c=%s from %d candidates", format_c(chosen), len(scores))
    return chosen, scores


def naive_interval(samples: np.ndarray, alpha: float) -> PredictionSet:
    """The central ``1 - alpha`` interval of the generated samples."""

    lo, hi = np.quantile(np.asarray(samples, dtype=np.float64), [alpha / 2.0, 1.0 - alpha / 2.0])
    return PredictionSet(((float(lo), float(hi)),))


def run_method_naive(
    model: DiffusionModel,
    x_test: np.ndarray,
    M: int,
    alpha: float,
    rng: np.random.Generator,
) -> list[PredictionSet]:
    """Central ``1 - alpha`` intervals of ``M`` fresh draws, without calibration.

    Args:
        model: The trained diffusion model.
        x_test: One covariate vector or a ``(n, d)`` batch.
        M: Draws per test point.
        alpha: Miscoverage level.
        rng: Sampling stream.

    Returns:
        One single-interval set per test point.
    """

    X = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    return [naive_interval(draws, alpha) for draws in sample_batch(model, X, M, rng)]


def run_method_mlp(
    regressor: MlpRegressor,
    cal: Dataset,
    pi_cal: np.ndarray,
    X_test: np.ndarray,
    pi_test: np.ndarray,
    alpha: float,
    h: float,
    rng: np.random.Generator,
    arm: int = 1,
) -> list[PredictionSet]:
    """Weighted conformal intervals around an MLP point prediction.

    Scores are absolute residuals on the arm's calibration units, which is the
    single-sample case of the nearest-sample score, so every set is one
    interval ``mu(x) +/- Q``.

    Args:
        regressor: Point regressor trained on the arm's training units.
        cal: The arm's calibration units.
        pi_cal: Estimated propensities at ``cal.X``.
        X_test: Test covariates.
        pi_test: Estimated propensities at ``X_test``.
        alpha: Miscoverage level.
        h: Bandwidth or ``NO_LOCALIZATION``.
        rng: Localization stream.
        arm: Treatment arm.

    Returns:
        One prediction set per test unit.
    """

    calibration = calibrate(cal.X, cal.Y, regressor.predict(cal.X)[:, None], pi_cal, arm)
    results = conformalize(calibration, X_test, pi_test, regressor.predict(X_test)[:, None], alpha, h, rng)
    return [r.prediction_set for r in results]


def load_source(source: DataSource, seed: int) -> Dataset:
    """Generates one replicate's dataset from a synthetic or CSV-backed source."""

    if isinstance(source, CsvSource):
        return semi_synthetic_from_csv(source.path, replace(source.config, seed=seed))
    if isinstance(source, DgpConfig):
        return gen_dataset(source, make_rng(seed, "data"))
    raise ConfigError(f"Unsupported data source {type(source).__name__}")


def regressor_hidden(regressor: MlpRegressor) -> tuple[int, ...]:
    """Hidden widths of a trained regressor."""

    return tuple(layer.weight.shape[0] for layer in regressor.params.layers[:-1])


def coverage_target(test: Dataset, arm: int) -> np.ndarray:
    """``Y(1) - Y(0)`` for the treated arm, ``Y(0)`` for the control arm."""

    if not test.has_oracles:
        raise DataError("Coverage needs the potential-outcome columns of the test units")
    return test.tau if arm == 1 else np.asarray(test.y0)


class ReplicateContext:
    """Shared stages of one replicate, computed on first use."""

    def __init__(
        self,
        dataset: Dataset,
        seed: int,
        diffusion: DiffusionConfig,
        propensity: PropensityConfig,
        arm: int,
        model: DiffusionModel | None = None,
        regressor: MlpRegressor | None = None,
    ) -> None:
        if arm not in (0, 1):
            raise ConfigError(f"Arm must be 0 or 1, got {arm}")
        self.seed = seed
        self.diffusion = diffusion
        self.arm = arm
        train = dataset.subset("train")
        self.cal = dataset.subset("cal").arm(arm)
        self.test = dataset.subset("test")
        arm_train = train.arm(arm)
        if len(arm_train) < 2 or len(self.cal) < 1 or len(self.test) < 1:
            raise DataError(
                f"Arm {arm} needs training and calibration units: got {len(arm_train)} training, "
                f"{len(self.cal)} calibration, {len(self.test)} test"
            )

        if model is not None and model.covariate_dim != dataset.d:
            raise DataError(f"Model expects {model.covariate_dim} covariates, the data has {dataset.d}")
        if regressor is not None and regressor.x_shift.shape[0] != dataset.d:
            raise DataError(f"Regressor expects {regressor.x_shift.shape[0]} covariates, the data has {dataset.d}")

        order = make_rng(seed, "split").permutation(len(arm_train))
        n_val = min(len(arm_train) - 1, max(1, round(diffusion.val_fraction * len(arm_train))))
        n_val = n_val if diffusion.val_fraction > 0 else 0
        held = np.zeros(len(arm_train), dtype=bool)
        held[order[:n_val]] = True
        self.fit, self.val = arm_train.take(~held), arm_train.take(held)

        estimator = fit_propensity(train.X, train.T, replace(propensity, seed=derive_seed(seed, "propensity")))
        summary = summarize(estimator, train.X)
        logger.info(
            "Propensity %s: mean %.3f range [%.3f, %.3f], %.1f%% clipped",
            summary.estimator,
            summary.mean,
            summary.minimum,
            summary.maximum,
            100.0 * summary.clipped_fraction,
        )
        self.pi = {name: np.asarray(predict_propensity(estimator, part.X)) for name, part in self.parts.items()}
        self._model = model
        self._samples: dict[str, np.ndarray] = {}
        self._regressors: dict[tuple[int, ...], MlpRegressor] = {}
        if regressor is not None:
            self._regressors[regressor_hidden(regressor)] = regressor

    @property
    def parts(self) -> dict[str, Dataset]:
        return {"fit": self.fit, "val": self.val, "cal": self.cal, "test": self.test}

    @property
    def target(self) -> np.ndarray:
        return coverage_target(self.test, self.arm)

    @property
    def model(self) -> DiffusionModel:
        if self._model is None:
            self._model = train_denoiser(
                self.fit.X,
                self.fit.Y,
                self.diffusion,
                make_rng(self.seed, "diffusion", "train"),
                self.val.X if len(self.val) else None,
                self.val.Y if len(self.val) else None,
            )
        return self._model

    def diffusion_samples(self, part: str, M: int) -> np.ndarray:
        """``(n, M)`` draws at a part's covariates; larger requests reuse the same stream."""

        cached = self._samples.get(part)
        if cached is None or cached.shape[1] < M:
            rng = make_rng(self.seed, "diffusion", part)
            cached = sample_batch(self.model, self.parts[part].X, M, rng)
            self._samples[part] = cached
        return cached[:, :M]

    def regressor(self, hidden: tuple[int, ...]) -> MlpRegressor:
        if hidden not in self._regressors:
            self._regressors[hidden] = fit_mlp_regressor(
                self.fit.X,
                self.fit.Y,
                hidden,
                self.diffusion.train_config(),
                make_rng(self.seed, "mlp", "train"),
                self.val.X if len(self.val) else None,
                self.val.Y if len(self.val) else None,
            )
        return self._regressors[hidden]

    def mlp_predictions(self, hidden: tuple[int, ...]) -> dict[str, np.ndarray]:
        """``(n, 1)`` point predictions per part, used as single-sample draws."""

        regressor = self.regressor(hidden)
        return {name: regressor.predict(p.X)[:, None] for name, p in self.parts.items() if len(p)}

    def warm(self, methods: Sequence[MethodSpec]) -> None:
        """Draws every sample matrix the methods need at the largest ``M`` each part is used with."""

        sizes: dict[str, int] = defaultdict(int)
        for spec in methods:
            if spec.method in ("cdm", "cdm_nolocal"):
                sizes["test"] = max(sizes["test"], spec.M)
                sizes["cal"] = max(sizes["cal"], spec.M)
            if spec.method == "cdm" and spec.needs_selection:
                sizes["fit"] = max(sizes["fit"], spec.M)
                sizes["val"] = max(sizes["val"], spec.M)
        for part, M in sorted(sizes.items()):
            self.diffusion_samples(part, M)


def _conformalize_draws(
    ctx: ReplicateContext,
    draws: dict[str, np.ndarray],
    spec: MethodSpec,
    c: float | None,
) -> tuple[list[ConformalResult], float]:
    if c is None:
        if len(ctx.val) == 0:
            raise ConfigError("Bandwidth selection needs held-out training units (val_fraction > 0)")
        selection = calibrate(ctx.fit.X, ctx.fit.Y, draws["fit"], ctx.pi["fit"], ctx.arm)
        holdout = Holdout(ctx.val.X, ctx.val.Y, ctx.pi["val"], draws["val"])
        c, _ = select_bandwidth(selection, holdout, spec.c_grid, spec.alpha, ctx.seed)
    calibration = calibrate(ctx.cal.X, ctx.cal.Y, draws["cal"], ctx.pi["cal"], ctx.arm)
    h = bandwidth(c, ctx.test.d)
    results = conformalize(
        calibration, ctx.test.X, ctx.pi["test"], draws["test"], spec.alpha, h, make_rng(ctx.seed, "localize")
    )
    return results, c


def conformal_results(ctx: ReplicateContext, spec: MethodSpec) -> tuple[list[ConformalResult], float]:
    """Runs one conformal method on the context's test units.

    Args:
        ctx: The replicate's shared stages.
        spec: A ``cdm``, ``cdm_nolocal`` or ``mlp`` method.

    Returns:
        One result per test unit and the bandwidth factor that was used.

    Raises:
        ConfigError: If the method is not conformal or the grid is empty.
    """

    c: float | None
    if spec.method == "mlp":
        c = spec.c if spec.c is not None else _grid_c(spec)
        return _conformalize_draws(ctx, ctx.mlp_predictions(spec.hidden), spec, c)
    if spec.method == "cdm_nolocal":
        c = NO_LOCALIZATION
    elif spec.method == "cdm":
        c = spec.c if spec.c is not None else _grid_c(spec)
    else:
        raise ConfigError(f"{spec.method} is not a conformal method")
    parts = ("cal", "test", "fit", "val") if c is None else ("cal", "test")
    draws = {part: ctx.diffusion_samples(part, spec.M) for part in parts}
    return _conformalize_draws(ctx, draws, spec, c)


def _method_sets(ctx: ReplicateContext, spec: MethodSpec) -> tuple[list[PredictionSet], float | None]:
    if spec.method == "naive":
        return run_method_naive(ctx.model, ctx.test.X, spec.M, spec.alpha, make_rng(ctx.seed, "naive", "test")), None
    results, c = conformal_results(ctx, spec)
    return [r.prediction_set for r in results], c


def _grid_c(spec: MethodSpec) -> float | None:
    """The grid's only value, or None when a selection is needed."""

    if not spec.c_grid:
        raise ConfigError("Bandwidth grid is empty")
    return spec.c_grid[0] if len(spec.c_grid) == 1 else None


def evaluate_sets(
    sets: Sequence[PredictionSet],
    target: np.ndarray,
    X: np.ndarray,
) -> dict[str, Any]:
    """Coverage, median length, infinite-set count and subgroup coverage of a batch of sets."""

    covered = coverage_flags(sets, target)
    lengths = set_lengths(sets)
    return {
        "coverage": float(covered.mean()),
        "median_length": float(np.median(lengths)),
        "infinite_count": int(np.isinf(lengths).sum()),
        "n_test": len(sets),
        "group_coverage": subgroup_coverage(covered, norm_groups(X)),
    }


def _failed(spec: MethodSpec, replicate: int, seed: int, error: Exception) -> ReplicateRecord:
    return ReplicateRecord(
        spec.name, replicate, seed, spec.alpha, status="failed", error=f"{type(error).__name__}: {error}"
    )


def run_replicate_methods(
    source: DataSource,
    methods: Sequence[MethodSpec],
    seed: int,
    diffusion: DiffusionConfig = DiffusionConfig(),
    propensity: PropensityConfig = PropensityConfig(),
    arm: int = 1,
    replicate: int = 0,
    record_wallclock: bool = False,
    strict: bool = False,
) -> list[ReplicateRecord]:
    """Runs several methods on one replicate, sharing data, models and samples.

    Args:
        source: The data-generating process.
        methods: Internally computed methods to run.
        seed: The replicate seed.
        diffusion: Denoiser settings; its training settings also drive the MLP baseline.
        propensity: Propensity estimator settings.
        arm: Treatment arm to infer.
        replicate: Replicate index, stored in the records.
        record_wallclock: Store elapsed seconds in the records.
        strict: Raise instead of returning failed records.

    Returns:
        One record per method, in the order given.

    Raises:
        ReplicateError: In strict mode, wrapping the first failure.
    """

    start = time.perf_counter()
    try:
        ctx = ReplicateContext(load_source(source, seed), seed, diffusion, propensity, arm)
        ctx.warm(methods)
    except CditeError as e:
        if strict:
            raise ReplicateError(str(e), replicate, seed) from e
        logger.error("Replicate %d (seed %d) failed: %s", replicate, seed, e)
        return [_failed(spec, replicate, seed, e) for spec in methods]
    shared_seconds = time.perf_counter() - start

    records = []
    for spec in methods:
        method_start = time.perf_counter()
        try:
            sets, c = _method_sets(ctx, spec)
        except CditeError as e:
            if strict:
                raise ReplicateError(str(e), replicate, seed, spec.name) from e
            logger.error("Replicate %d method %s failed: %s", replicate, spec.name, e)
            records.append(_failed(spec, replicate, seed, e))
            continue
        metrics = evaluate_sets(sets, ctx.target, ctx.test.X)
        elapsed = shared_seconds + time.perf_counter() - method_start
        records.append(
            ReplicateRecord(
                spec.name,
                replicate,
                seed,
                spec.alpha,
                bandwidth=c,
                wallclock_seconds=elapsed if record_wallclock else None,
                **metrics,
            )
        )
        logger.info(
            "Replicate %d %s: coverage %.4f, median length %.4f, %d infinite",
            replicate,
            spec.name,
            metrics["coverage"],
            metrics["median_length"],
            metrics["infinite_count"],
        )
    return records


def run_replicate(
    dgp: DataSource,
    method: MethodSpec,
    seed: int,
    diffusion: DiffusionConfig | None = None,
    propensity: PropensityConfig | None = None,
    arm: int = 1,
) -> ReplicateRecord:
    """Runs one method on one replicate; errors carry the replicate context."""

    if method.method in EXTERNAL_METHODS:
        raise ConfigError(f"{method.method} records are produced externally")
    return run_replicate_methods(
        dgp,
        [method],
        seed,
        diffusion or DiffusionConfig(),
        propensity or PropensityConfig(),
        arm,
        strict=True,
    )[0]


def load_external_records(path: str | Path, method: str, alpha: float = 0.05) -> list[ReplicateRecord]:
    """Reads per-replicate results produced outside the package.

    Args:
        path: CSV with ``replicate``, ``coverage`` and ``median_length`` columns
            (``seed`` and ``n_test`` optional).
        method: Label to store in the records.
        alpha: Nominal level the results were produced at.

    Returns:
        One record per CSV row.

    Raises:
        DataError: If a required column is missing.
    """

    frame = pd.read_csv(path, comment="#")
    missing = [c for c in ("replicate", "coverage", "median_length") if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    records = []
    for row in frame.itertuples(index=False):
        values = row._asdict()
        records.append(
            ReplicateRecord(
                method,
                int(values["replicate"]),
                int(values.get("seed", -1)),
                alpha,
                coverage=float(values["coverage"]),
                median_length=float(values["median_length"]),
                infinite_count=int(math.isinf(float(values["median_length"]))),
                n_test=int(values.get("n_test", 0)),
            )
        )
    logger.info("Loaded %d external %s records from %s", len(records), method, path)
    return records


@dataclass(frozen=True)
class ExperimentPlan:
    source: DataSource
    methods: tuple[MethodSpec, ...]
    replicates: int = 50
    seed: int = 0
    diffusion: DiffusionConfig = DiffusionConfig()
    propensity: PropensityConfig = PropensityConfig()
    arm: int = 1
    workers: int = 1
    record_wallclock: bool = False
    experiment_id: str = ""
    config_hash: str = ""

    def __post_init__(self) -> None:
        if self.replicates < 1 or self.workers == 0:
            raise ConfigError(f"Invalid experiment size: replicates={self.replicates}, workers={self.workers}")
        if not self.methods:
            raise ConfigError("No methods to run")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"Method labels must be unique, got {names}")


def _run_cell(plan: ExperimentPlan, methods: tuple[MethodSpec, ...], replicate: int) -> list[ReplicateRecord]:
    seed = derive_seed(plan.seed, replicate)
    records = run_replicate_methods(
        plan.source,
        methods,
        seed,
        plan.diffusion,
        plan.propensity,
        plan.arm,
        replicate,
        plan.record_wallclock,
    )
    return [replace(r, experiment_id=plan.experiment_id, config_hash=plan.config_hash) for r in records]


def run_experiment(plan: ExperimentPlan, existing: Iterable[ReplicateRecord] = ()) -> list[ReplicateRecord]:
    """Runs every (replicate, method) cell, resuming from earlier records.

    A replicate is skipped when ``existing`` holds successful records for all
    of its methods under the same config hash.

    Args:
        plan: What to run.
        existing: Records from an earlier run.

    Returns:
        All records sorted by replicate, then method.
    """

    internal = tuple(m for m in plan.methods if m.method not in EXTERNAL_METHODS)
    names = {m.name for m in internal}
    kept: dict[int, list[ReplicateRecord]] = defaultdict(list)
    for record in existing:
        if record.config_hash == plan.config_hash and record.ok and record.method in names:
            kept[record.replicate].append(record)
    done = {r for r, recs in kept.items() if r < plan.replicates and {x.method for x in recs} == names}
    todo = [r for r in range(plan.replicates) if r not in done]
    logger.info("Running %d of %d replicates (%d resumed)", len(todo), plan.replicates, len(done))

    records = [r for rep in sorted(done) for r in kept[rep]]
    if internal and todo:
        jobs = (delayed(_run_cell)(plan, internal, r) for r in todo)
        results = Parallel(n_jobs=plan.workers, return_as="generator")(jobs)
        for cell in tqdm(results, total=len(todo), desc="replicates", leave=False):
            records.extend(cell)

    for spec in plan.methods:
        if spec.method not in EXTERNAL_METHODS:
            continue
        if spec.external_path is None:
            raise ConfigError(f"{spec.method} needs external_path pointing at its records")
        records.extend(
            replace(r, experiment_id=plan.experiment_id, config_hash=plan.config_hash)
            for r in load_external_records(spec.external_path, spec.name, spec.alpha)
            if r.replicate < plan.replicates
        )
    return sorted(records, key=lambda r: (r.replicate, r.method))


def run_sensitivity(
    source: DataSource,
    M_values: Sequence[int],
    c_values: Sequence[float],
    replicates: int,
    seed: int,
    diffusion: DiffusionConfig = DiffusionConfig(),
    propensity: PropensityConfig = PropensityConfig(),
    alpha: float = 0.05,
    arm: int = 1,
    workers: int = 1,
    experiment_id: str = "",
    config_hash: str = "",
) -> list[ReplicateRecord]:
    """Evaluates the localized method over a grid of sample counts and fixed bandwidth factors.

    One diffusion model is trained per replicate; records are labelled
    ``cdm@M=<M>,c=<c>``.
    """

    methods = tuple(
        MethodSpec("cdm", M=int(M), alpha=alpha, c=float(c), label=f"cdm@M={int(M)},c={format_c(float(c))}")
        for M in M_values
        for c in c_values
    )
    plan = ExperimentPlan(
        source,
        methods,
        replicates,
        seed,
        diffusion,
        propensity,
        arm,
        workers,
        experiment_id=experiment_id,
        config_hash=config_hash,
    )
    return run_experiment(plan)


@dataclass(frozen=True)
class MethodSummary:
    """Across-replicate aggregates of one method."""

    method: str
    replicates: int
    failed: int
    coverage_mean: float
    coverage_sd: float | None
    coverage_ci: tuple[float, float]
    length_mean: float
    length_sd: float | None
    length_ci: tuple[float, float]
    infinite_lengths: int
    infinite_sets: int
    single_replicate: bool


@dataclass(frozen=True)
class MetricsReport:
    records: tuple[ReplicateRecord, ...]
    summaries: tuple[MethodSummary, ...]

    def summary(self, method: str) -> MethodSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)


def mean_ci(values: Sequence[float]) -> tuple[float, float | None, tuple[float, float]]:
    """Mean, sample deviation and ``mean +/- 1.96 sd / sqrt(R)``; the deviation is None for one value."""

    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, None, (math.nan, math.nan)
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, None, (mean, mean)
    sd = float(arr.std(ddof=1))
    half = Z_95 * sd / math.sqrt(arr.size)
    return mean, sd, (mean - half, mean + half)


def aggregate(records: Iterable[ReplicateRecord]) -> MetricsReport:
    """Folds replicate records into per-method summaries.

    Failed cells are counted but not averaged. Infinite median lengths are
    left out of the length aggregate and counted instead.

    Args:
        records: Records of any number of methods.

    Returns:
        The report, with methods in sorted order.
    """

    ordered = tuple(sorted(records, key=lambda r: (r.method, r.replicate)))
    by_method: dict[str, list[ReplicateRecord]] = defaultdict(list)
    for record in ordered:
        by_method[record.method].append(record)

    summaries = []
    for method in sorted(by_method):
        ok = [r for r in by_method[method] if r.ok and r.coverage is not None]
        lengths = [r.median_length for r in ok if r.median_length is not None]
        finite = [x for x in lengths if math.isfinite(x)]
        cov_mean, cov_sd, cov_ci = mean_ci([r.coverage for r in ok if r.coverage is not None])
        len_mean, len_sd, len_ci = mean_ci(finite)
        if lengths and not finite:
            len_mean, len_ci = math.inf, (math.inf, math.inf)
        summaries.append(
            MethodSummary(
                method=method,
                replicates=len(ok),
                failed=len(by_method[method]) - len(ok),
                coverage_mean=cov_mean,
                coverage_sd=cov_sd,
                coverage_ci=cov_ci,
                length_mean=len_mean,
                length_sd=len_sd,
                length_ci=len_ci,
                infinite_lengths=len(lengths) - len(finite),
                infinite_sets=sum(r.infinite_count or 0 for r in ok),
                single_replicate=len(ok) == 1,
            )
        )
    return MetricsReport(ordered, tuple(summaries))


def _num(value: float) -> str:
    if math.isnan(value):
        return "-"
    return "inf" if math.isinf(value) else f"{value:.3f}"


def below_nominal(summary: MethodSummary, alpha: float) -> bool:
    return summary.replicates > 0 and summary.coverage_mean < 1.0 - alpha


def format_summary(report: MetricsReport, alpha: float = 0.05) -> str:
    """Renders the report as a fixed-width table, one row per method."""

    header = (
        f"{'method':<24} {'R':>4} {'coverage':>9} {'95% CI':>17} {'length':>9} {'95% CI':>19} "
        f"{'inf':>4} {'inf sets':>8} {'failed':>6}"
    )
    lines = [header, "-" * len(header)]
    for s in report.summaries:
        cov_ci = f"[{_num(s.coverage_ci[0])}, {_num(s.coverage_ci[1])}]"
        len_ci = f"[{_num(s.length_ci[0])}, {_num(s.length_ci[1])}]"
        row = (
            f"{s.method:<24} {s.replicates:>4} {_num(s.coverage_mean):>9} {cov_ci:>17} "
            f"{_num(s.length_mean):>9} {len_ci:>19} {s.infinite_lengths:>4} {s.infinite_sets:>8} {s.failed:>6}"
        )
        if s.single_replicate:
            row += "  (single replicate)"
        if below_nominal(s, alpha):
            row += f"  BELOW {1.0 - alpha:.2f}"
        lines.append(row)
    return "\n".join(lines) + "\n"
