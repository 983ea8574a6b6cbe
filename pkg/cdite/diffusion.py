"""Conditional denoising diffusion model for a scalar outcome given covariates.

The denoiser is an MLP over ``[x, y_t, embed(t)]`` predicting the noise that
was added to the standardized outcome. Sampling is DDPM ancestral sampling
with reverse variance ``beta_t``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from cdite.errors import ConfigError, DataError, ShapeError
from cdite.numerics import (
    MlpParams,
    TrainConfig,
    ValLoss,
    init_mlp,
    mlp_backward,
    mlp_forward,
    standardizer,
    train_loop,
)

__all__ = [
    "Schedule",
    "make_schedule",
    "forward_noise",
    "timestep_embedding",
    "DiffusionConfig",
    "DiffusionModel",
    "train_denoiser",
    "sample_batch",
    "sample",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Variance schedule. Arrays are indexed by ``t - 1`` for steps ``t = 1..T``."""

    steps: int
    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int | np.ndarray) -> np.ndarray:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.steps):
            raise ConfigError(f"Diffusion step out of range [1, {self.steps}]: {t}")
        return self.alpha_bars[t_arr - 1]


def make_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> Schedule:
    """Builds a linear beta schedule.

    Args:
        steps: Number of diffusion steps ``T``.
        beta_min: Variance at step 1.
        beta_max: Variance at step ``T``.

    Returns:
        The schedule with running products of ``1 - beta``.

    Raises:
        ConfigError: If the bounds are outside ``0 < beta_min <= beta_max < 1`` or ``T < 2``.
    """

    if steps < 2:
        raise ConfigError(f"Need at least two diffusion steps, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"Invalid beta bounds: [{beta_min}, {beta_max}]")
    t = np.arange(steps, dtype=np.float64)
    betas = beta_min + (beta_max - beta_min) * t / (steps - 1)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return Schedule(steps, beta_min, beta_max, betas, alphas, alpha_bars)


def forward_noise(
    y0: float | np.ndarray,
    t: int | np.ndarray,
    eps: float | np.ndarray,
    schedule: Schedule,
) -> np.ndarray:
    """Samples ``y_t`` from the forward marginal ``q(y_t | y_0)``."""

    alpha_bar = schedule.alpha_bar(t)
    return np.sqrt(alpha_bar) * np.asarray(y0, dtype=np.float64) + np.sqrt(1.0 - alpha_bar) * eps


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding; returns one ``dim``-wide row per step in ``t``."""

    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


@dataclass(frozen=True)
class DiffusionConfig:
    """Schedule, denoiser shape and training settings for one arm's model."""

    steps: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02
    hidden: tuple[int, ...] = (128, 128, 128)
    embed_dim: int = 32
    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-2
    weight_decay: float = 1e-2
    decay_factor: float = 0.7
    decay_every: int = 500
    eval_every: int = 50
    patience: int = 5
    val_fraction: float = 0.15
    val_repeats: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        make_schedule(self.steps, self.beta_min, self.beta_max)
        if self.embed_dim < 2 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"Invalid denoiser shape: hidden={self.hidden}, embed_dim={self.embed_dim}")
        if not 0.0 <= self.val_fraction < 1.0 or self.val_repeats < 1:
            raise ConfigError(f"Invalid validation settings: {self.val_fraction}, {self.val_repeats}")
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            eval_every=self.eval_every,
            patience=self.patience,
        )

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "DiffusionConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown diffusion settings: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class DiffusionModel:
    """A trained denoiser with its schedule and standardization constants."""

    schedule: Schedule
    denoiser: MlpParams
    covariate_dim: int
    embed_dim: int
    y_shift: float
    y_scale: float
    x_shift: np.ndarray = field(repr=False)
    x_scale: np.ndarray = field(repr=False)
    degenerate_scale: bool = False

    def __post_init__(self) -> None:
        if self.denoiser.in_dim != self.covariate_dim + 1 + self.embed_dim or self.denoiser.out_dim != 1:
            raise ShapeError(
                f"Denoiser maps {self.denoiser.in_dim} -> {self.denoiser.out_dim}, expected "
                f"{self.covariate_dim + 1 + self.embed_dim} -> 1"
            )
        if not self.y_scale > 0:
            raise ConfigError(f"Outcome scale must be positive, got {self.y_scale}")

    def standardize_covariates(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.covariate_dim:
            raise ShapeError(f"Expected {self.covariate_dim} covariates, got {X.shape[1]}")
        return (X - self.x_shift) / self.x_scale


def _denoiser_input(xs: np.ndarray, yt: np.ndarray, emb: np.ndarray) -> np.ndarray:
    return np.concatenate([xs, yt[:, None], emb], axis=1)


def train_denoiser(
    X: np.ndarray,
    Y: np.ndarray,
    config: DiffusionConfig,
    rng: np.random.Generator,
    X_val: np.ndarray | None = None,
    Y_val: np.ndarray | None = None,
) -> DiffusionModel:
    """Fits the conditional diffusion model on one treatment arm.

    Outcomes are standardized to zero mean and unit deviation; covariates are
    standardized per column. The loss is the mean squared error between the
    injected noise and the denoiser output at uniformly drawn steps.

    Args:
        X: Covariates of the arm's training rows.
        Y: Outcomes of the arm's training rows.
        config: Model and training settings.
        rng: Generator for initialization, batching and noise.
        X_val: Optional held-out covariates for early stopping.
        Y_val: Optional held-out outcomes for early stopping.

    Returns:
        The trained, immutable model.

    Raises:
        DataError: If fewer than two training rows are given.
        ShapeError: If covariates and outcomes disagree in length.
    """

    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != (X.shape[0],):
        raise ShapeError(f"Got covariates {X.shape} and outcomes {Y.shape}")
    if X.shape[0] < 2:
        raise DataError(f"Need at least two training rows, got {X.shape[0]}")

    schedule = make_schedule(config.steps, config.beta_min, config.beta_max)
    y_shift = float(Y.mean())
    y_scale = float(Y.std())
    degenerate = not y_scale > 0
    if degenerate:
        logger.warning("Training outcomes have zero variance; using unit scale")
        y_scale = 1.0
    x_shift, x_scale = standardizer(X)
    Xs = (X - x_shift) / x_scale
    Ys = (Y - y_shift) / y_scale
    emb_table = timestep_embedding(np.arange(1, config.steps + 1), config.embed_dim)

    def batch_loss(params: MlpParams, idx: np.ndarray, brng: np.random.Generator) -> tuple[float, MlpParams]:
        t = brng.integers(1, config.steps + 1, size=len(idx))
        eps = brng.standard_normal(len(idx))
        yt = forward_noise(Ys[idx], t, eps, schedule)
        inp = _denoiser_input(Xs[idx], yt, emb_table[t - 1])
        resid = mlp_forward(params, inp)[:, 0] - eps
        grads, _ = mlp_backward(params, inp, (2.0 * resid / len(idx))[:, None])
        return float(np.mean(resid**2)), grads

    val_loss: ValLoss | None = None
    if X_val is not None and Y_val is not None and len(Y_val) > 0:
        reps = config.val_repeats
        Xv = np.asarray(X_val, dtype=np.float64).reshape(-1, X.shape[1])
        Xv = np.repeat((Xv - x_shift) / x_scale, reps, axis=0)
        Yv = np.repeat((np.asarray(Y_val, dtype=np.float64) - y_shift) / y_scale, reps)
        tv = rng.integers(1, config.steps + 1, size=len(Yv))
        ev = rng.standard_normal(len(Yv))
        val_inp = _denoiser_input(Xv, forward_noise(Yv, tv, ev, schedule), emb_table[tv - 1])

        def _val_loss(params: MlpParams) -> float:
            return float(np.mean((mlp_forward(params, val_inp)[:, 0] - ev) ** 2))

        val_loss = _val_loss

    params = init_mlp([X.shape[1] + 1 + config.embed_dim, *config.hidden, 1], rng)
    result = train_loop(params, batch_loss, val_loss, X.shape[0], config.train_config(), rng, name="denoiser")
    logger.info(
        "Trained denoiser on %d rows (%d parameters, best epoch %d)",
        X.shape[0],
        result.params.num_params(),
        result.best_epoch,
    )
    return DiffusionModel(
        schedule=schedule,
        denoiser=result.params,
        covariate_dim=X.shape[1],
        embed_dim=config.embed_dim,
        y_shift=y_shift,
        y_scale=y_scale,
        x_shift=x_shift,
        x_scale=x_scale,
        degenerate_scale=degenerate,
    )


def sample_batch(
    model: DiffusionModel,
    X: np.ndarray,
    M: int,
    rng: np.random.Generator,
    chunk_rows: int = 16384,
) -> np.ndarray:
    """Draws ``M`` outcomes for every covariate row by ancestral sampling.

    Args:
        model: The trained model.
        X: Covariate rows.
        M: Number of independent chains per row.
        rng: Generator for the initial noise and the per-step noise.
        chunk_rows: Maximum number of chains advanced together.

    Returns:
        An array of shape ``(len(X), M)`` on the original outcome scale.

    Raises:
        ConfigError: If ``M`` is not positive.
    """

    if M < 1:
        raise ConfigError(f"Need at least one sample per row, got M={M}")
    xs = np.repeat(model.standardize_covariates(X), M, axis=0)
    schedule = model.schedule
    emb_table = timestep_embedding(np.arange(1, schedule.steps + 1), model.embed_dim)
    out = np.empty(xs.shape[0])

    for start in range(0, xs.shape[0], chunk_rows):
        xc = xs[start : start + chunk_rows]
        rows = xc.shape[0]
        y = rng.standard_normal(rows)
        for t in range(schedule.steps, 0, -1):
            beta, alpha, alpha_bar = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1]
            emb = np.broadcast_to(emb_table[t - 1], (rows, model.embed_dim))
            eps_hat = mlp_forward(model.denoiser, _denoiser_input(xc, y, emb))[:, 0]
            y = (y - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha)
            if t > 1:
                y = y + math.sqrt(beta) * rng.standard_normal(rows)
        out[start : start + rows] = y

    return (out * model.y_scale + model.y_shift).reshape(-1, M)


def sample(model: DiffusionModel, x: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Draws ``M`` outcomes at a single covariate vector."""

    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"Expected one covariate vector, got shape {x.shape}")
    return sample_batch(model, x[None, :], M, rng)[0]
