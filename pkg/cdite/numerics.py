"""Dense multilayer perceptrons, AdamW and the shared training loop.

All arithmetic is 64-bit. Parameters and optimizer states are immutable
values; every update returns fresh objects.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from cdite.errors import ConfigError, NumericError, ShapeError

__all__ = [
    "ACTIVATIONS",
    "Layer",
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "AdamWState",
    "init_adamw",
    "adamw_step",
    "lr_at_epoch",
    "TrainConfig",
    "TrainResult",
    "BatchLoss",
    "ValLoss",
    "train_loop",
    "MlpRegressor",
    "standardizer",
    "fit_mlp_regressor",
]

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class Layer:
    """One affine layer, ``out = weight @ in + bias``."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpParams:
    """Layer stack of a perceptron.

    ``activations[i]`` is applied after layer ``i``; the output layer is
    always linear, so there is one activation tag per hidden layer.
    """

    layers: tuple[Layer, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("An MLP needs at least one layer")
        if len(self.activations) != len(self.layers) - 1:
            raise ShapeError(f"Expected {len(self.layers) - 1} activation tags, got {len(self.activations)}")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ConfigError(f"Unknown activation: {tag}")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"Layer {i} has weight {layer.weight.shape} and bias {layer.bias.shape}")
            if i > 0 and self.layers[i - 1].out_dim != layer.in_dim:
                prev = self.layers[i - 1].out_dim
                raise ShapeError(f"Layer {i - 1} outputs {prev}, layer {i} expects {layer.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(layer.out_dim for layer in self.layers)

    def arrays(self) -> list[np.ndarray]:
        """Returns the parameter arrays in a fixed order (weight, bias per layer)."""

        return [a for layer in self.layers for a in (layer.weight, layer.bias)]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"Expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = tuple(Layer(weight=arrays[2 * i], bias=arrays[2 * i + 1]) for i in range(len(self.layers)))
        return MlpParams(layers=layers, activations=self.activations)

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.arrays())

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> MlpParams:
    """Glorot-uniform initialization with zero biases.

    Args:
        sizes: Layer widths, input first and output last.
        rng: The generator to draw weights from.
        activation: Activation tag for every hidden layer.

    Returns:
        Freshly initialized parameters.

    Raises:
        ConfigError: If fewer than two sizes are given or a size is not positive.
    """

    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"Invalid layer sizes: {list(sizes)}")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(weight=weight, bias=np.zeros(fan_out)))
    return MlpParams(layers=tuple(layers), activations=(activation,) * (len(sizes) - 2))


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"Expected input of width {params.in_dim}, got shape {x.shape}")
    return x, single


def _forward(params: MlpParams, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    inputs, pre = [], []
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = z if i == last else _activate(z, params.activations[i])
    inputs.append(h)
    return inputs, pre


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluates the network.

    Args:
        params: Network parameters.
        x: One input vector, or a batch with one row per input.

    Returns:
        The output vector (or one output row per input row).
    """

    batch, single = _as_batch(params, x)
    out = _forward(params, batch)[0][-1]
    return out[0] if single else out


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradient of ``sum(upstream * mlp_forward(params, x))``.

    Gradients are summed over the batch.

    Args:
        params: Network parameters.
        x: The inputs passed to the forward pass.
        upstream: Gradient of the loss with respect to the outputs.

    Returns:
        The parameter gradient (shaped like ``params``) and the input gradient.

    Raises:
        ShapeError: If ``upstream`` does not match the output shape.
    """

    batch, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (batch.shape[0], params.out_dim):
        raise ShapeError(f"Upstream gradient has shape {g.shape}, expected {(batch.shape[0], params.out_dim)}")

    inputs, pre = _forward(params, batch)
    grads: list[Layer] = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if i < len(params.layers) - 1:
            g = g * _activate_grad(pre[i], inputs[i + 1], params.activations[i])
        grads.append(Layer(weight=g.T @ inputs[i], bias=g.sum(axis=0)))
        g = g @ layer.weight

    grad_params = MlpParams(layers=tuple(reversed(grads)), activations=params.activations)
    return grad_params, (g[0] if single else g)


@dataclass(frozen=True)
class AdamWState:
    """Decoupled-weight-decay Adam state; moments are shaped like the parameters."""

    step: int
    m: MlpParams
    v: MlpParams
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


def init_adamw(params: MlpParams, **hyper: float) -> AdamWState:
    zeros = params.with_arrays([np.zeros_like(a) for a in params.arrays()])
    return AdamWState(step=0, m=zeros, v=zeros, **hyper)


def adamw_step(params: MlpParams, grads: MlpParams, state: AdamWState) -> tuple[MlpParams, AdamWState]:
    """Applies one AdamW update.

    Args:
        params: Current parameters.
        grads: Loss gradient, shaped like ``params``.
        state: Optimizer state; ``state.step`` counts completed updates.

    Returns:
        The updated parameters and the updated state.

    Raises:
        ConfigError: If the learning rate is not positive.
        ShapeError: If the gradient does not match the parameters.
        NumericError: If the gradient has non-finite entries.
    """

    if not state.lr > 0:
        raise ConfigError(f"Learning rate must be positive, got {state.lr}")
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if [a.shape for a in p_arrays] != [a.shape for a in g_arrays]:
        raise ShapeError("Gradient is not shaped like the parameters")
    if not grads.is_finite():
        raise NumericError(f"Non-finite gradient at optimizer step {state.step + 1}")

    t = state.step + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m.arrays(), state.v.arrays()):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p = p * (1.0 - state.lr * state.weight_decay) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)

    new_state = replace(state, step=t, m=state.m.with_arrays(new_m), v=state.v.with_arrays(new_v))
    return params.with_arrays(new_p), new_state


def lr_at_epoch(epoch: int, base_lr: float, decay_factor: float, decay_every: int) -> float:
    """Step decay: ``base_lr * decay_factor ** (epoch // decay_every)``."""

    if epoch < 0 or decay_every < 1:
        raise ConfigError(f"Invalid schedule arguments: epoch={epoch}, decay_every={decay_every}")
    return base_lr * decay_factor ** (epoch // decay_every)


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch training hyperparameters shared by the denoiser and the MLP baseline."""

    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-2
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.7
    decay_every: int = 500
    eval_every: int = 50
    patience: int = 5

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError(f"Invalid training schedule: {self}")
        if not self.lr > 0 or self.weight_decay < 0 or self.decay_every < 1 or not 0 < self.decay_factor:
            raise ConfigError(f"Invalid optimizer settings: {self}")


@dataclass(frozen=True)
class TrainResult:
    params: MlpParams
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    losses: tuple[float, ...] = field(default=(), repr=False)


BatchLoss = Callable[[MlpParams, np.ndarray, np.random.Generator], tuple[float, MlpParams]]
ValLoss = Callable[[MlpParams], float]


def train_loop(
    params: MlpParams,
    batch_loss: BatchLoss,
    val_loss: ValLoss | None,
    n: int,
    config: TrainConfig,
    rng: np.random.Generator,
    name: str = "model",
) -> TrainResult:
    """Runs shuffled mini-batch AdamW with step learning-rate decay.

    When ``val_loss`` is given it is evaluated every ``config.eval_every``
    epochs and after the last one; training stops once it has not improved
    for ``config.patience`` evaluations, and the best parameters are returned.

    Args:
        params: Initial parameters.
        batch_loss: Maps (params, row indices, rng) to (loss, gradient).
        val_loss: Validation loss, or None to train for all epochs.
        n: Number of training rows.
        config: Training hyperparameters.
        rng: Generator for shuffling and any randomness inside ``batch_loss``.
        name: Used in log lines.

    Returns:
        The trained parameters and a short training summary.
    """

    state = init_adamw(
        params,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    best_params, best_val, best_epoch = params, math.inf, 0
    bad_evals, stopped_early = 0, False
    losses: list[float] = []

    for epoch in range(config.epochs):
        state = replace(state, lr=lr_at_epoch(epoch, config.lr, config.decay_factor, config.decay_every))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_loss(params, idx, rng)
            params, state = adamw_step(params, grads, state)
            total += loss * len(idx)
        losses.append(total / n)
        logger.debug("%s epoch %d lr %.3e loss %.6f", name, epoch + 1, state.lr, losses[-1])

        if val_loss is None:
            continue
        if (epoch + 1) % config.eval_every != 0 and epoch + 1 != config.epochs:
            continue
        current = val_loss(params)
        if not math.isfinite(current):
            raise NumericError(f"{name}: validation loss is {current} at epoch {epoch + 1}")
        logger.info("%s epoch %d validation loss %.6f", name, epoch + 1, current)
        if current < best_val:
            best_params, best_val, best_epoch, bad_evals = params, current, epoch + 1, 0
        else:
            bad_evals += 1
            if bad_evals >= config.patience:
                stopped_early = True
                logger.info("%s stopped early at epoch %d (best epoch %d)", name, epoch + 1, best_epoch)
                break

    if val_loss is None:
        return TrainResult(params, config.epochs, math.nan, False, tuple(losses))
    return TrainResult(best_params, best_epoch, best_val, stopped_early, tuple(losses))


@dataclass(frozen=True)
class MlpRegressor:
    """Point regressor used by the MLP baseline; standardizes inputs and outputs internally."""

    params: MlpParams
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: float
    y_scale: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.x_shift.shape[0]:
            raise ShapeError(f"Expected {self.x_shift.shape[0]} covariates, got {X.shape[1]}")
        out = mlp_forward(self.params, (X - self.x_shift) / self.x_scale)[:, 0]
        return out * self.y_scale + self.y_shift


def standardizer(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard deviations; zero deviations are replaced by one."""

    shift = values.mean(axis=0)
    scale = values.std(axis=0)
    return shift, np.where(scale > 0, scale, 1.0)


def fit_mlp_regressor(
    X: np.ndarray,
    y: np.ndarray,
    hidden: Sequence[int],
    config: TrainConfig,
    rng: np.random.Generator,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> MlpRegressor:
    """Fits a squared-error MLP regressor.

    Args:
        X: Training covariates, one row per sample.
        y: Training targets.
        hidden: Hidden layer widths.
        config: Training hyperparameters.
        rng: Generator for initialization and shuffling.
        X_val: Optional validation covariates for early stopping.
        y_val: Optional validation targets.

    Returns:
        The fitted regressor.

    Raises:
        ShapeError: If the inputs disagree in length.
    """

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"Got covariates {X.shape} and targets {y.shape}")
    x_shift, x_scale = standardizer(X)
    y_shift, y_scale = standardizer(y[:, None])
    Xs = (X - x_shift) / x_scale
    ys = (y - y_shift[0]) / y_scale[0]

    def batch_loss(params: MlpParams, idx: np.ndarray, _: np.random.Generator) -> tuple[float, MlpParams]:
        resid = mlp_forward(params, Xs[idx])[:, 0] - ys[idx]
        grads, _ = mlp_backward(params, Xs[idx], (2.0 * resid / len(idx))[:, None])
        return float(np.mean(resid**2)), grads

    val_loss: ValLoss | None = None
    if X_val is not None and y_val is not None and len(y_val) > 0:
        Xv = (np.asarray(X_val, dtype=np.float64) - x_shift) / x_scale
        yv = (np.asarray(y_val, dtype=np.float64) - y_shift[0]) / y_scale[0]

        def _val_loss(params: MlpParams) -> float:
            return float(np.mean((mlp_forward(params, Xv)[:, 0] - yv) ** 2))

        val_loss = _val_loss

    params = init_mlp([X.shape[1], *hidden, 1], rng)
    result = train_loop(params, batch_loss, val_loss, X.shape[0], config, rng, name="mlp-regressor")
    return MlpRegressor(result.params, x_shift, x_scale, float(y_shift[0]), float(y_scale[0]))
