"""Text checkpoints for trained models.

A checkpoint is a header line followed by one record per field::

    cdite-checkpoint 1 kind=diffusion version=0.1.0 config=0123456789abcdef
    @ covariate_dim int 10
    @ y_shift float 1.2345
    @ denoiser.layers int 4
    @ denoiser.activations str relu,relu,relu
    @ denoiser.layer0.weight array f8 2 128 43
    <128 * 43 values>

Floats are written with 17 significant digits, so loading reproduces every
parameter bit for bit.
"""

import logging
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from cdite.diffusion import DiffusionModel, make_schedule
from cdite.errors import CheckpointError
from cdite.numerics import Layer, MlpParams, MlpRegressor
from cdite.propensity import BoostedTreesModel, ConstantModel, LogisticModel, RegressionTree
from cdite.utils.io import atomic_write
from cdite.utils.version import code_version

__all__ = [
    "FORMAT_VERSION",
    "KINDS",
    "save_model",
    "read_checkpoint_header",
    "load_model",
]

logger = logging.getLogger(__name__)

MAGIC = "cdite-checkpoint"
FORMAT_VERSION = 1

Model = MlpParams | MlpRegressor | DiffusionModel | BoostedTreesModel | LogisticModel | ConstantModel
Fields = dict[str, Any]

KINDS: dict[type, str] = {
    MlpParams: "mlp",
    MlpRegressor: "mlp_regressor",
    DiffusionModel: "diffusion",
    BoostedTreesModel: "gbm",
    LogisticModel: "logistic",
    ConstantModel: "constant",
}

_DTYPES = {"f8": np.float64, "i8": np.int64}


def _fmt(value: float) -> str:
    return "%.17g" % value


def _put_mlp(fields: Fields, prefix: str, params: MlpParams) -> None:
    fields[f"{prefix}layers"] = len(params.layers)
    fields[f"{prefix}activations"] = ",".join(params.activations)
    for i, layer in enumerate(params.layers):
        fields[f"{prefix}layer{i}.weight"] = layer.weight
        fields[f"{prefix}layer{i}.bias"] = layer.bias


def _get_mlp(fields: Fields, prefix: str) -> MlpParams:
    tags = _get(fields, f"{prefix}activations")
    activations = tuple(tags.split(",")) if tags else ()
    layers = tuple(
        Layer(_get(fields, f"{prefix}layer{i}.weight"), _get(fields, f"{prefix}layer{i}.bias"))
        for i in range(_get(fields, f"{prefix}layers"))
    )
    return MlpParams(layers, activations)


def _get(fields: Fields, key: str) -> Any:
    if key not in fields:
        raise CheckpointError(f"Checkpoint is missing field {key!r}")
    return fields[key]


def _to_fields(model: Model) -> Fields:
    fields: Fields = {}
    if isinstance(model, MlpParams):
        _put_mlp(fields, "", model)
    elif isinstance(model, MlpRegressor):
        _put_mlp(fields, "params.", model.params)
        fields.update(x_shift=model.x_shift, x_scale=model.x_scale, y_shift=model.y_shift, y_scale=model.y_scale)
    elif isinstance(model, DiffusionModel):
        schedule = model.schedule
        fields.update(steps=schedule.steps, beta_min=schedule.beta_min, beta_max=schedule.beta_max)
        _put_mlp(fields, "denoiser.", model.denoiser)
        fields.update(
            covariate_dim=model.covariate_dim,
            embed_dim=model.embed_dim,
            y_shift=model.y_shift,
            y_scale=model.y_scale,
            x_shift=model.x_shift,
            x_scale=model.x_scale,
            degenerate_scale=int(model.degenerate_scale),
        )
    elif isinstance(model, BoostedTreesModel):
        fields.update(
            n_trees=len(model.trees),
            shrinkage=model.shrinkage,
            init=model.init,
            clip=np.asarray(model.clip),
            n_features=model.n_features,
            loss=model.loss,
        )
        for i, tree in enumerate(model.trees):
            for name in ("feature", "threshold", "left", "right", "value"):
                fields[f"tree{i}.{name}"] = getattr(tree, name)
    elif isinstance(model, LogisticModel):
        fields.update(
            coef=model.coef,
            intercept=model.intercept,
            clip=np.asarray(model.clip),
            dropped=np.asarray(model.dropped, dtype=np.int64),
            iterations=model.iterations,
        )
    elif isinstance(model, ConstantModel):
        fields.update(value=model.value, n_features=model.n_features, clip=np.asarray(model.clip))
    else:
        raise CheckpointError(f"Cannot save objects of type {type(model).__name__}")
    return fields


def _from_fields(kind: str, fields: Fields) -> Model:
    if kind == "mlp":
        return _get_mlp(fields, "")
    if kind == "mlp_regressor":
        return MlpRegressor(
            _get_mlp(fields, "params."),
            _get(fields, "x_shift"),
            _get(fields, "x_scale"),
            _get(fields, "y_shift"),
            _get(fields, "y_scale"),
        )
    if kind == "diffusion":
        return DiffusionModel(
            schedule=make_schedule(_get(fields, "steps"), _get(fields, "beta_min"), _get(fields, "beta_max")),
            denoiser=_get_mlp(fields, "denoiser."),
            covariate_dim=_get(fields, "covariate_dim"),
            embed_dim=_get(fields, "embed_dim"),
            y_shift=_get(fields, "y_shift"),
            y_scale=_get(fields, "y_scale"),
            x_shift=_get(fields, "x_shift"),
            x_scale=_get(fields, "x_scale"),
            degenerate_scale=bool(_get(fields, "degenerate_scale")),
        )
    if kind == "gbm":
        names = ("feature", "threshold", "left", "right", "value")
        trees = tuple(
            RegressionTree(*(_get(fields, f"tree{i}.{name}") for name in names)) for i in range(_get(fields, "n_trees"))
        )
        lo, hi = _get(fields, "clip")
        return BoostedTreesModel(
            trees,
            _get(fields, "shrinkage"),
            _get(fields, "init"),
            (float(lo), float(hi)),
            _get(fields, "n_features"),
            _get(fields, "loss"),
        )
    if kind == "logistic":
        lo, hi = _get(fields, "clip")
        return LogisticModel(
            _get(fields, "coef"),
            _get(fields, "intercept"),
            (float(lo), float(hi)),
            tuple(int(j) for j in _get(fields, "dropped")),
            _get(fields, "iterations"),
        )
    if kind == "constant":
        lo, hi = _get(fields, "clip")
        return ConstantModel(_get(fields, "value"), _get(fields, "n_features"), (float(lo), float(hi)))
    raise CheckpointError(f"Unknown checkpoint kind {kind!r}")


def _write_field(fh: TextIO, name: str, value: Any) -> None:
    if isinstance(value, np.ndarray):
        dtype = "i8" if np.issubdtype(value.dtype, np.integer) else "f8"
        fh.write(f"@ {name} array {dtype} {value.ndim} {' '.join(str(s) for s in value.shape)}".rstrip() + "\n")
        if dtype == "i8":
            fh.write(" ".join(str(int(v)) for v in value.ravel()) + "\n")
        else:
            fh.write(" ".join(_fmt(v) for v in value.ravel()) + "\n")
    elif isinstance(value, (bool, int, np.integer)):
        fh.write(f"@ {name} int {int(value)}\n")
    elif isinstance(value, (float, np.floating)):
        fh.write(f"@ {name} float {_fmt(float(value))}\n")
    elif isinstance(value, str):
        fh.write(f"@ {name} str {value}\n")
    else:
        raise CheckpointError(f"Cannot serialize field {name!r} of type {type(value).__name__}")


def save_model(path: str | Path, model: Model, config_hash: str | None = None) -> None:
    """Writes a checkpoint atomically.

    Args:
        path: Destination file.
        model: Any trained model from the package.
        config_hash: Hash of the configuration the model was trained with.
    """

    kind = KINDS.get(type(model))
    if kind is None:
        raise CheckpointError(f"Cannot save objects of type {type(model).__name__}")
    fields = _to_fields(model)
    with atomic_write(path) as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} kind={kind} version={code_version()} config={config_hash or '-'}\n")
        for name, value in fields.items():
            _write_field(fh, name, value)
    logger.info("Saved %s checkpoint to %s", kind, path)


def read_checkpoint_header(path: str | Path) -> dict[str, str]:
    """Parses the header line into ``kind``, ``version`` and ``config``."""

    with open(path, "r", encoding="utf-8") as fh:
        return _parse_header(fh.readline(), path)


def _parse_header(line: str, path: str | Path) -> dict[str, str]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"{path} has format version {parts[1]}, expected {FORMAT_VERSION}")
    header = dict(part.split("=", 1) for part in parts[2:] if "=" in part)
    if "kind" not in header:
        raise CheckpointError(f"{path} header has no kind")
    return header


def load_model(path: str | Path, kind: str | None = None) -> Model:
    """Reads a checkpoint written by ``save_model``.

    Args:
        path: The checkpoint file.
        kind: If given, the expected model kind (``diffusion``, ``gbm``, ...).

    Returns:
        The model.

    Raises:
        CheckpointError: If the file is malformed or holds a different kind.
    """

    fields: Fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = _parse_header(fh.readline(), path)
        if kind is not None and header["kind"] != kind:
            raise CheckpointError(f"{path} holds a {header['kind']} model, expected {kind}")
        for line in fh:
            parts = line.rstrip("\n").split(" ", 3)
            if len(parts) < 4 or parts[0] != "@":
                raise CheckpointError(f"{path}: malformed record {line[:40]!r}")
            _, name, tag, payload = parts
            if tag == "int":
                fields[name] = int(payload)
            elif tag == "float":
                fields[name] = float(payload)
            elif tag == "str":
                fields[name] = payload
            elif tag == "array":
                dtype, _, *dims = payload.split()
                shape = tuple(int(s) for s in dims)
                values = fh.readline().split()
                if dtype not in _DTYPES or len(values) != int(np.prod(shape)):
                    raise CheckpointError(f"{path}: array {name!r} does not match shape {shape}")
                fields[name] = np.array(values, dtype=_DTYPES[dtype]).reshape(shape)
            else:
                raise CheckpointError(f"{path}: unknown record type {tag!r}")
    try:
        return _from_fields(header["kind"], fields)
    except CheckpointError:
        raise
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
