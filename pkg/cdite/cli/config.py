"""Experiment configuration files.

Configs are YAML documents merged over ``DEFAULTS``; command-line overrides
use dotted keys (``--set diffusion.epochs=200``) and are parsed as YAML
scalars, so ``.inf`` and ``inf`` both work for the no-localization factor.
"""

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import yaml

from cdite.bench import DEFAULT_C_GRID, EXTERNAL_METHODS, CsvSource, DataSource, ExperimentPlan, MethodSpec
from cdite.datagen import DgpConfig, SemiSyntheticConfig
from cdite.diffusion import DiffusionConfig
from cdite.errors import ConfigError
from cdite.propensity import PropensityConfig
from cdite.utils.io import dumps_line

logger = logging.getLogger(__name__)

# Keys which change how an experiment is executed but not what it computes.
EXECUTION_KEYS = ("output", "workers")

DEFAULTS: dict[str, Any] = {
    "experiment_id": "experiment",
    "seed": 0,
    "replicates": 50,
    "workers": 1,
    "record_wallclock": False,
    "arm": 1,
    "output": "results/results.jsonl",
    "data": {"kind": "synthetic"},
    "methods": ["cdm", "cdm_nolocal", "mlp", "naive"],
    "conformal": {"alpha": 0.05, "M": 40, "c_grid": list(DEFAULT_C_GRID)},
    "diffusion": {},
    "propensity": {},
    "sensitivity": {"M_values": [10, 20, 40, 80, 160, 320], "c_values": list(DEFAULT_C_GRID)},
}


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """Splits ``a.b=value`` into the key path and the YAML-parsed value."""

    if "=" not in text:
        raise ConfigError(f"Override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Empty override key in {text!r}")
    return path, yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(values: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    out = copy.deepcopy(values)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Cannot set {text!r}: {part!r} is not a section")
        node[path[-1]] = value
    return out


def _method_spec(entry: Any, conformal: dict[str, Any]) -> MethodSpec:
    values = {"method": entry} if isinstance(entry, str) else dict(entry)
    if "method" not in values:
        raise ConfigError(f"Method entry needs a method tag: {entry!r}")
    for key in ("alpha", "M", "c_grid"):
        values.setdefault(key, conformal[key])
    return MethodSpec.from_dict(values)


def _data_source(values: dict[str, Any], seed: int) -> DataSource:
    values = dict(values)
    kind = values.pop("kind", "synthetic")
    if kind == "synthetic":
        values.setdefault("seed", seed)
        return DgpConfig.from_dict(values)
    if kind == "csv":
        if "path" not in values:
            raise ConfigError("A csv data section needs a path")
        path = str(values.pop("path"))
        if not Path(path).is_file():
            raise ConfigError(f"Data file does not exist: {path}")
        values.setdefault("seed", seed)
        return CsvSource(path, SemiSyntheticConfig.from_dict(values))
    raise ConfigError(f"Unknown data kind {kind!r}; expected synthetic or csv")


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment configuration."""

    data: DataSource
    methods: tuple[MethodSpec, ...]
    diffusion: DiffusionConfig = DiffusionConfig()
    propensity: PropensityConfig = PropensityConfig()
    alpha: float = 0.05
    M: int = 40
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    seed: int = 0
    replicates: int = 50
    workers: int = 1
    record_wallclock: bool = False
    arm: int = 1
    output: str = "results/results.jsonl"
    experiment_id: str = "experiment"
    sensitivity_M: tuple[int, ...] = (10, 20, 40, 80, 160, 320)
    sensitivity_c: tuple[float, ...] = DEFAULT_C_GRID

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        """Validates a merged config document.

        Args:
            values: The document; missing keys take their ``DEFAULTS`` values.

        Returns:
            The resolved config.

        Raises:
            ConfigError: If a key is unknown or a value is out of range.
        """

        values = _merge(DEFAULTS, values)
        unknown = set(values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        try:
            seed = int(values["seed"])
            conformal = values["conformal"]
            methods = tuple(_method_spec(m, conformal) for m in values["methods"])
            for spec in methods:
                if spec.method in EXTERNAL_METHODS and not (spec.external_path and Path(spec.external_path).is_file()):
                    raise ConfigError(f"{spec.method} needs an existing external_path, got {spec.external_path!r}")
            arm = int(values["arm"])
            if arm not in (0, 1):
                raise ConfigError(f"arm must be 0 or 1, got {arm}")
            return cls(
                data=_data_source(values["data"], seed),
                methods=methods,
                diffusion=DiffusionConfig.from_dict(values["diffusion"]),
                propensity=PropensityConfig.from_dict(values["propensity"]),
                alpha=float(conformal["alpha"]),
                M=int(conformal["M"]),
                c_grid=tuple(float(c) for c in conformal["c_grid"]),
                seed=seed,
                replicates=int(values["replicates"]),
                workers=int(values["workers"]),
                record_wallclock=bool(values["record_wallclock"]),
                arm=arm,
                output=str(values["output"]),
                experiment_id=str(values["experiment_id"]),
                sensitivity_M=tuple(int(m) for m in values["sensitivity"]["M_values"]),
                sensitivity_c=tuple(float(c) for c in values["sensitivity"]["c_values"]),
            )
        except ConfigError:
            raise
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(f"Invalid config: {e}") from e

    def to_dict(self) -> dict[str, Any]:
        """The fully resolved document, defaults included."""

        if isinstance(self.data, CsvSource):
            data = {"kind": "csv", "path": self.data.path, **self.data.config.to_dict()}
        else:
            data = {"kind": "synthetic", **self.data.to_dict()}
        return {
            "experiment_id": self.experiment_id,
            "seed": self.seed,
            "replicates": self.replicates,
            "workers": self.workers,
            "record_wallclock": self.record_wallclock,
            "arm": self.arm,
            "output": self.output,
            "data": data,
            "methods": [m.to_dict() for m in self.methods],
            "conformal": {"alpha": self.alpha, "M": self.M, "c_grid": list(self.c_grid)},
            "diffusion": asdict(self.diffusion),
            "propensity": asdict(self.propensity),
            "sensitivity": {"M_values": list(self.sensitivity_M), "c_values": list(self.sensitivity_c)},
        }

    def canonical(self) -> dict[str, Any]:
        """The resolved document without execution-only keys."""

        return {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}

    @property
    def config_hash(self) -> str:
        return config_hash(self.canonical())

    def plan(self) -> ExperimentPlan:
        return ExperimentPlan(
            source=self.data,
            methods=self.methods,
            replicates=self.replicates,
            seed=self.seed,
            diffusion=self.diffusion,
            propensity=self.propensity,
            arm=self.arm,
            workers=self.workers,
            record_wallclock=self.record_wallclock,
            experiment_id=self.experiment_id,
            config_hash=self.config_hash,
        )


def config_hash(values: dict[str, Any]) -> str:
    """First 16 hex digits of the SHA-256 of the key-sorted JSON form."""

    return hashlib.sha256(dumps_line(_normalize(values)).encode("utf-8")).hexdigest()[:16]


def _normalize(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    return float(value)


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Reads a YAML config and applies ``key=value`` overrides.

    Args:
        path: The YAML file, or None for the defaults.
        overrides: Dotted-key overrides applied in order.

    Returns:
        The resolved config.

    Raises:
        ConfigError: If the file is missing or invalid.
    """

    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file does not exist: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        values = loaded or {}
    values = apply_overrides(values, overrides)
    config = ExperimentConfig.from_dict(values)
    logger.debug("Resolved config %s (hash %s)", config.experiment_id, config.config_hash)
    return config
