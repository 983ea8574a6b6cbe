"""Command line entry point.

Every command reads the same YAML config (``--config``), applies ``--set``
overrides and the global flags, and writes its artifact atomically. Any
``CditeError`` is logged and turned into exit code 1.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from cdite.bench import (
    CsvSource,
    MethodSpec,
    ReplicateContext,
    ReplicateRecord,
    aggregate,
    conformal_results,
    evaluate_sets,
    format_c,
    format_summary,
    load_source,
    regressor_hidden,
    run_experiment,
    run_sensitivity,
)
from cdite.checkpoint import load_model, read_checkpoint_header, save_model
from cdite.cli.config import ExperimentConfig, load_config
from cdite.datagen import Dataset, read_dataset, write_dataset
from cdite.diffusion import DiffusionModel
from cdite.errors import CditeError, CheckpointError, ConfigError
from cdite.numerics import MlpRegressor
from cdite.utils.io import atomic_write, read_jsonl, write_jsonl
from cdite.utils.logging import configure_logging
from cdite.utils.version import code_version

logger = logging.getLogger(__name__)

TRAINABLE = ("cdm", "mlp")


def artifact_header(config: ExperimentConfig) -> str:
    return f"cdite {code_version()} config={config.config_hash}"


def summary_path(results_path: str | Path) -> Path:
    return Path(f"{results_path}.summary.txt")


def _parse_c(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"bandwidth factor must be positive, got {text}")
    return value


def _load_dataset(config: ExperimentConfig, data_path: str | None) -> Dataset:
    if data_path is None:
        return load_source(config.data, config.seed)
    if not Path(data_path).is_file():
        raise ConfigError(f"Data file does not exist: {data_path}")
    if isinstance(config.data, CsvSource):
        return read_dataset(data_path, config.data.config.treatment, config.data.config.outcome)
    return read_dataset(data_path)


def _context(
    config: ExperimentConfig,
    dataset: Dataset,
    model: DiffusionModel | None = None,
    regressor: MlpRegressor | None = None,
) -> ReplicateContext:
    return ReplicateContext(dataset, config.seed, config.diffusion, config.propensity, config.arm, model, regressor)


def cmd_gen_data(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = args.out or f"{config.experiment_id}.csv"
    dataset = load_source(config.data, config.seed)
    write_dataset(out, dataset, header=artifact_header(config))
    logger.info("Wrote %d rows with %d covariates to %s", len(dataset), dataset.d, out)
    return 0


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = args.out or f"{config.experiment_id}.{args.method}.ckpt"
    ctx = _context(config, _load_dataset(config, args.data))
    logger.info(
        "Training %s on %d fitting and %d validation rows of arm %d",
        args.method,
        len(ctx.fit),
        len(ctx.val),
        config.arm,
    )
    if args.method == "cdm":
        save_model(out, ctx.model, config.config_hash)
    else:
        hidden = next((spec.hidden for spec in config.methods if spec.method == "mlp"), MethodSpec("mlp").hidden)
        save_model(out, ctx.regressor(hidden), config.config_hash)
    return 0


def cmd_predict(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = args.out or f"{config.experiment_id}.predictions.jsonl"
    header = read_checkpoint_header(args.model)
    if header.get("config", "-") not in ("-", config.config_hash):
        logger.warning(
            "Checkpoint was trained under config %s, predicting under %s", header["config"], config.config_hash
        )
    model = load_model(args.model)
    dataset = _load_dataset(config, args.data)

    if isinstance(model, DiffusionModel):
        method = args.method or "cdm"
        if method not in ("cdm", "cdm_nolocal"):
            raise CheckpointError(f"{args.model} holds a diffusion model, which cannot run {method}")
        ctx = _context(config, dataset, model=model)
        spec = MethodSpec(method, M=config.M, alpha=config.alpha, c_grid=config.c_grid, c=args.c)
    elif isinstance(model, MlpRegressor):
        if args.method not in (None, "mlp"):
            raise CheckpointError(f"{args.model} holds an MLP regressor, which cannot run {args.method}")
        ctx = _context(config, dataset, regressor=model)
        spec = MethodSpec(
            "mlp", M=1, alpha=config.alpha, c_grid=config.c_grid, c=args.c, hidden=regressor_hidden(model)
        )
    else:
        raise CheckpointError(f"{args.model} holds a {header['kind']} model; predict needs cdm or mlp checkpoints")

    results, c = conformal_results(ctx, spec)
    rows = [
        {
            "unit": i,
            "method": spec.method,
            "bandwidth": c,
            "prediction_set": result.prediction_set.to_dict(),
            "entire_line": result.prediction_set.entire_line,
            "quantile": result.quantile,
            "test_mass": result.test_mass,
            "config_hash": config.config_hash,
            "code_version": code_version(),
        }
        for i, result in enumerate(results)
    ]
    write_jsonl(out, rows)
    entire = sum(row["entire_line"] for row in rows)
    logger.info("Wrote %d prediction sets (c=%s, %d entire-line) to %s", len(rows), format_c(c), entire, out)
    if ctx.test.has_oracles:
        metrics = evaluate_sets([r.prediction_set for r in results], ctx.target, ctx.test.X)
        logger.info("Test coverage %.4f, median length %.4f", metrics["coverage"], metrics["median_length"])
    return 0


def _existing_records(path: str | Path) -> list[ReplicateRecord]:
    return [ReplicateRecord.from_dict(row) for row in read_jsonl(path)]


def _write_results(out: str, records: Sequence[ReplicateRecord], config: ExperimentConfig) -> int:
    write_jsonl(out, [r.to_dict() for r in records])
    table = format_summary(aggregate(records), config.alpha)
    with atomic_write(summary_path(out)) as fh:
        fh.write(f"# {artifact_header(config)}\n")
        fh.write(table)
    sys.stdout.write(table)
    failed = [r for r in records if not r.ok]
    for record in failed:
        logger.error("Replicate %d %s failed: %s", record.replicate, record.method, record.error)
    logger.info("Wrote %d records to %s", len(records), out)
    return 1 if failed else 0


def cmd_experiment(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = args.out or config.output
    records = run_experiment(config.plan(), _existing_records(out))
    return _write_results(out, records, config)


def cmd_sweep(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = args.out or config.output
    records = run_sensitivity(
        config.data,
        config.sensitivity_M,
        config.sensitivity_c,
        config.replicates,
        config.seed,
        config.diffusion,
        config.propensity,
        alpha=config.alpha,
        arm=config.arm,
        workers=config.workers,
        experiment_id=config.experiment_id,
        config_hash=config.config_hash,
    )
    return _write_results(out, records, config)


def _summary_hash(path: Path) -> str | None:
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    for part in first.split():
        if part.startswith("config="):
            return part.split("=", 1)[1]
    return None


def cmd_inspect(args: argparse.Namespace, config: ExperimentConfig) -> int:
    path = Path(args.results)
    if not path.is_file():
        raise ConfigError(f"Results file does not exist: {path}")
    records = _existing_records(path)
    if not records:
        print(f"{path}: no records")
        return 0

    hashes = {r.config_hash for r in records}
    versions = {r.code_version for r in records}
    summary_hash = _summary_hash(summary_path(path))
    problems = []
    if len(hashes) > 1:
        problems.append(f"records carry {len(hashes)} config hashes: {sorted(hashes)}")
    if summary_hash is not None and hashes != {summary_hash}:
        problems.append(f"summary table was written under config {summary_hash}")
    if versions != {code_version()}:
        problems.append(f"records were written by cdite {sorted(versions)}, this is {code_version()}")
    for problem in problems:
        if not args.force:
            raise ConfigError(f"{path}: {problem} (pass --force to inspect anyway)")
        logger.warning("%s: %s", path, problem)

    alphas = {r.alpha for r in records}
    alpha = alphas.pop() if len(alphas) == 1 else config.alpha
    report = aggregate(records)
    sys.stdout.write(format_summary(report, alpha))
    for s in report.summaries:
        if s.infinite_sets:
            print(f"{s.method}: {s.infinite_sets} infinite prediction sets across {s.replicates} replicates")
    return 0


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML experiment config; defaults are used when omitted.")
    common.add_argument("--seed", type=int, help="Root seed, overrides the config's seed.")
    common.add_argument("-o", "--out", help="Output path of the command's artifact.")
    common.add_argument("-w", "--workers", type=int, help="Worker processes for experiment cells.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log at debug level.")
    common.add_argument(
        "-s",
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key, e.g. diffusion.epochs=200 or conformal.c_grid=[.inf].",
    )

    parser = argparse.ArgumentParser(prog="cdite", description="Conformal diffusion intervals for treatment effects.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", parents=[common], help="Write a synthetic or semi-synthetic dataset.")
    gen.set_defaults(func=cmd_gen_data)

    train = subparsers.add_parser("train", parents=[common], help="Train a generative or point model.")
    train.add_argument("-d", "--data", help="Dataset CSV; generated from the config when omitted.")
    train.add_argument("-m", "--method", choices=TRAINABLE, default="cdm", help="Model family to train.")
    train.set_defaults(func=cmd_train)

    predict = subparsers.add_parser("predict", parents=[common], help="Prediction sets for the test rows.")
    predict.add_argument("model", help="Checkpoint written by train.")
    predict.add_argument("-d", "--data", help="Dataset CSV; generated from the config when omitted.")
    predict.add_argument("-m", "--method", choices=("cdm", "cdm_nolocal", "mlp"), help="Defaults to the model's.")
    predict.add_argument("--c", type=_parse_c, help="Bandwidth factor; selected from the grid when omitted.")
    predict.set_defaults(func=cmd_predict)

    experiment = subparsers.add_parser("experiment", parents=[common], help="Run every method on every replicate.")
    experiment.set_defaults(func=cmd_experiment)

    sweep = subparsers.add_parser("sweep", parents=[common], help="Sensitivity of CDM to M and c.")
    sweep.set_defaults(func=cmd_sweep)

    inspect = subparsers.add_parser("inspect", parents=[common], help="Summarize a results file.")
    inspect.add_argument("results", help="JSON Lines results file.")
    inspect.add_argument("-f", "--force", action="store_true", help="Summarize even if hashes or versions differ.")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.out is not None and args.command in ("experiment", "sweep"):
        overrides.append(f"output={args.out}")
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    configure_logging(args.verbose)
    command: Callable[[argparse.Namespace, ExperimentConfig], int] = args.func
    try:
        config = load_config(args.config, _overrides(args))
        return command(args, config)
    except CditeError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
