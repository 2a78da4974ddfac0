"""
Command-line entry point : `train`, `ablate`, `verify` and `export-plots` subcommands.

Every `TrainConfig` key can be overridden with a `--key=value` flag (dotted keys for nested
sections, e.g. `--plan.horizon=5`), applied after the `--config` file.
"""

import argparse
import concurrent.futures
import contextlib
import dataclasses
import functools
import itertools
import logging
import math
import typing
from pathlib import Path

import numpy as np

from ._logging import setup_logging
from .approximator import DivergenceError
from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, load_config_file
from .envs import available_environments, make_env
from .plots import (
    EmptyMetricsError,
    aggregate_metrics,
    export_plots,
    read_metrics,
    write_aggregate_csv,
    write_rows,
)
from .policy import AlignmentMetric, WeightMode
from .theory_lab import REPORT_FIELDS, run_all_checks
from .trainer import METRICS_FILE_NAME, TrainConfig, run

_logger = logging.getLogger(__package__)

ABLATION_LAMBDA_FACTORS = (0.1, 1.0, 10.0)
SUMMARY_FILE_NAME = "summary.csv"
VERIFY_FILE_NAME = "verify.csv"
KL_FIT_TRACE_FILE_NAME = "kl_fit_trace.csv"
SELF_TEST_BOUND_SCALE = 0.5


@dataclasses.dataclass(frozen=True)
class AblationCell:
    metric: AlignmentMetric
    weight_mode: WeightMode
    lambda_factor: float

    @property
    def name(self) -> str:
        if self.lambda_factor == 0.0:
            return "max_q_only"
        return f"{self.metric.value}-{self.weight_mode.value}-x{self.lambda_factor:g}"


def ablation_cells(with_baseline: bool = False) -> typing.List[AblationCell]:
    """Alignment metric x Q-weighting x alignment coefficient scale, plus the λ=0 cell on demand"""
    cells = [
        AblationCell(metric, weight_mode, factor)
        for metric, weight_mode, factor in itertools.product(
            AlignmentMetric, WeightMode, ABLATION_LAMBDA_FACTORS
        )
    ]
    if with_baseline:
        cells.append(AblationCell(AlignmentMetric.FORWARD_KL, WeightMode.SOFT_Q, 0.0))
    return cells


def cell_config(base: TrainConfig, cell: AblationCell, seed: int, action_dim: int) -> TrainConfig:
    align = dataclasses.replace(
        base.align,
        lambda_align=base.align.effective_lambda(action_dim) * cell.lambda_factor,
        metric=cell.metric,
        weight_mode=cell.weight_mode,
    )
    return dataclasses.replace(base, align=align, seed=seed)


def _run_cell(cfg: TrainConfig, out_dir: Path) -> typing.Dict[str, float]:
    # module-level so that it pickles into worker processes
    return run(cfg, out_dir)


def _aggregate_cell(cell_dir: Path, seeds: typing.Sequence[int]) -> None:
    """Write `aggregate.csv` from whichever seeds left a readable metrics file"""
    runs = []
    for seed in seeds:
        try:
            runs.append(read_metrics(cell_dir / f"seed{seed}" / METRICS_FILE_NAME))
        except (EmptyMetricsError, OSError) as exception:
            _logger.warning("%s (seed %d) has no metrics : %s", cell_dir.name, seed, exception)

    try:
        write_aggregate_csv(aggregate_metrics(runs), cell_dir / "aggregate.csv")
    except EmptyMetricsError as exception:
        _logger.warning("%s isn't aggregated : %s", cell_dir.name, exception)


# ----------------------------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boomlab",
        description="Bootstrap off-policy model-based RL at desk scale.",
        allow_abbrev=False,
    )
    parser.add_argument("--debug", action="store_true", help="enable debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="train one agent", allow_abbrev=False)
    train.add_argument("--env", help=f"one of {', '.join(available_environments())}")
    train.add_argument("--config", type=Path, help="flat key=value configuration file")
    train.add_argument("--seed", type=int)
    train.add_argument("--out", type=Path, default=Path("runs/train"))

    ablate = subparsers.add_parser(
        "ablate", help="run the alignment ablation matrix", allow_abbrev=False
    )
    ablate.add_argument("--env", help=f"one of {', '.join(available_environments())}")
    ablate.add_argument("--config", type=Path, help="flat key=value configuration file")
    ablate.add_argument("--seeds", default="0,1,2", help="comma separated seeds shared by cells")
    ablate.add_argument("--out", type=Path, default=Path("runs/ablate"))
    ablate.add_argument("--steps", type=int, help="total environment steps of every run")
    ablate.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    ablate.add_argument(
        "--with-baseline", action="store_true", help="add the max-Q only (λ=0) cell"
    )

    verify = subparsers.add_parser(
        "verify", help="numerically check the alignment bounds", allow_abbrev=False
    )
    verify.add_argument("--out", type=Path, default=Path("runs/verify"))
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--quick", action="store_true", help="reduced trial counts")
    scale = verify.add_mutually_exclusive_group()
    scale.add_argument("--bound-scale", type=float, default=1.0, help="multiplies every bound")
    scale.add_argument(
        "--self-test",
        action="store_true",
        help=f"scale bounds by {SELF_TEST_BOUND_SCALE}, which must make verification fail",
    )

    export = subparsers.add_parser(
        "export-plots", help="aggregate metrics files and chart them", allow_abbrev=False
    )
    export.add_argument(
        "--in", dest="inputs", type=Path, nargs="+", required=True, help="metrics files or dirs"
    )
    export.add_argument("--out", type=Path, default=Path("runs/plots"))

    return parser


def parse_overrides(parser: argparse.ArgumentParser, extras: typing.Sequence[str]) -> dict:
    """`--key=value` extra arguments, anything else being a usage error"""
    overrides = {}
    for extra in extras:
        key, separator, value = extra.partition("=")
        if not key.startswith("--") or len(key) <= 2 or not separator:
            parser.error(f"unrecognized arguments: {extra}")
        overrides[key[2:].replace("-", "_")] = value
    return overrides


def load_train_config(
    parser: argparse.ArgumentParser, args: argparse.Namespace, overrides: typing.Mapping[str, str]
) -> TrainConfig:
    """Defaults, then configuration file, then `--key=value` overrides, then dedicated flags"""
    entries: typing.Dict[str, str] = {}
    try:
        if args.config is not None:
            entries.update(load_config_file(args.config))
        entries.update(overrides)
        if args.env is not None:
            entries["env"] = args.env
        if getattr(args, "seed", None) is not None:
            entries["seed"] = str(args.seed)
        if getattr(args, "steps", None) is not None:
            entries["total_steps"] = str(args.steps)
        cfg = apply_overrides(TrainConfig(), entries)
    except (ConfigError, OSError) as exception:
        parser.error(str(exception))

    if not cfg.env:
        parser.error("an environment name is required (--env)")
    if cfg.env not in available_environments():
        parser.error(
            f"unknown environment {cfg.env!r}, choose among {', '.join(available_environments())}"
        )
    return cfg


# ----------------------------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: TrainConfig, out_dir: Path) -> int:
    try:
        final = run(cfg, out_dir)
    except DivergenceError:
        return 1

    _logger.info(
        "training done : evaluation return %.3f (random policy %.3f)",
        final["eval_return"],
        final["random_policy_return"],
    )
    return 0


def _rank_key(final_eval_mean: float) -> float:
    # NaN (diverged) cells rank last, ties keep the enumeration order
    return -final_eval_mean if math.isfinite(final_eval_mean) else math.inf


def cmd_ablate(  # pylint: disable=too-many-locals
    base: TrainConfig,
    seeds: typing.Sequence[int],
    out_dir: Path,
    with_baseline: bool = False,
    workers: int = 1,
) -> int:
    """
    Run every ablation cell over the same seeds, aggregate each cell's metrics files, and write a
    summary ranked by final evaluation return (mean over seeds).
    Runs happen in-process when `workers` is 1. A failed run is logged, counted as a NaN return
    and doesn't stop the others.
    """
    action_dim = make_env(base.env).action_dim
    cells = ablation_cells(with_baseline)
    jobs = [
        (cell, seed, cell_config(base, cell, seed, action_dim), out_dir / cell.name / f"seed{seed}")
        for cell in cells
        for seed in seeds
    ]
    _logger.info("ablation : %d cells over %d seeds", len(cells), len(seeds))

    finals: typing.Dict[str, typing.List[float]] = {cell.name: [] for cell in cells}
    failures = 0
    with contextlib.ExitStack() as stack:
        results: typing.List[typing.Callable[[], typing.Dict[str, float]]]
        if workers > 1:
            executor = stack.enter_context(
                concurrent.futures.ProcessPoolExecutor(max_workers=workers)
            )
            results = [
                executor.submit(_run_cell, cfg, job_dir).result for _, _, cfg, job_dir in jobs
            ]
        else:
            results = [functools.partial(_run_cell, cfg, job_dir) for _, _, cfg, job_dir in jobs]

        for (cell, seed, _, _), result in zip(jobs, results):
            try:
                finals[cell.name].append(result()["eval_return"])
            except DivergenceError as exception:
                failures += 1
                _logger.error("%s (seed %d) diverged : %s", cell.name, seed, exception)
                finals[cell.name].append(math.nan)
            except Exception as exception:  # pylint: disable=broad-exception-caught
                failures += 1
                _logger.error(
                    "%s (seed %d) failed : %s: %s",
                    cell.name,
                    seed,
                    type(exception).__name__,
                    exception,
                )
                finals[cell.name].append(math.nan)

    summary: typing.List[typing.Dict[str, typing.Any]] = []
    for cell in cells:
        _aggregate_cell(out_dir / cell.name, seeds)

        returns = np.asarray(finals[cell.name])
        summary.append(
            {
                "cell": cell.name,
                "metric": cell.metric.value,
                "weight_mode": cell.weight_mode.value,
                "lambda_factor": cell.lambda_factor,
                "lambda_align": base.align.effective_lambda(action_dim) * cell.lambda_factor,
                "final_eval_mean": float(np.mean(returns)),
                "final_eval_std": float(np.std(returns)),
                "num_seeds": len(returns),
                "num_failed": int(np.count_nonzero(np.isnan(returns))),
            }
        )

    summary.sort(key=lambda row: _rank_key(row["final_eval_mean"]))
    for rank, row in enumerate(summary, start=1):
        row["rank"] = rank
        _logger.info(
            "#%d %s : %.3f +/- %.3f",
            rank,
            row["cell"],
            row["final_eval_mean"],
            row["final_eval_std"],
        )

    write_rows(out_dir / SUMMARY_FILE_NAME, list(summary[0]), summary)
    return 1 if failures else 0


def cmd_verify(out_dir: Path, seed: int, quick: bool, bound_scale: float) -> int:
    result = run_all_checks(seed, quick, bound_scale, dump_dir=out_dir / "counterexamples")

    for report in result.reports:
        _logger.log(
            logging.ERROR if report.failed else logging.INFO,
            "%s : %d/%d violations (empirical %.6g, bound %.6g)%s",
            report.check,
            report.violations,
            report.trials,
            report.empirical,
            report.bound,
            "" if report.asserted else " [report only]",
        )

    write_rows(out_dir / VERIFY_FILE_NAME, REPORT_FIELDS, (r.as_dict() for r in result.reports))
    write_rows(
        out_dir / KL_FIT_TRACE_FILE_NAME,
        ("metric", "fit", "step", "mean", "std", "objective"),
        (
            {
                "metric": fit.metric.value,
                "fit": index,
                "step": step,
                "mean": mean,
                "std": std,
                "objective": objective,
            }
            for index, fit in enumerate(result.kl_fits)
            for step, mean, std, objective in fit.trace
        ),
    )

    failed = result.failed
    if failed:
        _logger.error("%d of %d checks failed", len(failed), len(result.reports))
        return 1
    _logger.info("all %d checks passed", len(result.reports))
    return 0


def cmd_export_plots(inputs: typing.Sequence[Path], out_dir: Path) -> int:
    written = export_plots(inputs, out_dir)
    _logger.info("%d files written to %s", len(written), out_dir)
    return 0


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    setup_logging(args.debug)

    if args.command not in ("train", "ablate") and extras:
        parser.error(f"unrecognized arguments: {' '.join(extras)}")

    try:
        if args.command == "train":
            cfg = load_train_config(parser, args, parse_overrides(parser, extras))
            return cmd_train(cfg, args.out)

        if args.command == "ablate":
            try:
                seeds = [int(seed) for seed in args.seeds.split(",") if seed.strip()]
            except ValueError:
                parser.error(f"invalid seeds list : {args.seeds!r}")
            if not seeds:
                parser.error("at least one seed is required")
            if args.workers <= 0:
                parser.error("--workers must be positive")
            cfg = load_train_config(parser, args, parse_overrides(parser, extras))
            return cmd_ablate(cfg, seeds, args.out, args.with_baseline, args.workers)

        if args.command == "verify":
            scale = SELF_TEST_BOUND_SCALE if args.self_test else args.bound_scale
            return cmd_verify(args.out, args.seed, args.quick, scale)

        return cmd_export_plots(args.inputs, args.out)
    except (EmptyMetricsError, CheckpointError, OSError) as exception:
        _logger.error("%s failed : %s", args.command, exception)
        return 1
