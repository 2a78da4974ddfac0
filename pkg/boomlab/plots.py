"""
Aggregation of per-seed metrics files into mean/std tables, and static SVG line charts of them.
"""

import csv
import dataclasses
import logging
import typing
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .config import load_config_file

_logger = logging.getLogger(__package__)

AGGREGATED_METRICS = (
    "episode_return",
    "eval_return",
    "model_loss",
    "policy_loss",
    "alignment_loss",
    "q_mean",
)
CHARTED_METRICS = ("eval_return", "episode_return")

# fixed SVG element ids and no timestamp, so charts regenerate byte for byte
_SVG_RC_PARAMS = {"svg.hashsalt": "boomlab", "svg.fonttype": "none"}
_SVG_METADATA = {"Date": None}


class EmptyMetricsError(ValueError):
    """Custom exception raised when there is no metrics row to aggregate"""


def read_metrics(path: typing.Union[str, Path]) -> typing.Dict[str, np.ndarray]:
    """
    :returns dict: one float column per CSV header entry
    :raises EmptyMetricsError: when file holds no data row
    """
    with Path(path).open(encoding="utf-8", newline="") as stream:
        rows = list(csv.DictReader(stream))
    if not rows:
        raise EmptyMetricsError(f"no metrics row in {path}")
    if "env_step" not in rows[0]:
        raise ValueError(f"{path} isn't a metrics file (no `env_step` column)")

    return {key: np.asarray([float(row[key]) for row in rows]) for key in rows[0]}


@dataclasses.dataclass
class AggregatedMetrics:
    env_steps: np.ndarray
    means: typing.Dict[str, np.ndarray]
    stds: typing.Dict[str, np.ndarray]
    num_runs: int

    def rows(self) -> typing.List[typing.Dict[str, float]]:
        rows = []
        for index, env_step in enumerate(self.env_steps):
            row: typing.Dict[str, float] = {"env_step": int(env_step)}
            for metric in self.means:
                row[f"{metric}_mean"] = float(self.means[metric][index])
                row[f"{metric}_std"] = float(self.stds[metric][index])
            row["num_runs"] = self.num_runs
            rows.append(row)
        return rows


def aggregate_metrics(
    runs: typing.Sequence[typing.Mapping[str, np.ndarray]],
    metrics: typing.Sequence[str] = AGGREGATED_METRICS,
) -> AggregatedMetrics:
    """
    Mean and (population) standard deviation across `runs`, on the environment steps every run
    logged.

    :raises EmptyMetricsError: when there is no run, or no step shared by all of them
    """
    if not runs:
        raise EmptyMetricsError("no metrics file to aggregate")

    common_steps = set(runs[0]["env_step"].tolist())
    for run in runs[1:]:
        common_steps &= set(run["env_step"].tolist())
    if not common_steps:
        raise EmptyMetricsError("metrics files don't share any environment step")
    env_steps = np.asarray(sorted(common_steps))

    means = {}
    stds = {}
    for metric in metrics:
        stacked = np.stack(
            [run[metric][np.searchsorted(run["env_step"], env_steps)] for run in runs]
        )
        means[metric] = stacked.mean(axis=0)
        stds[metric] = stacked.std(axis=0)

    return AggregatedMetrics(env_steps, means, stds, len(runs))


def write_rows(
    path: Path, fieldnames: typing.Sequence[str], rows: typing.Iterable[typing.Mapping]
) -> Path:
    """CSV file of `rows`, floats written with `repr` so they read back exactly"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as stream:
        writer = csv.DictWriter(stream, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    key: repr(value) if isinstance(value, float) else value
                    for key, value in row.items()
                }
            )
    return path


def write_aggregate_csv(aggregated: AggregatedMetrics, path: Path) -> Path:
    rows = aggregated.rows()
    return write_rows(path, list(rows[0]), rows)


def render_svg(aggregated: AggregatedMetrics, metric: str, path: Path, title: str = "") -> Path:
    """Mean curve of `metric` with a +/- std band"""
    mean = aggregated.means[metric]
    std = aggregated.stds[metric]

    with matplotlib.rc_context(_SVG_RC_PARAMS):
        figure = Figure(figsize=(6.0, 4.0), layout="constrained")
        axes = figure.add_subplot()
        axes.plot(aggregated.env_steps, mean, color="tab:blue", label="mean")
        axes.fill_between(
            aggregated.env_steps, mean - std, mean + std, color="tab:blue", alpha=0.25, label="std"
        )
        axes.set_xlabel("environment steps")
        axes.set_ylabel(metric.replace("_", " "))
        axes.set_title(title or f"{metric} ({aggregated.num_runs} runs)")
        axes.grid(True, alpha=0.3)
        axes.legend(loc="best")

        path.parent.mkdir(parents=True, exist_ok=True)
        figure.savefig(path, format="svg", metadata=_SVG_METADATA)

    return path


def _metrics_files(inputs: typing.Iterable[Path]) -> typing.List[Path]:
    files = []
    for path in inputs:
        if path.is_dir():
            files += sorted(path.rglob("metrics.csv"))
        else:
            files.append(path)
    return files


def _task_name(metrics_path: Path) -> str:
    """Environment name from the configuration echoed next to the metrics file, if any"""
    config_path = metrics_path.parent / "config.txt"
    if config_path.is_file():
        env = load_config_file(config_path).get("env")
        if env:
            return env
    return "metrics"


def export_plots(
    inputs: typing.Iterable[typing.Union[str, Path]], out_dir: typing.Union[str, Path]
) -> typing.List[Path]:
    """
    Group metrics files (or run directories) by task, then write one `<task>_aggregate.csv` and
    one `<task>_<metric>.svg` per charted metric to `out_dir`.

    :returns list: written files
    :raises EmptyMetricsError: when no metrics row could be found among `inputs`
    """
    out_dir = Path(out_dir)
    by_task: typing.Dict[str, typing.List[typing.Dict[str, np.ndarray]]] = {}
    for metrics_path in _metrics_files(Path(path) for path in inputs):
        by_task.setdefault(_task_name(metrics_path), []).append(read_metrics(metrics_path))
    if not by_task:
        raise EmptyMetricsError("no metrics file found")

    written = []
    for task, runs in sorted(by_task.items()):
        aggregated = aggregate_metrics(runs)
        written.append(write_aggregate_csv(aggregated, out_dir / f"{task}_aggregate.csv"))
        for metric in CHARTED_METRICS:
            chart_path = out_dir / f"{task}_{metric}.svg"
            written.append(render_svg(aggregated, metric, chart_path, f"{task} : {metric}"))
        _logger.info(
            "%s : aggregated %d runs over %d steps", task, len(runs), len(aggregated.env_steps)
        )

    return written
