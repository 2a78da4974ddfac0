import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from boomlab.plots import (
    AGGREGATED_METRICS,
    CHARTED_METRICS,
    EmptyMetricsError,
    aggregate_metrics,
    export_plots,
    read_metrics,
    render_svg,
    write_aggregate_csv,
)
from boomlab.trainer import METRICS_HEADER

SVG_NAMESPACE = "{http://www.w3.org/2000/svg}"


def _write_metrics(path, rows):
    """Metrics file with every column set to `value`, except the environment step"""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRICS_HEADER)]
    for env_step, value in rows:
        lines.append(",".join([str(env_step)] + [repr(float(value))] * (len(METRICS_HEADER) - 1)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def three_runs(tmp_path):
    return [
        _write_metrics(tmp_path / f"seed{seed}" / "metrics.csv", [(10, value), (20, 2.0 * value)])
        for seed, value in enumerate([1.0, 2.0, 3.0])
    ]


class TestReadMetrics:
    """Metrics files parsing"""

    def test_columns(self, three_runs):
        metrics = read_metrics(three_runs[1])
        assert tuple(metrics) == METRICS_HEADER
        np.testing.assert_array_equal(metrics["env_step"], [10.0, 20.0])
        np.testing.assert_array_equal(metrics["eval_return"], [2.0, 4.0])

    def test_header_only(self, tmp_path):
        path = _write_metrics(tmp_path / "metrics.csv", [])
        with pytest.raises(EmptyMetricsError):
            read_metrics(path)

    def test_not_a_metrics_file(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(ValueError, match="env_step"):
            read_metrics(path)

    def test_nan_losses(self, tmp_path):
        path = _write_metrics(tmp_path / "metrics.csv", [(5, math.nan)])
        assert math.isnan(read_metrics(path)["model_loss"][0])


class TestAggregate:
    """Mean and std across seeds"""

    def test_mean_and_population_std(self, three_runs):
        aggregated = aggregate_metrics([read_metrics(path) for path in three_runs])
        assert aggregated.num_runs == 3
        np.testing.assert_array_equal(aggregated.env_steps, [10, 20])
        assert set(aggregated.means) == set(AGGREGATED_METRICS)
        np.testing.assert_allclose(aggregated.means["eval_return"], [2.0, 4.0])
        np.testing.assert_allclose(
            aggregated.stds["eval_return"], [math.sqrt(2.0 / 3.0), 2.0 * math.sqrt(2.0 / 3.0)]
        )

    def test_common_steps_only(self, tmp_path):
        first = _write_metrics(tmp_path / "a.csv", [(10, 1.0), (20, 1.0), (30, 1.0)])
        second = _write_metrics(tmp_path / "b.csv", [(20, 3.0), (30, 3.0)])
        aggregated = aggregate_metrics([read_metrics(first), read_metrics(second)])
        np.testing.assert_array_equal(aggregated.env_steps, [20, 30])
        np.testing.assert_allclose(aggregated.means["q_mean"], [2.0, 2.0])
        np.testing.assert_allclose(aggregated.stds["q_mean"], [1.0, 1.0])

    def test_no_run(self):
        with pytest.raises(EmptyMetricsError):
            aggregate_metrics([])

    def test_disjoint_steps(self, tmp_path):
        first = _write_metrics(tmp_path / "a.csv", [(10, 1.0)])
        second = _write_metrics(tmp_path / "b.csv", [(20, 1.0)])
        with pytest.raises(EmptyMetricsError):
            aggregate_metrics([read_metrics(first), read_metrics(second)])

    def test_aggregate_csv(self, three_runs, tmp_path):
        aggregated = aggregate_metrics([read_metrics(path) for path in three_runs])
        path = write_aggregate_csv(aggregated, tmp_path / "out" / "aggregate.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        header = lines[0].split(",")
        assert header[0] == "env_step"
        assert header[-1] == "num_runs"
        assert "eval_return_mean" in header
        assert "eval_return_std" in header
        assert lines[1].split(",")[header.index("eval_return_mean")] == "2.0"
        assert len(lines) == 3


class TestRenderSvg:
    """Static charts"""

    def test_valid_svg(self, three_runs, tmp_path):
        aggregated = aggregate_metrics([read_metrics(path) for path in three_runs])
        path = render_svg(aggregated, "eval_return", tmp_path / "chart.svg", "pointmass")
        root = ET.parse(path).getroot()
        assert root.tag == f"{SVG_NAMESPACE}svg"
        assert "pointmass" in path.read_text(encoding="utf-8")

    def test_byte_identical(self, three_runs, tmp_path):
        aggregated = aggregate_metrics([read_metrics(path) for path in three_runs])
        first = render_svg(aggregated, "eval_return", tmp_path / "first.svg")
        second = render_svg(aggregated, "eval_return", tmp_path / "second.svg")
        assert first.read_bytes() == second.read_bytes()


class TestExportPlots:
    """Grouping run directories by task"""

    def test_files_per_task(self, three_runs, tmp_path):
        for path in three_runs:
            (path.parent / "config.txt").write_text("env=pendulum\nseed=0\n", encoding="utf-8")

        written = export_plots([tmp_path], tmp_path / "plots")
        assert [path.name for path in written] == [
            "pendulum_aggregate.csv",
            *(f"pendulum_{metric}.svg" for metric in CHARTED_METRICS),
        ]
        assert all(path.is_file() for path in written)

    def test_without_config_echo(self, three_runs, tmp_path):
        written = export_plots(three_runs, tmp_path / "plots")
        assert written[0].name == "metrics_aggregate.csv"

    def test_two_tasks(self, tmp_path):
        for task in ("pendulum", "pointmass"):
            run_dir = tmp_path / "runs" / task
            _write_metrics(run_dir / "metrics.csv", [(10, 1.0)])
            (run_dir / "config.txt").write_text(f"env={task}\n", encoding="utf-8")

        written = export_plots([tmp_path / "runs"], tmp_path / "plots")
        assert len(written) == 2 * (1 + len(CHARTED_METRICS))
        assert written[0].name.startswith("pendulum_")
        assert written[-1].name.startswith("pointmass_")

    def test_deterministic(self, three_runs, tmp_path):
        first = export_plots(three_runs, tmp_path / "first")
        second = export_plots(three_runs, tmp_path / "second")
        for left, right in zip(first, second):
            assert left.read_bytes() == right.read_bytes()

    def test_nothing_found(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(EmptyMetricsError):
            export_plots([tmp_path / "empty"], tmp_path / "plots")
