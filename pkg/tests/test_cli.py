import csv
import math
from pathlib import Path

import pytest

from boomlab import cli
from boomlab.cli import (
    KL_FIT_TRACE_FILE_NAME,
    SUMMARY_FILE_NAME,
    VERIFY_FILE_NAME,
    ablation_cells,
    cell_config,
    main,
)
from boomlab.config import load_config_file
from boomlab.policy import AlignmentMetric, WeightMode
from boomlab.theory_lab import REPORT_FIELDS
from boomlab.trainer import TrainConfig

SMOKE_CONFIG = Path(__file__).parent.parent / "configs" / "smoke.txt"


def _read_rows(path):
    with path.open(encoding="utf-8", newline="") as stream:
        return list(csv.DictReader(stream))


class TestAblationCells:
    """Alignment ablation matrix"""

    def test_matrix(self):
        cells = ablation_cells()
        assert len(cells) == 12
        assert len({cell.name for cell in cells}) == 12
        assert {cell.metric for cell in cells} == set(AlignmentMetric)
        assert {cell.weight_mode for cell in cells} == set(WeightMode)

    def test_baseline(self):
        cells = ablation_cells(with_baseline=True)
        assert len(cells) == 13
        assert cells[-1].name == "max_q_only"
        assert cells[-1].lambda_factor == 0.0

    def test_names(self):
        assert ablation_cells()[0].name == "forward_kl-soft_q-x0.1"

    def test_cell_config(self):
        cell = ablation_cells()[-1]
        cfg = cell_config(TrainConfig(env="pendulum"), cell, seed=4, action_dim=1)
        assert cfg.seed == 4
        assert cfg.align.metric is cell.metric
        assert cfg.align.weight_mode is cell.weight_mode
        assert cfg.align.lambda_align == pytest.approx(1e-3 * cell.lambda_factor)


class TestUsageErrors:
    """Invalid command lines exit with status 2"""

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["fly"],
            ["train"],
            ["train", "--env", "humanoid"],
            ["train", "--env", "pointmass", "--bogus"],
            ["train", "--env", "pointmass", "--unknown_key=1"],
            ["train", "--env", "pointmass", "--plan.horizon=abc"],
            ["train", "--env", "pointmass", "--gamma=1.5"],
            ["train", "--config", "/nonexistent/run.txt"],
            ["ablate", "--env", "pointmass", "--seeds", "a,b"],
            ["ablate", "--env", "pointmass", "--seeds", ","],
            ["ablate", "--env", "pointmass", "--workers", "0"],
            ["verify", "--self-test", "--bound-scale", "2"],
            ["verify", "--quick", "--plan.horizon=3"],
            ["export-plots"],
        ],
    )
    def test_exit_code(self, argv):
        with pytest.raises(SystemExit) as raised:
            main(argv)
        assert raised.value.code == 2


class TestTrain:
    """`train` subcommand"""

    def test_smoke_run(self, tmp_path):
        out = tmp_path / "run"
        argv = ["train", "--config", str(SMOKE_CONFIG), "--out", str(out), "--seed", "3"]
        assert main([*argv, "--plan.population=32", "--loss-norm=none"]) == 0

        echo = load_config_file(out / "config.txt")
        assert echo["seed"] == "3"
        assert echo["plan.population"] == "32"
        assert echo["loss_norm"] == "none"
        assert [row["env_step"] for row in _read_rows(out / "metrics.csv")] == ["60"]
        assert (out / "checkpoint.bin").is_file()

        plots = tmp_path / "plots"
        assert main(["export-plots", "--in", str(out), "--out", str(plots)]) == 0
        assert (plots / "pointmass_aggregate.csv").is_file()
        assert (plots / "pointmass_eval_return.svg").is_file()

    def test_export_without_metrics(self, tmp_path):
        assert main(["export-plots", "--in", str(tmp_path), "--out", str(tmp_path / "p")]) == 1


class TestAblate:
    """`ablate` subcommand"""

    def test_summary(self, tmp_path):
        argv = ["ablate", "--config", str(SMOKE_CONFIG), "--seeds", "0", "--steps", "35"]
        assert main([*argv, "--out", str(tmp_path)]) == 0

        summary = _read_rows(tmp_path / SUMMARY_FILE_NAME)
        assert len(summary) == 12
        assert [int(row["rank"]) for row in summary] == list(range(1, 13))
        means = [float(row["final_eval_mean"]) for row in summary]
        assert means == sorted(means, reverse=True)
        assert {row["cell"] for row in summary} == {cell.name for cell in ablation_cells()}
        for cell in ablation_cells():
            assert (tmp_path / cell.name / "aggregate.csv").is_file()
            assert (tmp_path / cell.name / "seed0" / "metrics.csv").is_file()

    def test_failed_runs_are_recorded(self, tmp_path, monkeypatch):
        real_run_cell = cli._run_cell

        def run_cell(cfg, out_dir):
            if cfg.align.metric is AlignmentMetric.REVERSE_KL_SURROGATE:
                raise OSError("disk full")
            return real_run_cell(cfg, out_dir)

        monkeypatch.setattr(cli, "_run_cell", run_cell)
        argv = ["ablate", "--config", str(SMOKE_CONFIG), "--seeds", "0", "--steps", "35"]
        assert main([*argv, "--out", str(tmp_path)]) == 1

        summary = _read_rows(tmp_path / SUMMARY_FILE_NAME)
        assert len(summary) == 12
        failed = [row for row in summary if row["metric"] == "reverse_kl_surrogate"]
        assert len(failed) == 6
        assert summary[-6:] == failed
        for row in failed:
            assert math.isnan(float(row["final_eval_mean"]))
            assert row["num_failed"] == "1"
            assert not (tmp_path / row["cell"] / "aggregate.csv").exists()
        for row in summary[:6]:
            assert math.isfinite(float(row["final_eval_mean"]))
            assert row["num_failed"] == "0"
            assert (tmp_path / row["cell"] / "aggregate.csv").is_file()


class TestVerify:
    """`verify` subcommand"""

    def test_quick(self, tmp_path):
        assert main(["verify", "--quick", "--out", str(tmp_path)]) == 0
        reports = _read_rows(tmp_path / VERIFY_FILE_NAME)
        assert tuple(reports[0]) == REPORT_FIELDS
        assert all(row["failed"] == "False" for row in reports)
        assert _read_rows(tmp_path / KL_FIT_TRACE_FILE_NAME)

    def test_self_test_fails(self, tmp_path):
        assert main(["verify", "--quick", "--self-test", "--out", str(tmp_path)]) == 1
        reports = _read_rows(tmp_path / VERIFY_FILE_NAME)
        assert any(row["failed"] == "True" for row in reports)
