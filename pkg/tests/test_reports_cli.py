"""Report format, schema validation, and the command-line driver."""

import numpy as np
import pytest

from margindecomp.cli import main
from margindecomp.models import load_checkpoint, load_dataset, make_synthetic, save_dataset, accuracy
from margindecomp.reports import (
    Report,
    ReportFormatError,
    read_report,
    render_report,
    schema_text,
    validate_report_text,
    write_report,
    write_series,
)


class TestReportFormat:
    def make_report(self):
        report = Report(meta={"seed": "3", "command": "attack"})
        report.add_table("robust_accuracy", ["attack", "value"], [["pgd", 0.25], ["md", 0.125]])
        return report

    def test_round_trip(self, tmp_path):
        path = tmp_path / "r.report"
        write_report(self.make_report(), path)
        back = read_report(path)
        assert back.meta["seed"] == "3"
        cols, rows = back.table("robust_accuracy")
        assert cols == ["attack", "value"]
        assert rows[0] == ["pgd", "0.250000"]

    def test_no_timestamps_means_stable_bytes(self, tmp_path):
        a, b = tmp_path / "a.report", tmp_path / "b.report"
        write_report(self.make_report(), a)
        write_report(self.make_report(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_validator_accepts_rendered(self):
        validate_report_text(render_report(self.make_report()))

    def test_validator_rejects_bad_magic(self):
        with pytest.raises(ReportFormatError, match="first line"):
            validate_report_text("# other\nseed = 1\n")

    def test_validator_rejects_missing_seed(self):
        with pytest.raises(ReportFormatError, match="seed"):
            validate_report_text("# margindecomp-report v1\nschema = margindecomp-report/1\n")

    def test_validator_rejects_ragged_table(self):
        text = (
            "# margindecomp-report v1\nschema = margindecomp-report/1\nseed = 1\n\n"
            "[table t]\na,b\n1,2\n3\n[end]\n"
        )
        with pytest.raises(ReportFormatError, match="ragged"):
            validate_report_text(text)

    def test_validator_rejects_unclosed_table(self):
        text = (
            "# margindecomp-report v1\nschema = margindecomp-report/1\nseed = 1\n\n"
            "[table t]\na,b\n1,2\n"
        )
        with pytest.raises(ReportFormatError, match="not closed"):
            validate_report_text(text)

    def test_seed_required_at_write(self, tmp_path):
        with pytest.raises(ValueError, match="seed"):
            write_report(Report(meta={}), tmp_path / "x.report")

    def test_schema_file_ships(self):
        text = schema_text()
        assert "margindecomp-report/1" in text

    def test_series_writer(self, tmp_path):
        path = tmp_path / "series.csv"
        write_series(path, ["step", "gir"], [[0, 1.5], [1, 2.0]])
        assert path.read_text().splitlines() == ["step,gir", "0,1.500000", "1,2.000000"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small trained suite + dataset file shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    code = main([
        "train", "--suite", "ls-study", "--seed", "1", "--out", str(root / "runs"),
        "--epochs", "4",
    ])
    assert code == 0
    data = make_synthetic("gaussians", 10, 20, 40, seed=1, split="test",
                          sigma=0.03, center_spread=0.06)
    small = root / "small.csv"
    save_dataset(data, small)
    return root


class TestTrainCommand:
    def test_creates_four_checkpoints_and_report(self, workspace):
        runs = workspace / "runs"
        names = {p.name for p in runs.glob("*.ckpt")}
        assert names == {
            "natural_seed1.ckpt", "natural_ls_seed1.ckpt", "sat_seed1.ckpt", "sat_ls_seed1.ckpt",
        }
        validate_report_text((runs / "train_seed1.report").read_text())

    def test_repeat_run_is_byte_identical(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main(["train", "--suite", "ls-study", "--seed", "1", "--out", str(again),
                     "--epochs", "4"]) == 0
        for name in ("natural_seed1.ckpt", "sat_ls_seed1.ckpt", "train_seed1.report"):
            assert (again / name).read_bytes() == (workspace / "runs" / name).read_bytes()

    def test_single_mode(self, tmp_path):
        out = tmp_path / "single"
        assert main(["train", "--mode", "natural", "--seed", "2", "--out", str(out),
                     "--epochs", "2"]) == 0
        assert (out / "natural_seed2.ckpt").exists()


class TestAttackCommand:
    def test_zero_epsilon_equals_clean_accuracy(self, workspace, tmp_path):
        out = tmp_path / "eps0"
        model_path = workspace / "runs" / "natural_seed1.ckpt"
        data_path = workspace / "small.csv"
        assert main([
            "attack", "--model", str(model_path), "--data", str(data_path),
            "--attack", "pgd", "--eps", "0", "--steps", "3", "--restarts", "1",
            "--seed", "1", "--out", str(out),
        ]) == 0
        report = read_report(out / "attack.report")
        _, rows = report.table("robust_accuracy")
        robust = float(rows[0][1])
        model = load_checkpoint(model_path)
        data = load_dataset(data_path)
        assert robust == accuracy(model, data.inputs, data.labels)

    def test_rows_sorted_descending(self, workspace, tmp_path):
        out = tmp_path / "multi"
        assert main([
            "attack", "--model", str(workspace / "runs" / "natural_ls_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--attack", "fgsm,pgd,md", "--eps", "0.05", "--steps", "10", "--restarts", "2",
            "--stage1-steps", "3", "--seed", "1", "--out", str(out),
        ]) == 0
        _, rows = read_report(out / "attack.report").table("robust_accuracy")
        values = [float(r[1]) for r in rows]
        assert values == sorted(values, reverse=True)

    def test_unknown_attack_lists_names(self, workspace, tmp_path, capsys):
        code = main([
            "attack", "--model", str(workspace / "runs" / "natural_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--attack", "dlr", "--seed", "1", "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        err = capsys.readouterr().err
        assert "dlr" in err and "pgd" in err and "md" in err

    def test_missing_model_is_config_error(self, workspace, tmp_path, capsys):
        code = main([
            "attack", "--model", str(tmp_path / "nope.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--seed", "1", "--out", str(tmp_path / "x"),
        ])
        assert code == 1

    def test_deterministic_report_bytes(self, workspace, tmp_path):
        args = lambda out: [
            "attack", "--model", str(workspace / "runs" / "sat_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--attack", "md", "--eps", "0.05", "--steps", "6", "--stage1-steps", "2",
            "--restarts", "2", "--seed", "7", "--out", str(out),
        ]
        assert main(args(tmp_path / "one")) == 0
        assert main(args(tmp_path / "two")) == 0
        assert (tmp_path / "one" / "attack.report").read_bytes() == (tmp_path / "two" / "attack.report").read_bytes()

    def test_worker_count_invariance(self, workspace, tmp_path):
        # 500 generated eval rows -> several tiles; 1 vs 4 workers must agree
        args = lambda out, workers: [
            "attack", "--model", str(workspace / "runs" / "natural_seed1.ckpt"),
            "--attack", "md", "--eps", "0.05", "--steps", "3", "--stage1-steps", "2",
            "--restarts", "2", "--seed", "1", "--workers", workers, "--out", str(out),
        ]
        assert main(args(tmp_path / "w1", "1")) == 0
        assert main(args(tmp_path / "w4", "4")) == 0
        assert (tmp_path / "w1" / "attack.report").read_bytes() == (tmp_path / "w4" / "attack.report").read_bytes()

    def test_ensemble_not_worse_than_members(self, workspace, tmp_path):
        out = tmp_path / "ens"
        assert main([
            "attack", "--model", str(workspace / "runs" / "natural_ls_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--attack", "pgd,ensemble", "--eps", "0.05", "--steps", "6", "--stage1-steps", "2",
            "--restarts", "9", "--seed", "1", "--out", str(out),
        ]) == 0
        _, rows = read_report(out / "attack.report").table("robust_accuracy")
        values = {r[0]: float(r[1]) for r in rows}
        assert values["ensemble"] <= values["pgd"]


class TestGirCommand:
    def test_two_model_comparison(self, workspace, tmp_path):
        out = tmp_path / "gir"
        assert main([
            "gir",
            "--model", str(workspace / "runs" / "natural_seed1.ckpt"),
            "--model", str(workspace / "runs" / "natural_ls_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--seed", "1", "--out", str(out),
        ]) == 0
        _, rows = read_report(out / "gir.report").table("gir")
        assert len(rows) == 2
        for row in rows:
            assert float(row[1]) >= 1.0
            assert 0.0 <= float(row[3]) <= 1.0

    def test_trajectory_rows(self, workspace, tmp_path):
        out = tmp_path / "traj"
        steps = 5
        assert main([
            "gir", "--model", str(workspace / "runs" / "natural_ls_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--trajectory", "--attack", "md", "--steps", str(steps), "--stage1-steps", "2",
            "--trajectory-samples", "3", "--seed", "1", "--out", str(out),
        ]) == 0
        lines = (out / "gir_trajectory.csv").read_text().splitlines()
        assert lines[0] == "sample,step,gir"
        assert len(lines) - 1 == 3 * (steps + 1)

    def test_gir_stats_reproducible(self, workspace, tmp_path):
        args = lambda out: [
            "gir", "--model", str(workspace / "runs" / "sat_seed1.ckpt"),
            "--data", str(workspace / "small.csv"), "--seed", "3", "--out", str(out),
        ]
        assert main(args(tmp_path / "a")) == 0
        assert main(args(tmp_path / "b")) == 0
        assert (tmp_path / "a" / "gir.report").read_bytes() == (tmp_path / "b" / "gir.report").read_bytes()


class TestChecklistCommand:
    def test_exit_zero_and_schema(self, workspace, tmp_path):
        out = tmp_path / "check"
        code = main([
            "checklist",
            "--model", str(workspace / "runs" / "natural_ls_seed1.ckpt"),
            "--substitute", str(workspace / "runs" / "natural_seed1.ckpt"),
            "--data", str(workspace / "small.csv"),
            "--eps", "0.05", "--steps", "10", "--restarts", "2",
            "--spsa-batch", "8", "--random-samples", "200",
            "--seed", "1", "--out", str(out),
        ])
        assert code == 0  # verdicts never change the exit code
        report = read_report(out / "checklist.report")
        _, rows = report.table("rules")
        assert {r[0] for r in rows} == {"fgsm_vs_pgd", "unbounded", "transfer", "spsa", "random_sampling"}
        validate_report_text((out / "checklist.report").read_text())


class TestStudyCommand:
    def test_sweep_emits_plot_data(self, tmp_path):
        out = tmp_path / "sweep"
        assert main([
            "study", "sweep", "--seed", "1", "--seeds", "1", "--out", str(out),
            "--epochs", "2", "--eval-size", "24",
        ]) == 0
        stage1 = (out / "sweep_stage1.csv").read_text().splitlines()
        assert len(stage1) - 1 == 10  # K' grid 5..50 step 5
        alpha0 = (out / "sweep_alpha0.csv").read_text().splitlines()
        assert len(alpha0) - 1 == 10

    def test_unknown_study_rejected(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["study", "mystery", "--seed", "1", "--out", str(tmp_path / "x")])

    def test_spsa_md_study_rows(self, tmp_path):
        out = tmp_path / "spsa"
        assert main([
            "study", "spsa-md", "--seed", "1", "--seeds", "1", "--out", str(out),
            "--epochs", "2", "--eval-size", "16",
        ]) == 0
        _, rows = read_report(out / "study_spsa_md.report").table("spsa_md")
        assert len(rows) == 1
        assert float(rows[0][3]) == 2 * 128 * 50  # equal query budget recorded
