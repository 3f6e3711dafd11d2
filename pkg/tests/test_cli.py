import csv
import json
import subprocess
import sys

import pytest

from detkd.harness.cli import cli_main


@pytest.fixture
def tiny_config(tmp_path, tiny_doc):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_doc))
    return path


@pytest.fixture
def teacher_ckpt(tmp_path, tiny_config):
    out = tmp_path / "teacher"
    assert cli_main(["train-teacher", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out / "teacher.json"


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert cli_main(["train"]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert cli_main(["gradcheck", "--fast"]) == 1

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli_main(["distill", "--config", str(tmp_path / "nope.json"), "--teacher", "t", "--out", "o"]) == 1
        assert "cannot read config" in capsys.readouterr().err

    def test_missing_required_field_named(self, tmp_path, tiny_doc, capsys):
        del tiny_doc["student"]
        path = tmp_path / "c.json"
        path.write_text(json.dumps(tiny_doc))
        assert cli_main(["train-teacher", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        assert "student" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        assert cli_main(["train-teacher", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_bad_teacher_checkpoint(self, tmp_path, tiny_config):
        bad = tmp_path / "t.json"
        bad.write_text("[]")
        assert cli_main(["distill", "--config", str(tiny_config), "--teacher", str(bad), "--out", str(tmp_path)]) == 1

    def test_bad_seed_list(self, tiny_config, tmp_path):
        assert cli_main(["train-teacher", "--config", str(tiny_config), "--seeds", "1,x", "--out", str(tmp_path)]) == 1

    def test_divergence_is_numerical_failure(self, tmp_path, tiny_doc):
        tiny_doc["teacher_optim"]["lr0"] = 1e6
        path = tmp_path / "c.json"
        path.write_text(json.dumps(tiny_doc))
        with pytest.warns(RuntimeWarning):
            code = cli_main(["train-teacher", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_gradcheck_seed_7(self, tmp_path):
        assert cli_main(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["passed"] and all(c["max_rel_error"] <= 1e-4 for c in report["checks"])

    def test_oracle_check(self):
        assert cli_main(["oracle-check", "--seed", "3"]) == 0

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "detkd", "bogus"], capture_output=True, text=True)
        assert proc.returncode == 1


class TestOutputs:
    def test_train_teacher(self, teacher_ckpt):
        out = teacher_ckpt.parent
        report = json.loads((out / "report.json").read_text())
        assert report["format_version"] == 1 and report["steps"] == 30
        rows = read_csv(out / "losses.csv")
        assert len(rows) == 30 and rows[0]["component"] == "gt"

    def test_distill_writes_report_and_curves(self, tmp_path, tiny_config, teacher_ckpt):
        out = tmp_path / "results"
        argv = ["distill", "--config", str(tiny_config), "--teacher", str(teacher_ckpt), "--out", str(out)]
        assert cli_main(argv + ["--method", "sgfi,ckd", "--seeds", "0,2"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["methods"] == ["sgfi", "ckd"]
        assert [r["seed"] for r in report["per_seed"]] == [0, 2]
        assert set(report["summary"]) >= {"accuracy", "refined_iou", "corr_diff_norm"}
        rows = read_csv(out / "losses.csv")
        assert {r["component"] for r in rows} == {"gt", "feat", "ckd", "total"}
        assert len(rows) == 2 * 4 * 8
        assert len(read_csv(out / "corr.csv")) == 9

    def test_empty_method_override(self, tmp_path, tiny_doc, teacher_ckpt):
        tiny_doc["methods"] = ["ckd"]
        path = tmp_path / "c.json"
        path.write_text(json.dumps(tiny_doc))
        out = tmp_path / "r"
        assert cli_main(["distill", "--config", str(path), "--teacher", str(teacher_ckpt), "--out", str(out), "--method", "none"]) == 0
        rows = read_csv(out / "losses.csv")
        assert {r["component"] for r in rows} == {"gt", "total"}

    def test_reports_are_byte_identical(self, tmp_path, tiny_config, teacher_ckpt):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            argv = ["distill", "--config", str(tiny_config), "--teacher", str(teacher_ckpt), "--out", str(out)]
            assert cli_main(argv + ["--method", "sgfi,ckd", "--seed", "4"]) == 0
            blobs.append((out / "report.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_match_hist(self, tmp_path, tiny_config, teacher_ckpt):
        out = tmp_path / "m"
        argv = ["match-hist", "--config", str(tiny_config), "--teacher", str(teacher_ckpt), "--out", str(out)]
        assert cli_main(argv) == 0
        report = json.loads((out / "report.json").read_text())
        rows = read_csv(out / "hist.csv")
        assert sum(int(r["count"]) for r in rows) == report["total"] == 2 * 3 * 8
        assert len(report["per_seed"]) == 2

    def test_corr_diff(self, tmp_path, tiny_config, teacher_ckpt):
        out = tmp_path / "c"
        argv = ["corr-diff", "--config", str(tiny_config), "--teacher", str(teacher_ckpt), "--out", str(out)]
        assert cli_main(argv + ["--seed", "0"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mean_norm"] >= 0 and len(report["per_seed"]) == 1

    def test_mi_bound_from_mi_only_file(self, tmp_path):
        path = tmp_path / "mi.json"
        path.write_text(json.dumps({"mi": {"steps": 3, "k_list": [2, 4], "batch": 8, "eval_batches": 1}, "seeds": [0]}))
        out = tmp_path / "mi"
        assert cli_main(["mi-bound", "--config", str(path), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["mean_bound"]) == {"2", "4"}
        assert {r["component"] for r in read_csv(out / "losses.csv")} == {"infonce_k2", "infonce_k4"}

    def test_mi_bound_rejects_bad_section(self, tmp_path, capsys):
        path = tmp_path / "mi.json"
        path.write_text(json.dumps({"mi": {"rho": 1.5}}))
        assert cli_main(["mi-bound", "--config", str(path), "--out", str(tmp_path)]) == 1
        assert "mi.rho" in capsys.readouterr().err
