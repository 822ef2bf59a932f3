import json

import pandas as pd
import pytest

from chillerlab import cli
from chillerlab import trajectory as tj
from chillerlab.harness import ModelUnitTest, dump_unit_tests


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["simulate", "--seed", "1", "--days", "2", "--out", str(d / "raw.csv")]) == 0
    return d


def test_simulate_writes_log(workdir):
    df = tj.read_csv(workdir / "raw.csv")
    assert len(df) == 576 and set(df["controller"]) == {"SOO"}


def test_clean_data_writes_csv_and_report(workdir, capsys):
    assert cli.main(["clean-data", "--in", str(workdir / "raw.csv")]) == 0
    assert (workdir / "raw.clean.csv").is_file()
    report = json.loads((workdir / "raw.clean.report.json").read_text())
    assert isinstance(report, dict)
    assert "wrote" in capsys.readouterr().out


def test_train_and_unit_test(workdir, capsys, ref_config):
    model = workdir / "m.ckpt"
    assert cli.main(["train", "--data", str(workdir / "raw.csv"), "--out", str(model), "--epochs", "1",
                     "--all-controllers"]) == 0
    anchor = tj.read_csv(workdir / "raw.csv").iloc[100]
    anchor = {k: float(anchor[k]) for k in (*ref_config.sensor_names, *ref_config.action_names)}
    anchor["chiller_1_temp"] = 44.0
    tests = workdir / "t.yaml"
    dump_unit_tests([ModelUnitTest("c1", anchor, "chiller_1_temp", (-0.5, 0.5), "energy", (1.0, -1.0), 10.0)], tests)
    capsys.readouterr()
    assert cli.main(["unit-test", "--model", str(model), "--tests", str(tests)]) == 0
    assert "aggregated metric:" in capsys.readouterr().out
    assert cli.main(["unit-test", "--model", str(model), "--tests", str(tests), "--max-metric", "0"]) == 3
    capsys.readouterr()
    assert cli.main(["unit-test", "--model", str(model)]) == 0
    assert "tower_temp->cond_temp_max" in capsys.readouterr().out


def test_training_on_soo_only_data_is_a_runtime_error(workdir):
    # no AI rows survive the AI-only filter
    assert cli.main(["train", "--data", str(workdir / "raw.csv"), "--out", str(workdir / "x.ckpt"),
                     "--epochs", "1"]) == 2


def test_explain_dumps_candidate_table(workdir, tmp_path):
    model = workdir / "m.ckpt"
    if not model.is_file():
        pytest.skip("needs the trained model")
    out = tmp_path / "cand.csv"
    assert cli.main(["explain", "--model", str(model), "--log", str(workdir / "raw.csv"), "--explain", "600",
                     "--out", str(out), "--heuristic"]) == 0
    table = pd.read_csv(out)
    assert {"survives", "exploit_score", "explore_score"} <= set(table.columns)
    assert cli.main(["explain", "--model", str(model), "--log", str(workdir / "raw.csv"), "--explain", "7"]) == 1


@pytest.mark.parametrize("argv", [["frobnicate"], ["simulate"], ["simulate", "--out", "x", "--bogus", "1"],
                                  ["clean-data", "--in", "/nonexistent.csv"]])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sensors: 3\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o.csv"), "--days", "1"]) == 2
