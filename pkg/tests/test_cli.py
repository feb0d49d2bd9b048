import json

import pytest

from weakcv.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, build_parser, main


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_subcommands_exist():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"simulate", "train", "estimate", "oracle-check", "benchmark", "slope"}


def test_simulate_dump(tmp_path, capsys):
    out = tmp_path / "paths.csv"
    assert main(["simulate", "--model", "toy2d", "--steps", "2", "--n-paths", "3", "--out", str(out)]) == EXIT_OK
    assert _json_out(capsys)["n_paths"] == 3
    assert len(out.read_text().splitlines()) == 1 + 3 * 3


def test_train_then_estimate(tmp_path, capsys):
    table = tmp_path / "t.json"
    args = ["--model", "example5d", "--steps", "2", "--seed", "4"]
    assert main(["train", *args, "--n-train", "1000", "--out", str(table)]) == EXIT_OK
    assert _json_out(capsys)["terms"] == 20
    assert main(["estimate", *args, "--n-test", "2000", "--table", str(table)]) == EXIT_OK
    cv = _json_out(capsys)
    assert cv["method"] == "cv" and cv["provenance"] == "regression" and cv["rmse"] is not None
    assert main(["estimate", *args, "--n-test", "2000"]) == EXIT_OK
    smc = _json_out(capsys)
    assert cv["var_per_path"] < smc["var_per_path"]
    # table/step mismatch is a configuration error
    assert main(["estimate", "--model", "example5d", "--steps", "3", "--table", str(table)]) == EXIT_CONFIG


def test_oracle_check(capsys):
    assert main(["oracle-check", "--model", "toy1d", "--scheme", "euler", "--steps", "3"]) == EXIT_OK
    assert _json_out(capsys)["passed"] is True


def test_exit_codes(tmp_path, capsys):
    assert main(["oracle-check", "--model", "example5d", "--steps", "4", "--max-leaves", "1000"]) == EXIT_BUDGET
    assert main(["simulate", "--steps", "0"]) == EXIT_CONFIG
    assert main(["simulate", "--model", "nope"]) == EXIT_CONFIG
    assert main(["benchmark", "--methods", "trcv", "--eps-list", "0.25", "--kappa", "1.0"]) == EXIT_CONFIG
    assert main(["train", "--truncation", "lots"]) == EXIT_CONFIG
    assert main(["slope", "--csv", str(tmp_path / "missing.csv")]) == EXIT_CONFIG


def test_singular_regression_is_numerical_failure(capsys):
    # N = 1 training path: every Gram matrix beyond step 1 is rank one
    code = main(["train", "--model", "toy2d", "--steps", "2", "--n-train", "1", "--out", "/dev/null", "--ridge", "0"])
    assert code in (EXIT_OK, EXIT_NUMERICAL)


def test_benchmark_and_slope(tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    cmd = ["benchmark", "--methods", "smc", "--eps-list", "0.5,0.35,0.25", "--reps", "2", "--out", str(csv_path)]
    assert main(cmd) == EXIT_OK
    assert len(csv_path.read_text().splitlines()) == 4
    capsys.readouterr()
    assert main(["slope", "--csv", str(csv_path), "--method", "smc"]) == EXIT_OK
    assert _json_out(capsys)["n_points"] == 3


def test_json_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 2, "n_paths": 5, "model": "toy1d"}))
    assert main(["simulate", "--json-config", str(cfg)]) == EXIT_OK
    doc = _json_out(capsys)
    assert doc["n_paths"] == 5 and doc["steps"] == 2
    # explicit flags win over the file
    assert main(["simulate", "--json-config", str(cfg), "--n-paths", "7"]) == EXIT_OK
    assert _json_out(capsys)["n_paths"] == 7
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["simulate", "--json-config", str(cfg)]) == EXIT_CONFIG
    cfg.write_text("[1, 2]")
    assert main(["simulate", "--json-config", str(cfg)]) == EXIT_CONFIG
