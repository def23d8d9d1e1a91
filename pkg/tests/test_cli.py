import json
import os

import pytest

from stackgame.cli import run
from stackgame.config import spec_to_document

from conftest import config_path, scalar_spec


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def test_validate_ok(capsys):
    assert run(["validate", "--config", config_path("scalar")]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_validate_failure_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(spec_to_document(scalar_spec(R2=0.0))))
    assert run(["validate", "--config", str(p)]) == 2
    assert run(["solve-aol", "--config", str(p)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValidationFailed" and err["exit_code"] == 2


def test_malformed_and_missing(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert run(["validate", "--config", str(p)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "MalformedSpec"
    assert run(["validate", "--config", str(tmp_path / "absent.json")]) == 4
    assert json.loads(capsys.readouterr().err)["exit_code"] == 4
    assert run(["frobnicate"]) == 2


def test_not_converged_exit_code(tmp_path, capsys):
    doc = json.loads(read(config_path("continuation")))
    doc["solver"].update(continuation_steps=1, max_iter=60)
    p = tmp_path / "hard.json"
    p.write_text(json.dumps(doc))
    assert run(["solve-aol", "--config", str(p)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "NotConverged"


def test_solve_aol_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["solve-aol", "--config", config_path("scalar"), "--out", str(out)]) == 0
    summary = json.loads(read(out / "summary.json"))
    assert summary["residual"] <= 1e-10 and summary["duality_max_error"] < 0.05
    lines = read(out / "solution.csv").splitlines()
    assert lines[0].startswith("layer,node,t,x0,k0,p10,p20,q10,q20,u0,v0")
    assert len(lines) == 1 + sum(2**i for i in range(9))
    # 17 significant digits round-trip exactly
    val = lines[2].split(",")[3]
    assert repr(float(val)) == repr(float(repr(float(val))))


def test_json_table_format(tmp_path):
    out = tmp_path / "j"
    assert run(["solve-aclm", "--config", config_path("aclm"), "--out", str(out), "--format", "json"]) == 0
    rows = json.loads(read(out / "aclm.json"))
    assert set(rows[0]) >= {"t", "alpha", "beta", "gamma", "u2", "u1", "x"}


def test_riccati_summary(tmp_path, capsys):
    assert run(["riccati", "--config", config_path("scalar"), "--out", str(tmp_path)]) == 0
    s = json.loads(read(tmp_path / "summary.json"))
    assert s["upsilon"]["applicable"] and s["upsilon"]["max_consistency_error"] < 1e-8
    assert os.path.exists(tmp_path / "riccati.csv")


def test_simulate_overrides_and_repeatability(capsys):
    args = ["simulate", "--config", config_path("scalar"), "--paths", "2000", "--seed", "3"]
    assert run(args) == 0
    first = capsys.readouterr().out
    assert run(args) == 0
    assert capsys.readouterr().out == first
    d = json.loads(first)
    assert d["paths"] == 2000 and d["seed"] == 3 and d["strategy"] == "riccati"


def test_verify_and_oracle_compare(capsys):
    assert run(["verify", "--config", config_path("constrained_n3"), "--trials", "16"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
    assert run(["oracle-compare", "--config", config_path("constrained_n3")]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["max_control_delta"] <= 1e-4 and d["clamped_sets_identical"]
