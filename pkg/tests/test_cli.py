import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from switchlq import api, cli
from switchlq.service import create_app

from instances import CONFIGS, load

SWITCHING = str(CONFIGS / "fast_switching.json")
SCALAR = str(CONFIGS / "scalar_are.json")
INHOM = str(CONFIGS / "two_regime_inhomogeneous.json")


def read(path):
    return json.loads(path.read_text())


def test_check_stability_example(tmp_path):
    assert cli.run(["check-stability", SWITCHING, "--out", str(tmp_path)]) == 0
    rep = read(tmp_path / "check_stability.json")
    assert abs(rep["abscissa"] - (-11 + np.sqrt(65)) / 2) < 1e-9
    assert 1 / 3 < rep["P_ratio_to_regime0"][1] < 4 / 5
    man = read(tmp_path / "manifest.json")
    assert man["config_sha256"] == rep["config_sha256"] and "timestamp" in man
    assert "timestamp" not in rep


def test_solve_are_scalar(tmp_path):
    assert cli.run(["solve-are", SCALAR, "--out", str(tmp_path), "--tol", "1e-10"]) == 0
    P = read(tmp_path / "solve_are.json")["solution"]["P1"][0][0][0]
    assert abs(P - 0.41421356) < 1e-8


def test_malformed_generator_exit_one(tmp_path, capsys):
    cfg = load("fast_switching.json")
    cfg["generator"] = [[-1.0, 0.5], [1.0, -1.0]]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert cli.run(["solve-are", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "RowSumViolation" in capsys.readouterr().err
    assert read(tmp_path / "o" / "manifest.json")["exit_code"] == 1


def test_unreadable_config_exit_one(tmp_path):
    (tmp_path / "x.json").write_text("{oops")
    assert cli.run(["solve-are", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == 1
    assert cli.run(["solve-are", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1


def test_infeasible_exit_two(tmp_path):
    cfg = load("scalar_are.json")
    cfg["regimes"][0].update(A=[[1.0]], B=[[0.0]])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.run(["solve-are", str(path), "--method", "newton", "--out", str(tmp_path)]) == 2


def test_verification_failure_exit_three(tmp_path, monkeypatch):
    def fake(command, cfg, opts):
        return api.CommandResult(command, {"config_sha256": "x"}, passed=False)

    monkeypatch.setattr(cli, "run_command", fake)
    assert cli.run(["verify", SCALAR, "--out", str(tmp_path)]) == 3


def test_solve_bsde_writes_csv(tmp_path):
    assert cli.run(["solve-bsde", INHOM, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "solve_bsde_adjoint.csv").read_text().splitlines()
    assert lines[0] == "t,regime,y2_0,w1_0,v2_0,v1_coef_0"
    assert len(lines) > 100
    rep = read(tmp_path / "solve_bsde.json")
    assert rep["halving_error"] < 1e-8


def test_same_seed_gives_identical_artifacts(tmp_path):
    args = ["simulate", INHOM, "--paths", "40", "--dt", "0.01", "--seed", "9", "--dump", "3"]
    assert cli.run(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b"), "--threads", "1"]) == 0
    for name in ("simulate.json", "simulate_paths.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.run(args[:-4] + ["--seed", "10", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "simulate.json").read_bytes() != (tmp_path / "c" / "simulate.json").read_bytes()


def test_threads_env_var(monkeypatch):
    monkeypatch.setenv("SWITCHLQ_THREADS", "3")
    assert cli._default_threads() == 3
    monkeypatch.setenv("SWITCHLQ_THREADS", "many")
    with pytest.raises(SystemExit):
        cli._default_threads()


def test_server_mode_matches_local(tmp_path, monkeypatch):
    client = TestClient(create_app())

    def post(url, json, timeout):
        return client.post(url.replace("http://svc", ""), json=json)

    import httpx

    monkeypatch.setattr(httpx, "post", post)
    assert cli.run(["solve-are", SCALAR, "--out", str(tmp_path / "r"), "--server", "http://svc", "--threads", "1"]) == 0
    assert cli.run(["solve-are", SCALAR, "--out", str(tmp_path / "l"), "--threads", "1"]) == 0
    assert (tmp_path / "r" / "solve_are.json").read_bytes() == (tmp_path / "l" / "solve_are.json").read_bytes()
    cfg = load("fast_switching.json")
    cfg["generator"] = [[-1.0, 0.5], [1.0, -1.0]]
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    assert cli.run(["solve-are", str(tmp_path / "bad.json"), "--server", "http://svc", "--out", str(tmp_path)]) == 1


def test_parser_has_all_commands():
    p = cli.build_parser()
    for name in api.COMMANDS:
        ns = p.parse_args([name, "c.json"])
        assert ns.command == name and ns.out.name == "out"
