import json
import math

import pytest

from dbfnet.cli import main

WORKED_DELTA = math.e - 1.0


def run_cli(*argv):
    return main(list(argv))


def tiny_config(tmp_path, **extra):
    cfg = {
        "scenario": "benchmark1",
        "seed": 3,
        "dt": 0.1,
        "duration": 0.5,
        "n_agents": 3,
        "n_toa": 2,
        "n_doa": 0,
        "particles": 200,
        "grid_cells": [16, 16],
        "comm_radius": 80.0,
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


# ----------------------------------------------------------------------- run


def test_run_multiloop_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli(
        "run",
        "--scenario",
        "multiloop",
        "--outdir",
        str(out),
        "--set",
        "n_loop=3",
        "--set",
        "n_agents=4",
    )
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "tick,agent,metric,value"
    assert len(lines) == 1 + 2 * 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenario"] == "multiloop"
    assert len(summary["error_norms"]) == 3
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["n_loop"] == 3 and resolved["n_agents"] == 4
    stdout = capsys.readouterr().out
    assert "metrics.csv" in stdout
    assert "error_norms" in stdout


def test_run_benchmark_from_config_file(tmp_path):
    out = tmp_path / "b1"
    code = run_cli("run", "--config", str(tiny_config(tmp_path)), "--outdir", str(out))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenario"] == "benchmark1"
    assert summary["steps"] == 5


def test_run_flag_precedence_over_config(tmp_path):
    out = tmp_path / "o"
    code = run_cli(
        "run",
        "--config",
        str(tiny_config(tmp_path)),
        "--seed",
        "9",
        "--dt",
        "0.05",
        "--outdir",
        str(out),
    )
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 9 and resolved["dt"] == 0.05


def test_run_repeat_is_byte_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--config", str(cfg), "--outdir", str(a)) == 0
    assert run_cli("run", "--config", str(cfg), "--outdir", str(b)) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_run_default_outdir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DBFNET_OUTPUT_ROOT", str(tmp_path / "root"))
    code = run_cli("run", "--scenario", "multiloop", "--set", "n_loop=2", "--set", "seed=7")
    assert code == 0
    assert (tmp_path / "root" / "multiloop-seed7" / "metrics.csv").exists()


def test_run_rejects_unknown_key(tmp_path, capsys):
    code = run_cli(
        "run",
        "--scenario",
        "multiloop",
        "--outdir",
        str(tmp_path / "x"),
        "--set",
        "bogus_knob=3",
    )
    assert code == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_run_rejects_bad_override_syntax(tmp_path, capsys):
    code = run_cli("run", "--scenario", "multiloop", "--set", "n_loop:3")
    assert code == 2
    assert "key=value" in capsys.readouterr().err


def test_run_rejects_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert run_cli("run", "--config", str(bad)) == 2
    bad.write_text("[1, 2]", encoding="utf-8")
    assert run_cli("run", "--config", str(bad)) == 2


def test_run_rejects_invalid_scenario_values(tmp_path, capsys):
    code = run_cli(
        "run",
        "--config",
        str(tiny_config(tmp_path, dt=0.033)),
        "--outdir",
        str(tmp_path / "x"),
    )
    assert code == 2


# -------------------------------------------------------------------- bounds


def test_bounds_worked_example_json(capsys):
    code = run_cli(
        "bounds",
        "-N",
        "2",
        "--theta-l",
        "1",
        "--sigma-m",
        "0.5",
        "--delta",
        repr(WORKED_DELTA),
        "--eta",
        "0.1",
        "--json",
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["delta_t_max"] == pytest.approx(0.08838834764831843, abs=1e-12)
    assert out["kappa"] == 1


def test_bounds_plain_output_lists_keys(capsys):
    code = run_cli(
        "bounds", "-N", "3", "--theta-l", "1", "--sigma-m", "0.5", "--delta", "0.5"
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "delta_t_max" in out and "kappa" in out


def test_bounds_unreachable_delta_is_config_error(capsys):
    code = run_cli(
        "bounds",
        "-N",
        "2",
        "--theta-l",
        "1",
        "--sigma-m",
        "0.5",
        "--delta",
        "0.1",
        "--dt-min",
        "0.5",
    )
    assert code == 2
    assert "unreachable" in capsys.readouterr().err


def test_bounds_robust_and_gamma_sections(capsys):
    code = run_cli(
        "bounds",
        "-N",
        "2",
        "--theta-l",
        "1",
        "--sigma-m",
        "0.5",
        "--delta",
        repr(WORKED_DELTA),
        "--eta",
        "0.1",
        "--eps-u",
        "0.01",
        "--eps-l",
        "0.01",
        "--gamma",
        "0.4",
        "--json",
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["robust_delta_t_max"] == pytest.approx(
        0.08838834764831843 - 0.03, abs=1e-12
    )
    assert out["sigma_m_bound"] == pytest.approx(math.sqrt(0.2))


def test_bounds_budget_exhausted_is_exit_two(capsys):
    code = run_cli(
        "bounds",
        "-N",
        "2",
        "--theta-l",
        "1",
        "--sigma-m",
        "0.5",
        "--delta",
        repr(WORKED_DELTA),
        "--eta",
        "0.1",
        "--eps-u",
        "1.0",
    )
    assert code == 2


# --------------------------------------------------------------- graph-check


def write_edges(path, pairs):
    path.write_text("".join(f"{i} {j}\n" for i, j in pairs), encoding="utf-8")
    return path


def test_graph_check_path_graph(tmp_path, capsys):
    edges = write_edges(tmp_path / "g.txt", [(0, 1), (1, 2)])
    assert run_cli("graph-check", str(edges)) == 0
    out = capsys.readouterr().out
    assert "result: ok" in out
    assert "agents: 3" in out
    assert "clause (i) joint connectivity: pass" in out


def test_graph_check_metropolis_reports_gamma_bound(tmp_path, capsys):
    edges = write_edges(tmp_path / "g.txt", [(0, 1), (1, 2), (2, 3)])
    assert run_cli("graph-check", str(edges), "--weights", "metropolis") == 0
    out = capsys.readouterr().out
    assert "sigma_m bound from gamma" in out


def test_graph_check_disconnected_schedule(tmp_path, capsys):
    edges = write_edges(tmp_path / "g.txt", [(0, 1)])
    assert run_cli("graph-check", str(edges), "-N", "4") == 0
    out = capsys.readouterr().out
    assert "NOT SATISFIED" in out
    assert "clause (i) joint connectivity: FAIL" in out


def test_graph_check_two_slot_schedule(tmp_path, capsys):
    a = write_edges(tmp_path / "a.txt", [(0, 1), (2, 3)])
    b = write_edges(tmp_path / "b.txt", [(1, 2), (0, 3)])
    assert run_cli("graph-check", str(a), str(b), "-b", "2") == 0
    out = capsys.readouterr().out
    assert "result: ok" in out
    assert "b: 2" in out


# --------------------------------------------------------------------- sweep


def test_sweep_aggregates_runs(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = run_cli(
        "sweep",
        "--scenario",
        "multiloop",
        "--param",
        "n_loop",
        "--values",
        "2,3",
        "--seeds",
        "1,2",
        "--outdir",
        str(out),
    )
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("param,value,seed")
    assert len(lines) == 5
    assert (out / "n_loop-2-seed1" / "metrics.csv").exists()
    assert (out / "n_loop-3-seed2" / "summary.json").exists()


def test_sweep_requires_values(tmp_path, capsys):
    code = run_cli(
        "sweep",
        "--scenario",
        "multiloop",
        "--param",
        "n_loop",
        "--values",
        ",",
        "--outdir",
        str(tmp_path / "s"),
    )
    assert code == 2
