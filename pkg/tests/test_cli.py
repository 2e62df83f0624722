import csv
import json

import pytest

from mcuapa import cli

SINGLE = """[scenario]
m = 1
n = 1
fading = deterministic_unit
mbs_xy = 0 0
user_xy = 10 0
"""


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_solve_writes_json_and_trace(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.run(["solve", "--config", write(tmp_path, SINGLE), "--out", str(out), "--trace"])
    assert code == cli.EXIT_OK
    doc = json.loads((out / "solve.json").read_text())
    assert doc["status"] == "ok" and doc["trace_path"].endswith("trace.csv")
    assert (out / "trace.csv").exists()
    assert "total rate" in capsys.readouterr().out


def test_solve_is_byte_identical_across_runs(tmp_path):
    cfg = write(tmp_path, "[scenario]\nm = 2\nn = 4\n")
    for d in ("a", "b"):
        assert cli.run(["solve", "--config", cfg, "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/solve.json").read_bytes() == (tmp_path / "b/solve.json").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, "[scenario]\nm = 2\nn = 3\nseed = 1\n")
    cli.run(["solve", "--config", cfg, "--seed", "7", "--out", str(tmp_path)])
    assert json.loads((tmp_path / "solve.json").read_text())["seed"] == 7


def test_infeasible_exit_code(tmp_path):
    cfg = write(tmp_path, SINGLE + "[channel]\nr_min_bps = 5e9\n")
    assert cli.run(["solve", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_INFEASIBLE
    assert json.loads((tmp_path / "solve.json").read_text())["status"] == "infeasible"


def test_geometry_infeasible_exit_code(tmp_path):
    cfg = write(tmp_path, "[scenario]\nm = 2\nn = 4\ncoverage_radius_m = 1\n")
    assert cli.run(["solve", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_INFEASIBLE


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "[scenario]\nbogus = 1\n")
    assert cli.run(["solve", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert cli.run(["pareto", "--config", write(tmp_path, "[scenario]\nn = 4\n", "p.ini"),
                    "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    from mcuapa.errors import SolverFailure

    def boom(*a, **k):
        raise SolverFailure("outer iteration 1: singular")
    monkeypatch.setattr(cli.bench, "cmd_solve", boom)
    assert cli.run(["solve", "--out", str(tmp_path)]) == cli.EXIT_SOLVER


def test_csv_commands_start_with_schema_line(tmp_path):
    cfg = write(tmp_path, "[experiment]\ndraws = 0\n")
    assert cli.run(["montecarlo", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "montecarlo.csv").read_text().splitlines()
    assert lines[0] == "# schema: mcuapa.montecarlo/1"
    assert len(lines) == 2


def test_pareto_csv(tmp_path):
    cfg = write(tmp_path, "[scenario]\nm = 2\nn = 2\n[experiment]\nweight_step = 0.25\n")
    assert cli.run(["pareto", "--config", cfg, "--out", str(tmp_path)]) == 0
    with open(tmp_path / "pareto.csv") as fh:
        assert next(fh).startswith("# schema: mcuapa.pareto/")
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(r["status"] == "ok" for r in rows)


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit):
        cli.run(["plot"])
