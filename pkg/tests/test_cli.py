import csv
import textwrap

import numpy as np
import pytest

from tubebem import cli
from tubebem.operators import CausalMatrix, SolverError


def write_config(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body).lstrip())
    return path


BASE = """
[geometry]
kind = translating-circle
c = 0.5

[mesh]
M = 4
N = 6
levels = 4, 8

[problem]
type = dirichlet
variant = i
data = {data}
{extra}

[verify]
seed = 3
n_random = 10
volume_resolution = 16

[output]
directory = {out}
field_radial = 2
field_angular = 4
{matrices}
"""


def config(tmp_path, data="manufactured", extra="", matrices="", out="out"):
    return write_config(tmp_path, BASE.format(data=data, extra=extra, matrices=matrices, out=tmp_path / out))


def read_rows(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


# -- configuration diagnostics ---------------------------------------------------------


@pytest.mark.parametrize("body,expected", [
    ("[geometry]\nkind = square\n", "run.ini:2: [geometry] kind: unknown family 'square'"),
    ("[geometry]\nkind = stationary-circle\n\n[mesh]\nM = 8\nwobble = 2\n", "run.ini:6: [mesh] wobble: unknown key"),
    ("[geometry]\nkind = stationary-circle\n[mesh]\nM = eight\n", "run.ini:4: [mesh] m: expected an integer"),
    ("[geometry]\nkind = stationary-circle\n[mesh]\nM = 2\n", "run.ini:3: [mesh]: M and N must be integers >= 4"),
    ("[geometry]\nkind = expanding-circle\na = -3\n", "run.ini:1: [geometry]:"),
    ("[geometry]\nkind = stationary-circle\n[problem]\ndata = expression\nexpression = __import__('os')\n",
     "run.ini:5: [problem] expression:"),
    ("[geometry]\nkind = stationary-circle\n[extras]\nx = 1\n", "run.ini:3: [extras]: unknown section"),
    ("[mesh]\nM = 8\n", "missing [geometry] section"),
    ("[geometry]\nkind = stationary-circle\n[verify]\nchecks = coercivity, vibes\n", "run.ini:4: [verify] checks:"),
    ("[geometry]\nkind = stationary-circle\n[output]\nfield_times = 2.0\n", "run.ini:4: [output] field_times:"),
    ("[geometry]\nkind stationary-circle\n", "run.ini:2:"),
])
def test_config_errors_name_the_line(tmp_path, capsys, body, expected):
    path = write_config(tmp_path, body)
    assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert expected.replace("run.ini", str(path)) in err


def test_missing_config_and_bad_flags(tmp_path, capsys, monkeypatch):
    assert cli.main(["solve", "--config", str(tmp_path / "nope.ini")]) == 2
    path = config(tmp_path)
    assert cli.main(["solve", "--config", str(path), "--threads", "0"]) == 2
    assert cli.main(["solve", "--config", str(path), "--seed", "-1"]) == 2
    monkeypatch.setenv("TUBEBEM_THREADS", "many")
    assert cli.main(["solve", "--config", str(path)]) == 2
    assert "TUBEBEM_THREADS" in capsys.readouterr().err


def test_config_defaults_and_overrides(tmp_path):
    path = write_config(tmp_path, "[geometry]\nkind = rotating-ellipse\nR0 = 2\nb = 0.5\n")
    cfg = cli.load_config(path, {"seed": 11, "threads": 2})
    assert cfg.params == {"R0": 2.0, "b": 0.5}
    assert (cfg.M, cfg.N, cfg.problem, cfg.variant, cfg.data) == (16, 16, "dirichlet", "i", "manufactured")
    assert cfg.checks == cli.CHECKS and cfg.tolerances == cli.DEFAULT_TOLERANCES
    assert cfg.seed == 11 and cfg.threads == 2 and cfg.field_times == (1.0,)


def test_expression_evaluation():
    from tubebem.geometry import TubeGeometry

    s = TubeGeometry("expanding-circle", {"a": 0.5}).samples(np.array([0.5]), np.array([0.0]))
    assert cli.evaluate_expression("t * x + vn + cos(pi)", s)[0] == pytest.approx(0.5 * 1.25 + 0.5 - 1)
    for bad in ("x.__class__", "open('f')", "[1, 2]", "z + 1", "1 +"):
        with pytest.raises(ValueError):
            cli.evaluate_expression(bad, s)


# -- subcommands ---------------------------------------------------------------------------


def test_solve_with_zero_data(tmp_path, capsys):
    path = config(tmp_path, data="zero")
    assert cli.main(["solve", "--config", str(path)]) == 0
    out = tmp_path / "out"
    header, rows = read_rows(out / "density.csv")
    assert header == "# tubebem density csv v1" and len(rows) == 24
    assert all(float(r["value"]) == 0.0 for r in rows)
    _, summary = read_rows(out / "summary.csv")
    assert {r["quantity"]: r["value"] for r in summary}["residual"] == "0.0"
    _, field = read_rows(out / "field.csv")
    assert len(field) == 8 and all(float(r["value"]) == 0.0 for r in field)
    assert "residual: 0.0" in capsys.readouterr().out


def test_solve_manufactured_writes_all_outputs(tmp_path):
    path = config(tmp_path, matrices="matrices = yes")
    assert cli.main(["solve", "--config", str(path)]) == 0
    out = tmp_path / "out"
    _, summary = read_rows(out / "summary.csv")
    s = {r["quantity"]: r["value"] for r in summary}
    assert s["formulation"] == "dirichlet-i" and float(s["trace_error"]) < 0.5
    _, cauchy = read_rows(out / "cauchy.csv")
    assert list(cauchy[0]) == ["slab", "panel", "t", "theta", "dirichlet", "neumann_minus"]
    V = CausalMatrix.load(out / "V.bin")
    assert (V.M, V.N) == (4, 6) and V.is_finite()
    assert (out / "K.bin").exists()
    _, field = read_rows(out / "field.csv")
    assert {r["flag"] for r in field} == {"0"}


def test_solve_with_expression_data(tmp_path):
    path = config(tmp_path, data="expression", extra="expression = t * cos(theta)")
    assert cli.main(["solve", "--config", str(path)]) == 0
    _, rows = read_rows(tmp_path / "out" / "density.csv")
    assert any(float(r["value"]) != 0.0 for r in rows)


def test_outputs_are_deterministic(tmp_path):
    path = config(tmp_path)
    for sub in ("a", "b"):
        assert cli.main(["verify", "--config", str(path), "--out", str(tmp_path / sub)]) in (0, 1)
        assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / sub)]) == 0
    for name in ("verify.csv", "density.csv", "field.csv", "summary.csv", "cauchy.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_converge_reports_orders(tmp_path):
    path = config(tmp_path)
    assert cli.main(["converge", "--config", str(path)]) == 0
    header, rows = read_rows(tmp_path / "out" / "converge.csv")
    assert header == "# tubebem converge csv v1"
    assert [r["M"] for r in rows] == ["4", "8"]
    assert rows[0]["trace_order"] == "" and float(rows[1]["trace_order"]) > 0
    assert float(rows[1]["trace_error"]) < float(rows[0]["trace_error"])


def test_converge_needs_manufactured_data(tmp_path, capsys):
    path = config(tmp_path, data="zero")
    assert cli.main(["converge", "--config", str(path)]) == 2
    assert "manufactured" in capsys.readouterr().err


def test_verify_exit_status_follows_thresholds(tmp_path, capsys):
    extra = "checks = antisymmetry, greens\n"
    path = write_config(tmp_path, BASE.format(data="manufactured", extra="", matrices="", out=tmp_path / "v")
                        .replace("[verify]\n", "[verify]\n" + extra))
    assert cli.main(["verify", "--config", str(path)]) == 0
    header, rows = read_rows(tmp_path / "v" / "verify.csv")
    assert header == "# tubebem verify csv v1"
    assert [r["check"] for r in rows] == ["antisymmetry", "greens"] and {r["status"] for r in rows} == {"PASS"}
    strict = path.read_text().replace("[verify]\n", "[verify]\ntol_greens = 1e-30\n")
    path.write_text(strict)
    assert cli.main(["verify", "--config", str(path)]) == 1
    out = capsys.readouterr().out
    assert "FAIL greens residual" in out and "threshold 1e-30" in out


def test_solver_failures_exit_with_code_3(tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise SolverError(2)

    monkeypatch.setattr(cli, "solve", broken)
    assert cli.main(["solve", "--config", str(config(tmp_path))]) == 3
    assert "slab 2" in capsys.readouterr().err
