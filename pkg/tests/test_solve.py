import csv

import numpy as np
import pytest

from tubebem.geometry import TubeGeometry
from tubebem.operators import CausalMatrix, SolverError
from tubebem.quadrature import build_mesh
from tubebem.solve import (
    Formulation,
    LayerOperators,
    forward_substitute,
    solve,
    solve_dirichlet,
    solve_neumann,
    write_density_csv,
)
from tubebem.verify import manufactured_cauchy_data

from conftest import operators

ALL = [Formulation(p, v) for p in ("dirichlet", "neumann") for v in ("i", "ii", "iii", "iv")]


def test_formulation_validation():
    assert str(Formulation("neumann", "iii")) == "neumann-iii"
    assert Formulation("dirichlet", "ii").needs_hypersingular
    assert not Formulation("dirichlet", "iii").needs_hypersingular
    with pytest.raises(ValueError):
        Formulation("robin", "i")
    with pytest.raises(ValueError):
        Formulation("dirichlet", "v")
    mesh, ops = operators("stationary-circle", 8)
    with pytest.raises(ValueError):
        solve_dirichlet(mesh, np.zeros(mesh.size), Formulation("neumann", "i"), ops=ops)
    with pytest.raises(ValueError):
        solve_neumann(mesh, np.zeros(mesh.size), Formulation("dirichlet", "i"), ops=ops)
    with pytest.raises(ValueError):
        LayerOperators(mesh, "exact")


def test_forward_substitute_trivial_systems(rng):
    I = CausalMatrix.identity(3, 4)
    b = rng.normal(size=12)
    assert np.array_equal(forward_substitute(I, b), b)
    A = CausalMatrix.from_dense(np.tril(rng.normal(size=(12, 12))) + 6 * np.eye(12), 3, 4)
    assert np.all(forward_substitute(A, np.zeros(12)) == 0)
    ref = np.linalg.solve(A.to_dense(), b)
    assert np.allclose(forward_substitute(A, b), ref, rtol=1e-12, atol=1e-14)


def test_forward_substitute_reports_residual_failure(rng):
    A = CausalMatrix.from_dense(np.tril(rng.normal(size=(8, 8))) + 4 * np.eye(8), 2, 4)
    # roundoff alone cannot meet an absurd tolerance; the error names the worst slab
    with pytest.raises(SolverError, match=r"relative residual .* at slab [01]$") as info:
        forward_substitute(A, rng.normal(size=8), tol=1e-30)
    assert info.value.slab in (0, 1)


@pytest.mark.parametrize("f", ALL, ids=str)
def test_zero_data_gives_zero_solution(f):
    mesh, ops = operators("translating-circle", 8)
    sol = solve(mesh, np.zeros(mesh.size), f, ops=ops)
    assert np.all(sol.density == 0) and sol.residual == 0.0
    assert np.all(sol.pair.w == 0) and np.all(sol.pair.psi == 0)
    assert np.all(sol.interior(mesh, 0.8, [[0.5, 0.0]]) == 0)


@pytest.mark.parametrize("f", ALL, ids=str)
def test_solution_matches_dense_lu_of_the_system(f):
    mesh, ops = operators("translating-circle", 8)
    data = np.random.default_rng(7).normal(size=mesh.size)
    sol = solve(mesh, data, f, ops=ops)
    V, K, Kp, D = (ops[n].to_dense() for n in ("V", "K", "Kp", "D"))
    I = np.eye(mesh.size)
    A, rhs = {
        "dirichlet-i": (V, (0.5 * I + K) @ data),
        "dirichlet-ii": (0.5 * I - Kp, D @ data),
        "dirichlet-iii": (V, data),
        "dirichlet-iv": (0.5 * I - K, -data),
        "neumann-i": (0.5 * I + K, V @ data),
        "neumann-ii": (D, (0.5 * I - Kp) @ data),
        "neumann-iii": (0.5 * I + Kp, data),
        "neumann-iv": (D, -data),
    }[str(f)]
    ref = np.linalg.solve(A, rhs)
    assert np.allclose(sol.density, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())
    assert sol.residual <= 1e-12


def test_manufactured_dirichlet_variants_reconstruct_the_cauchy_pair():
    mesh, ops = operators("translating-circle", 16)
    g, psi, _ = manufactured_cauchy_data(mesh.geom, mesh, (-2.5, 0.0))
    for v in ("i", "ii", "iii", "iv"):
        sol = solve_dirichlet(mesh, g, Formulation("dirichlet", v), ops=ops)
        assert np.array_equal(sol.pair.w, g)
        assert np.abs(sol.pair.psi - psi).max() <= 0.15 * np.abs(psi).max()


def test_causal_truncation_reproduces_leading_slabs():
    full = build_mesh(TubeGeometry("expanding-circle", {"a": 0.3}, horizon=1.0), 8, 8)
    short = build_mesh(TubeGeometry("expanding-circle", {"a": 0.3}, horizon=0.5), 4, 8)
    g = np.cos(full.collocation.theta) * full.collocation.t
    a = solve_dirichlet(full, g, Formulation("dirichlet", "i"))
    b = solve_dirichlet(short, g[: short.size], Formulation("dirichlet", "i"))
    assert np.allclose(a.density[: short.size], b.density, rtol=1e-12, atol=1e-14)


def test_density_csv_layout(tmp_path):
    mesh = build_mesh(TubeGeometry("stationary-circle"), 4, 5)
    vals = np.arange(mesh.size) / 7.0
    path = tmp_path / "d.csv"
    write_density_csv(path, mesh, vals, label="psi")
    lines = path.read_text().splitlines()
    assert lines[0] == "# tubebem psi csv v1"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["slab", "panel", "t", "theta", "value"]
    assert len(rows) == 1 + mesh.size
    assert rows[7][:2] == ["1", "1"] and float(rows[7][4]) == vals[6]
    assert float(rows[7][2]) == mesh.t_mid[1] and float(rows[7][3]) == mesh.theta_mid[1]
