import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubebem.geometry import TubeGeometry
from tubebem.kernels import heat_kernel
from tubebem.operators import (
    AssemblyError,
    CausalMatrix,
    SolverError,
    assemble,
    assemble_hypersingular_direct,
    calderon_blocks,
    default_offsets,
    default_threads,
    derive_hypersingular_calderon,
    offset_trace_rows,
    richardson,
)
from tubebem.quadrature import build_mesh

from conftest import operators


def random_causal(rng, M, N, diag_shift=4.0):
    A = CausalMatrix(M, N)
    for i in range(M):
        for j in range(i + 1):
            A.set_block(i, j, rng.normal(size=(N, N)) + (diag_shift * np.eye(N) if i == j else 0))
    return A


# -- CausalMatrix ------------------------------------------------------------


def test_dense_roundtrip_and_upper_blocks_zero(rng):
    A = random_causal(rng, 4, 3)
    D = A.to_dense()
    assert D.shape == A.shape == (12, 12)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.all(D[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] == 0)
    assert np.array_equal(CausalMatrix.from_dense(D, 4, 3).to_dense(), D)


def test_arithmetic_matches_dense(rng):
    A, B = random_causal(rng, 3, 4), random_causal(rng, 3, 4)
    x = rng.normal(size=12)
    assert np.allclose((A @ B).to_dense(), A.to_dense() @ B.to_dense())
    assert np.allclose(A @ x, A.to_dense() @ x)
    assert np.allclose((A - 2 * B).to_dense(), A.to_dense() - 2 * B.to_dense())
    assert np.allclose(A.shift(0.25, -1.0).to_dense(), 0.25 * np.eye(12) - A.to_dense())
    X = rng.normal(size=(12, 5))
    assert np.allclose(A.matvec(X), A.to_dense() @ X)


def test_forward_substitution_matches_dense_lu(rng):
    A = random_causal(rng, 6, 5)
    b = rng.normal(size=30)
    x = A.solve(b)
    ref = np.linalg.solve(A.to_dense(), b)
    assert np.allclose(x, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
    B = random_causal(rng, 6, 5)
    X = A.solve_matrix(B)
    assert np.allclose(X.to_dense(), np.linalg.solve(A.to_dense(), B.to_dense()), atol=1e-11)


def test_singular_diagonal_block_names_the_slab(rng):
    A = random_causal(rng, 4, 3)
    A.set_block(2, 2, np.ones((3, 3)))
    with pytest.raises(SolverError, match="slab 2") as info:
        A.solve(np.ones(12))
    assert info.value.slab == 2


def test_binary_dump_roundtrip(tmp_path, rng):
    A = random_causal(rng, 3, 2)
    path = tmp_path / "A.bin"
    A.dump(path)
    raw = path.read_bytes()
    assert raw[:4] == b"THBM"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 3, 2]
    assert len(raw) == 16 + 8 * 6 * 4
    # block (i, j) sits at packed index i(i+1)/2 + j, row-major inside the block
    assert np.frombuffer(raw, "<f8", count=4, offset=16 + 8 * 4 * 4).reshape(2, 2).tolist() == A.block(2, 1).tolist()
    assert np.array_equal(CausalMatrix.load(path).to_dense(), A.to_dense())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        CausalMatrix.load(path)


def test_richardson_is_exact_on_linear_data():
    eps = [0.4, 0.2, 0.1]
    est, delta = richardson([3.0 + 2 * e for e in eps], eps)
    assert est == pytest.approx(3.0) and delta == pytest.approx(0.0, abs=1e-14)
    # quadratic remainder shows up as a non-zero spread between pair estimates
    est, delta = richardson([3.0 + e * e for e in eps], eps)
    assert est == pytest.approx(3.0 - 0.2 * 0.1) and delta > 0
    with pytest.raises(ValueError):
        richardson([1.0], [0.1])


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.delenv("TUBEBEM_THREADS", raising=False)
    assert default_threads() == 1
    monkeypatch.setenv("TUBEBEM_THREADS", "3")
    assert default_threads() == 3


@settings(max_examples=25, deadline=None)
@given(M=st.integers(1, 4), N=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_solve_inverts_matvec(M, N, seed):
    rng = np.random.default_rng(seed)
    A = random_causal(rng, M, N, diag_shift=3.0 * N)
    x = rng.normal(size=M * N)
    assert np.allclose(A.solve(A @ x), x, atol=1e-10)


# -- assembled operators -------------------------------------------------------


def test_assembled_operators_are_causal_and_finite():
    mesh = build_mesh(TubeGeometry("radially-perturbed-circle"), 6, 8)
    blocks = calderon_blocks(mesh)
    for A in (blocks.V, blocks.K, blocks.Kp, blocks.D):
        assert A.is_finite()
        slab = np.arange(mesh.size) // mesh.N
        assert np.all(A.to_dense()[slab[:, None] < slab[None, :]] == 0)


def _assert_circulant(B, rel):
    scale = np.abs(B).max()
    for k in range(1, B.shape[0]):
        assert np.allclose(np.roll(np.roll(B, k, 0), k, 1), B, rtol=0, atol=rel * scale)


def test_stationary_blocks_are_circulant():
    mesh, ops = operators("stationary-circle", 8)
    for i in range(8):
        for j in range(i + 1):
            _assert_circulant(ops["V"].block(i, j), 1e-12)
            # the double layer numerator cancels near the target, costing a few digits
            _assert_circulant(ops["K"].block(i, j), 1e-9)
            _assert_circulant(ops["Kp"].block(i, j), 1e-9)
    D = assemble_hypersingular_direct(mesh).matrix
    _assert_circulant(D.block(5, 5), 1e-8)


def test_stationary_double_layers_are_transposes():
    _, ops = operators("stationary-circle", 8)
    for i in range(8):
        for j in range(i + 1):
            assert np.abs(ops["K"].block(i, j) - ops["Kp"].block(i, j).T).max() <= 1e-8


def test_constant_velocity_shifts_double_layer_by_single_layer():
    a = 0.3
    mesh = build_mesh(TubeGeometry("expanding-circle", {"a": a}), 8, 8)
    ops = assemble(mesh, ("V", "K", "K_static"))
    diff = ops["K"].to_dense() - ops["K_static"].to_dense()
    assert np.allclose(diff, -0.5 * a * ops["V"].to_dense(), rtol=0, atol=1e-14)


def test_single_layer_far_history_matches_brute_force():
    mesh, ops = operators("translating-circle", 8)
    g = mesh.geom
    i, p = 7, 3
    row = ops["V"].row(i)[: i - 1]  # source slabs at least two slabs back
    got = row[:, p, :].sum()
    x = np.polynomial.legendre.leggauss(60)
    t_end = mesh.t_edges[i - 1]
    tau = 0.5 * t_end * (x[0] + 1)
    th = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    T, TH = np.meshgrid(tau, th, indexing="ij")
    s = g.samples(T, TH)
    tgt = mesh.collocation[mesh.index(i, p)]
    G = heat_kernel(tgt.t - T, np.sum((tgt.x - s.x) ** 2, axis=-1))
    ref = np.sum(0.5 * t_end * x[1][:, None] * (2 * np.pi / 256) * s.jac * G)
    assert got == pytest.approx(ref, rel=1e-6)


def test_calderon_hypersingular_satisfies_defining_identity():
    _, ops = operators("translating-circle", 8)
    V, K, D = ops["V"], ops["K"], ops["D"]
    lhs = (V @ D + K @ K).to_dense()
    assert np.abs(lhs - 0.25 * np.eye(lhs.shape[0])).max() <= 1e-12


def test_calderon_hypersingular_rejects_singular_single_layer():
    V = CausalMatrix(2, 2)
    with pytest.raises(AssemblyError):
        derive_hypersingular_calderon(V, V)


def test_direct_hypersingular_basics():
    mesh = build_mesh(TubeGeometry("stationary-circle"), 4, 8)
    assert default_offsets(mesh)[0] < 0.5 * mesh.h
    res = assemble_hypersingular_direct(mesh, tol=np.inf)
    assert res.matrix.is_finite() and not res.flagged.any()
    assert np.all(res.matrix @ np.zeros(mesh.size) == 0)
    assert np.all(assemble_hypersingular_direct(mesh, tol=0.0).flagged.any())
    with pytest.raises(AssemblyError):
        assemble_hypersingular_direct(mesh, offsets=(0.1, 0.05))


@pytest.mark.parametrize("kind", ["stationary-circle", "translating-circle"])
@pytest.mark.parametrize("side", [-1, 1])
def test_one_sided_conormal_trace_of_single_layer(kind, side):
    """Interior limit gives (1/2 + K') psi, exterior limit (-1/2 + K') psi."""
    mesh = build_mesh(TubeGeometry(kind), 8, 16)
    ops = assemble(mesh, ("Kp",))
    psi = np.random.default_rng(0).normal(size=mesh.size)
    col = mesh.collocation
    eps = default_offsets(mesh)
    vals = []
    for e in eps:
        r = offset_trace_rows(mesh, ("V", "V_grad"), e, side)
        rows = np.einsum("pmnc,pc->pmn", r["V_grad"], col.n) + 0.5 * col.vn[:, None, None] * r["V"]
        vals.append(rows.reshape(mesh.size, mesh.size) @ psi)
    est, _ = richardson(vals, eps)
    ref = -0.5 * side * psi + ops["Kp"] @ psi
    assert np.abs(est - ref).max() <= 2e-2 * np.abs(ref).max()


def test_threaded_assembly_is_bitwise_identical():
    mesh = build_mesh(TubeGeometry("rotating-ellipse"), 4, 6)
    a = assemble(mesh, ("V", "K"), threads=1)
    b = assemble(mesh, ("V", "K"), threads=3)
    for name in a:
        assert np.array_equal(a[name].blocks, b[name].blocks)
