"""Discrete boundary integral operators on a space-time mesh.

Every operator maps piecewise-constant panel densities to values at the
collocation points and is block lower triangular in the slab index.
"""
from __future__ import annotations

import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .quadrature import SpaceTimeMesh, integrate_rows

MAGIC = b"THBM"
FORMAT_VERSION = 1


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, slab: int, msg: str = "singular diagonal block"):
        super().__init__(f"{msg} at slab {slab}")
        self.slab = slab


def _tri(i: int, j: int) -> int:
    return i * (i + 1) // 2 + j


def default_threads() -> int:
    env = os.environ.get("TUBEBEM_THREADS")
    if env:
        return max(1, int(env))
    return 1


class CausalMatrix:
    """Block lower triangular matrix with ``M x M`` blocks of size ``N x N``.

    Only blocks ``(i, j)`` with ``j <= i`` are stored, packed row by row.
    """

    def __init__(self, M: int, N: int, blocks: np.ndarray | None = None):
        self.M, self.N = M, N
        nblk = M * (M + 1) // 2
        self.blocks = np.zeros((nblk, N, N)) if blocks is None else blocks
        if self.blocks.shape != (nblk, N, N):
            raise ValueError("block array has the wrong shape")

    # -- access ----------------------------------------------------------

    @property
    def shape(self):
        return (self.M * self.N, self.M * self.N)

    def block(self, i: int, j: int) -> np.ndarray:
        if j > i:
            return np.zeros((self.N, self.N))
        return self.blocks[_tri(i, j)]

    def set_block(self, i: int, j: int, value) -> None:
        if j > i:
            raise IndexError("upper blocks are structurally zero")
        self.blocks[_tri(i, j)] = value

    def row(self, i: int) -> np.ndarray:
        """Packed blocks (0..i) of block row ``i``, shape (i+1, N, N)."""
        return self.blocks[_tri(i, 0) : _tri(i, i) + 1]

    def to_dense(self) -> np.ndarray:
        M, N = self.M, self.N
        out = np.zeros((M * N, M * N))
        for i in range(M):
            out[i * N : (i + 1) * N, : (i + 1) * N] = np.hstack(list(self.row(i)))
        return out

    @classmethod
    def from_dense(cls, A: np.ndarray, M: int, N: int) -> "CausalMatrix":
        out = cls(M, N)
        for i in range(M):
            for j in range(i + 1):
                out.set_block(i, j, A[i * N : (i + 1) * N, j * N : (j + 1) * N])
        return out

    @classmethod
    def identity(cls, M: int, N: int, scale: float = 1.0) -> "CausalMatrix":
        out = cls(M, N)
        for i in range(M):
            out.blocks[_tri(i, i)] = scale * np.eye(N)
        return out

    def copy(self) -> "CausalMatrix":
        return CausalMatrix(self.M, self.N, self.blocks.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.blocks)))

    # -- algebra ---------------------------------------------------------

    def _check(self, other):
        if (self.M, self.N) != (other.M, other.N):
            raise ValueError("block structure mismatch")

    def __add__(self, other):
        if isinstance(other, CausalMatrix):
            self._check(other)
            return CausalMatrix(self.M, self.N, self.blocks + other.blocks)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, CausalMatrix):
            self._check(other)
            return CausalMatrix(self.M, self.N, self.blocks - other.blocks)
        return NotImplemented

    def __neg__(self):
        return CausalMatrix(self.M, self.N, -self.blocks)

    def __mul__(self, scalar):
        return CausalMatrix(self.M, self.N, self.blocks * float(scalar))

    __rmul__ = __mul__

    def shift(self, alpha: float, beta: float = 1.0) -> "CausalMatrix":
        """``alpha * Id + beta * self``."""
        out = self * beta
        for i in range(self.M):
            out.blocks[_tri(i, i)] += alpha * np.eye(self.N)
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Product with a vector (M*N,) or a matrix (M*N, k)."""
        M, N = self.M, self.N
        x = np.asarray(x, float)
        xs = x.reshape((M, N) + x.shape[1:])
        out = np.zeros_like(xs)
        for i in range(M):
            out[i] = np.einsum("jab,jb...->a...", self.row(i), xs[: i + 1])
        return out.reshape(x.shape)

    def __matmul__(self, other):
        if isinstance(other, CausalMatrix):
            self._check(other)
            out = CausalMatrix(self.M, self.N)
            for i in range(self.M):
                Ai = self.row(i)
                for j in range(i + 1):
                    # sum_k A_ik B_kj, j <= k <= i
                    Bcol = np.stack([other.blocks[_tri(k, j)] for k in range(j, i + 1)])
                    out.blocks[_tri(i, j)] = np.einsum("kab,kbc->ac", Ai[j : i + 1], Bcol)
            return out
        return self.matvec(other)

    def diag_factors(self):
        facs = []
        for i in range(self.M):
            D = self.block(i, i)
            try:
                with warnings.catch_warnings():
                    # singular pivots are reported below as SolverError
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    lu = sla.lu_factor(D, check_finite=True)
            except (ValueError, sla.LinAlgError) as exc:  # pragma: no cover - scipy raises rarely
                raise SolverError(i) from exc
            piv = np.abs(np.diag(lu[0]))
            if piv.min() <= 1e-14 * max(piv.max(), 1e-300):
                raise SolverError(i)
            facs.append(lu)
        return facs

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Block forward substitution; ``rhs`` is (M*N,) or (M*N, k)."""
        M, N = self.M, self.N
        rhs = np.asarray(rhs, float)
        b = rhs.reshape((M, N) + rhs.shape[1:])
        x = np.zeros_like(b)
        facs = self.diag_factors()
        for i in range(M):
            acc = b[i].copy()
            if i:
                acc -= np.einsum("jab,jb...->a...", self.row(i)[:i], x[:i])
            x[i] = sla.lu_solve(facs[i], acc)
        return x.reshape(rhs.shape)

    def solve_matrix(self, B: "CausalMatrix") -> "CausalMatrix":
        """``self^{-1} B`` for a causal right-hand side; the result is causal."""
        self._check(B)
        M, N = self.M, self.N
        facs = self.diag_factors()
        X = CausalMatrix(M, N)
        for j in range(M):
            # column j of X: blocks X_kj for k >= j
            for i in range(j, M):
                acc = B.block(i, j).copy()
                for k in range(j, i):
                    acc -= self.blocks[_tri(i, k)] @ X.blocks[_tri(k, j)]
                X.blocks[_tri(i, j)] = sla.lu_solve(facs[i], acc)
        return X

    # -- binary dump ----------------------------------------------------

    def dump(self, path) -> None:
        """Little-endian: b"THBM", u32 version, u32 M, u32 N, then packed f64 blocks."""
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", FORMAT_VERSION, self.M, self.N))
            fh.write(np.ascontiguousarray(self.blocks, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CausalMatrix":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError("not a causal matrix dump")
            version, M, N = struct.unpack("<III", fh.read(12))
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported dump version {version}")
            data = np.frombuffer(fh.read(), dtype="<f8")
        return cls(M, N, data.reshape(M * (M + 1) // 2, N, N).astype(float))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _run_rows(M: int, work, threads: int | None):
    threads = default_threads() if threads is None else threads
    if threads <= 1:
        for i in range(M):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(M)))


def assemble(mesh: SpaceTimeMesh, names=("V", "K", "Kp"), threads: int | None = None) -> dict:
    """Assemble several operators sharing quadrature nodes.

    Names: ``V`` (single layer), ``K`` (double layer), ``Kp`` (adjoint double
    layer), ``K_static`` (double layer without the velocity term).
    """
    M, N = mesh.M, mesh.N
    mats = {nm: CausalMatrix(M, N) for nm in names}
    col = mesh.collocation

    def work(i):
        sl = slice(i * N, (i + 1) * N)
        rows = integrate_rows(
            mesh, list(names), float(mesh.t_mid[i]), col.x[sl], col.n[sl], col.vn[sl],
            theta_c=col.theta[sl], near=np.ones(N, bool), slabs=range(i + 1),
        )
        for nm, r in zip(names, rows):
            # r: (N targets, M slabs, N panels)
            mats[nm].blocks[_tri(i, 0) : _tri(i, i) + 1] = np.transpose(r[:, : i + 1, :], (1, 0, 2))

    _run_rows(M, work, threads)
    for nm, A in mats.items():
        if not A.is_finite():
            raise AssemblyError(f"non-finite entries in {nm}")
    return mats


def assemble_single_layer(mesh, threads=None) -> CausalMatrix:
    return assemble(mesh, ("V",), threads)["V"]


def assemble_double_layer(mesh, threads=None) -> CausalMatrix:
    return assemble(mesh, ("K",), threads)["K"]


def assemble_adjoint_double_layer(mesh, threads=None) -> CausalMatrix:
    return assemble(mesh, ("Kp",), threads)["Kp"]


def default_offsets(mesh: SpaceTimeMesh):
    """Offsets well inside the panel half-width, where the trace is linear in eps."""
    return tuple(m * mesh.h * mesh.geom.R0 for m in (0.25, 0.125, 0.0625))


def richardson(values, eps):
    """First-order Richardson extrapolation to ``eps = 0`` on successive pairs.

    Returns the estimate from the two smallest offsets and its absolute
    difference from the estimate of the previous pair.
    """
    vals = [np.asarray(v, float) for v in values]
    eps = [float(e) for e in eps]
    if len(vals) != len(eps) or len(vals) < 2:
        raise ValueError("need matching values and offsets, at least two")
    est = [(e0 * v1 - e1 * v0) / (e0 - e1) for v0, v1, e0, e1 in zip(vals, vals[1:], eps, eps[1:])]
    delta = np.abs(est[-1] - est[-2]) if len(est) > 1 else np.zeros_like(est[-1])
    return est[-1], delta


@dataclass
class DirectHypersingular:
    matrix: CausalMatrix
    flagged: np.ndarray  # boolean (M*N, M*N) mask of non-converged extrapolations (dense)


def offset_trace_rows(mesh, names, eps: float, side: int = -1, threads=None):
    """Rows of potentials evaluated at ``x + side * eps * n`` for all collocation points.

    Returns a dict name -> array (M*N, M, N[, 2]).
    """
    M, N = mesh.M, mesh.N
    col = mesh.collocation
    res = {nm: np.zeros((M * N, M, N) + ((2,) if nm.endswith("_grad") else ())) for nm in names}

    def work(i):
        sl = slice(i * N, (i + 1) * N)
        X = col.x[sl] + side * eps * col.n[sl]
        rows = integrate_rows(mesh, list(names), float(mesh.t_mid[i]), X, col.n[sl], col.vn[sl],
                              theta_c=col.theta[sl], near=np.ones(N, bool), slabs=range(i + 1))
        for nm, r in zip(names, rows):
            res[nm][sl] = r

    _run_rows(M, work, threads)
    return res


def assemble_hypersingular_direct(mesh, offsets=None, tol: float = np.inf, threads=None) -> DirectHypersingular:
    """``-gamma_1^-`` of the double layer potential, extrapolated from interior offsets."""
    offsets = default_offsets(mesh) if offsets is None else tuple(offsets)
    if len(offsets) < 3:
        raise AssemblyError("need at least three offsets")
    col = mesh.collocation
    vals = []
    for eps in offsets:
        r = offset_trace_rows(mesh, ("K", "K_grad"), eps, side=-1, threads=threads)
        g = np.einsum("pmnc,pc->pmn", r["K_grad"], col.n) + 0.5 * col.vn[:, None, None] * r["K"]
        vals.append(-g.reshape(mesh.size, mesh.size))
    est, delta = richardson(vals, offsets)
    M, N = mesh.M, mesh.N
    flagged = delta > tol
    return DirectHypersingular(CausalMatrix.from_dense(est, M, N), flagged)


def derive_hypersingular_calderon(V: CausalMatrix, K: CausalMatrix) -> CausalMatrix:
    """``V^{-1} (1/4 Id - K^2)``."""
    try:
        rhs = (K @ K).shift(0.25, -1.0)
        return V.solve_matrix(rhs)
    except SolverError as exc:
        raise AssemblyError(f"single layer not invertible: {exc}") from exc


@dataclass
class CalderonBlocks:
    V: CausalMatrix
    K: CausalMatrix
    Kp: CausalMatrix
    D: CausalMatrix

    @property
    def M(self):
        return self.V.M

    @property
    def N(self):
        return self.V.N

    def A_dense(self) -> np.ndarray:
        """``[[-K, V], [D, K']]`` acting on (w, psi)."""
        return np.block([[-self.K.to_dense(), self.V.to_dense()], [self.D.to_dense(), self.Kp.to_dense()]])

    def apply_A(self, w, psi):
        return (-self.K.matvec(w) + self.V.matvec(psi), self.D.matvec(w) + self.Kp.matvec(psi))

    def apply_C(self, w, psi):
        a, b = self.apply_A(w, psi)
        return 0.5 * np.asarray(w) + a, 0.5 * np.asarray(psi) + b


def calderon_blocks(mesh, d_operator: str = "calderon", threads=None) -> CalderonBlocks:
    ops = assemble(mesh, ("V", "K", "Kp"), threads)
    if d_operator == "calderon":
        D = derive_hypersingular_calderon(ops["V"], ops["K"])
    elif d_operator == "direct":
        D = assemble_hypersingular_direct(mesh, threads=threads).matrix
    else:
        raise ValueError(f"unknown d_operator {d_operator!r}")
    return CalderonBlocks(ops["V"], ops["K"], ops["Kp"], D)
