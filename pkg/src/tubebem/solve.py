"""Boundary integral formulations of the interior Dirichlet and Neumann problems.

Every system is causal, so it is solved by block forward substitution over
the time slabs.  A solution records the solved density, the Cauchy pair
``(gamma_0 u, gamma_1^- u)`` of the represented solution and the densities
``(a, b)`` of its representation ``u = V~ a - K~ b``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .operators import (
    CalderonBlocks,
    CausalMatrix,
    SolverError,
    assemble,
    assemble_hypersingular_direct,
    derive_hypersingular_calderon,
)
from .potentials import CauchyPair, representation_values
from .quadrature import SpaceTimeMesh

PROBLEMS = ("dirichlet", "neumann")
VARIANTS = ("i", "ii", "iii", "iv")
CSV_VERSION = 1


@dataclass(frozen=True)
class Formulation:
    problem: str
    variant: str

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r} for {self.problem}")

    @property
    def needs_hypersingular(self) -> bool:
        return self.variant in ("ii", "iv")

    def __str__(self):
        return f"{self.problem}-{self.variant}"


class LayerOperators:
    """Lazily assembled V, K, K' and D on one mesh.

    ``d_operator`` selects the Calderon-derived ("calderon") or the offset
    extrapolated ("direct") hypersingular matrix.
    """

    def __init__(self, mesh: SpaceTimeMesh, d_operator: str = "calderon", threads=None):
        if d_operator not in ("calderon", "direct"):
            raise ValueError(f"unknown d_operator {d_operator!r}")
        self.mesh = mesh
        self.d_operator = d_operator
        self.threads = threads
        self._ops: dict = {}

    @classmethod
    def from_blocks(cls, mesh, blocks: CalderonBlocks, d_operator: str = "calderon"):
        ops = cls(mesh, d_operator)
        ops._ops.update(V=blocks.V, K=blocks.K, Kp=blocks.Kp, D=blocks.D)
        return ops

    def prefetch(self, *names):
        """Assemble every missing operator in ``names`` in a single pass over the mesh."""
        if "D" in names and self.d_operator == "calderon":
            names = names + ("V", "K")
        self._need(*names)

    def _need(self, *names):
        missing = [nm for nm in names if nm in ("V", "K", "Kp") and nm not in self._ops]
        if missing:
            self._ops.update(assemble(self.mesh, tuple(missing), self.threads))

    def __getitem__(self, name: str) -> CausalMatrix:
        if name == "D" and "D" not in self._ops:
            if self.d_operator == "calderon":
                self._need("V", "K")
                self._ops["D"] = derive_hypersingular_calderon(self._ops["V"], self._ops["K"])
            else:
                self._ops["D"] = assemble_hypersingular_direct(self.mesh, threads=self.threads).matrix
        self._need(name)
        return self._ops[name]

    def blocks(self) -> CalderonBlocks:
        self.prefetch("V", "K", "Kp")
        return CalderonBlocks(self["V"], self["K"], self["Kp"], self["D"])


@dataclass
class BiePsolution:
    formulation: Formulation
    density: np.ndarray
    pair: CauchyPair
    residual: float
    layers: tuple = field(repr=False, default=None)  # (a, b) with u = V~ a - K~ b

    def interior(self, mesh: SpaceTimeMesh, t0: float, X, check: bool = True) -> np.ndarray:
        """Values of the represented solution at points ``X`` inside ``Omega_t0``."""
        a, b = self.layers
        return representation_values(mesh, CauchyPair(b, a), t0, X, check=check)


def _relative_residual(A: CausalMatrix, x, rhs) -> float:
    nb = np.linalg.norm(rhs)
    r = np.linalg.norm(A.matvec(x) - rhs)
    return 0.0 if nb == 0 and r == 0 else float(r / (nb if nb > 0 else 1.0))


def forward_substitute(A: CausalMatrix, rhs, tol: float = 1e-12) -> np.ndarray:
    """Solve ``A x = rhs`` slab by slab; checks the relative residual against ``tol``."""
    rhs = np.asarray(rhs, float)
    x = A.solve(rhs)
    nb = np.linalg.norm(rhs)
    if nb > 0 and np.isfinite(tol):
        per_slab = np.linalg.norm((A.matvec(x) - rhs).reshape(A.M, -1), axis=1)
        if np.linalg.norm(per_slab) > tol * nb:
            bad = int(np.argmax(per_slab))
            raise SolverError(bad, f"relative residual {per_slab[bad] / nb:.3e} exceeds {tol:.1e}")
    return x


# base operators each variant touches; fetched together so they share one assembly pass
_USES = {"i": ("V", "K"), "ii": ("Kp", "D"), "iii": ("V", "Kp"), "iv": ("K", "D")}


def _ops(mesh, ops, d_operator, f: Formulation):
    if ops is None:
        ops = LayerOperators(mesh, d_operator)
    elif isinstance(ops, CalderonBlocks):
        ops = LayerOperators.from_blocks(mesh, ops, d_operator)
    ops.prefetch(*_USES[f.variant])
    return ops


def solve_dirichlet(mesh: SpaceTimeMesh, g, f: Formulation, ops=None, d_operator: str = "calderon",
                    tol: float = 1e-12) -> BiePsolution:
    """Solve the interior Dirichlet problem with boundary values ``g`` (panel values)."""
    if f.problem != "dirichlet":
        raise ValueError(f"{f} is not a Dirichlet formulation")
    op = _ops(mesh, ops, d_operator, f)
    g = np.asarray(g, float).reshape(mesh.size)
    if f.variant == "i":
        A, rhs = op["V"], 0.5 * g + op["K"].matvec(g)
    elif f.variant == "ii":
        A, rhs = op["Kp"].shift(0.5, -1.0), op["D"].matvec(g)
    elif f.variant == "iii":
        A, rhs = op["V"], g
    else:
        A, rhs = op["K"].shift(0.5, -1.0), -g
    x = forward_substitute(A, rhs, tol)
    res = _relative_residual(A, x, rhs)
    if f.variant in ("i", "ii"):
        pair, layers = CauchyPair(g, x), (x, g)
    elif f.variant == "iii":
        pair, layers = CauchyPair(g, 0.5 * x + op["Kp"].matvec(x)), (x, np.zeros_like(x))
    else:
        pair, layers = CauchyPair(g, -op["D"].matvec(x)), (np.zeros_like(x), -x)
    return BiePsolution(f, x, pair, res, layers)


def solve_neumann(mesh: SpaceTimeMesh, h, f: Formulation, ops=None, d_operator: str = "calderon",
                  tol: float = 1e-12) -> BiePsolution:
    """Solve the interior Neumann problem with conormal data ``h = gamma_1^- u``."""
    if f.problem != "neumann":
        raise ValueError(f"{f} is not a Neumann formulation")
    op = _ops(mesh, ops, d_operator, f)
    h = np.asarray(h, float).reshape(mesh.size)
    if f.variant == "i":
        A, rhs = op["K"].shift(0.5), op["V"].matvec(h)
    elif f.variant == "ii":
        A, rhs = op["D"], 0.5 * h - op["Kp"].matvec(h)
    elif f.variant == "iii":
        A, rhs = op["Kp"].shift(0.5), h
    else:
        A, rhs = op["D"], -h
    x = forward_substitute(A, rhs, tol)
    res = _relative_residual(A, x, rhs)
    if f.variant in ("i", "ii"):
        pair, layers = CauchyPair(x, h), (h, x)
    elif f.variant == "iii":
        pair, layers = CauchyPair(op["V"].matvec(x), h), (x, np.zeros_like(x))
    else:
        pair, layers = CauchyPair(-0.5 * x + op["K"].matvec(x), h), (np.zeros_like(x), -x)
    return BiePsolution(f, x, pair, res, layers)


def solve(mesh, data, f: Formulation, **kw) -> BiePsolution:
    fn = solve_dirichlet if f.problem == "dirichlet" else solve_neumann
    return fn(mesh, data, f, **kw)


def write_density_csv(path, mesh: SpaceTimeMesh, values, label: str = "density") -> None:
    """One row per panel: slab, panel, t, theta, value."""
    values = np.asarray(values, float).reshape(mesh.M, mesh.N)
    with open(path, "w", newline="") as fh:
        fh.write(f"# tubebem {label} csv v{CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slab", "panel", "t", "theta", "value"])
        for i in range(mesh.M):
            for j in range(mesh.N):
                w.writerow([i, j, repr(float(mesh.t_mid[i])), repr(float(mesh.theta_mid[j])),
                            repr(float(values[i, j]))])
