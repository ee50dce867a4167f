"""Oracles and identity checks for the layer operators and the tube calculus.

Everything here is deterministic: random probes draw from a generator seeded
by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import TubeGeometry, distance_to_polygon, winding_number
from .kernels import heat_kernel
from .operators import CalderonBlocks, default_offsets, richardson
from .potentials import CauchyPair
from .quadrature import ConfigError, SpaceTimeMesh, VolumeQuadrature, integrate_rows

# -- smooth fields -------------------------------------------------------------


@dataclass(frozen=True)
class SmoothField:
    """A smooth function of (t, x) with its derivatives, vectorised over points."""

    value: Callable
    grad: Callable
    dt: Callable
    laplacian: Callable

    def heat_residual(self, t, x):
        return self.dt(t, x) - self.laplacian(t, x)


def _quad_poly(c):
    c = np.asarray(c, float)

    def p(x):
        x1, x2 = x[..., 0], x[..., 1]
        return c[0] + c[1] * x1 + c[2] * x2 + c[3] * x1 * x1 + c[4] * x1 * x2 + c[5] * x2 * x2

    def dp(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([c[1] + 2 * c[3] * x1 + c[4] * x2, c[2] + c[4] * x1 + 2 * c[5] * x2], -1)

    lap = 2 * (c[3] + c[5])
    return p, dp, lap


def product_field(phi: Callable, dphi: Callable, coeffs) -> SmoothField:
    """``phi(t) * P(x)`` with ``P`` the quadratic ``c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2``."""
    p, dp, lap = _quad_poly(coeffs)
    return SmoothField(
        value=lambda t, x: phi(t) * p(x),
        grad=lambda t, x: np.asarray(phi(t))[..., None] * dp(x),
        dt=lambda t, x: dphi(t) * p(x),
        laplacian=lambda t, x: phi(t) * lap + 0 * p(x),
    )


def bump(T: float):
    """``sin(pi t / T)^2`` and its derivative; vanishes with its slope at both ends."""
    w = np.pi / T
    return (lambda t: np.sin(w * np.asarray(t)) ** 2,
            lambda t: w * np.sin(2 * w * np.asarray(t)))


def heat_source_field(x_star, t_star: float = 0.0) -> SmoothField:
    """The fundamental solution centred at ``(t_star, x_star)`` (zero before ``t_star``)."""
    xs = np.asarray(x_star, float)

    def parts(t, x):
        s = np.asarray(t, float) - t_star
        d = np.asarray(x, float) - xs
        r2 = d[..., 0] ** 2 + d[..., 1] ** 2
        G = heat_kernel(s, r2)
        inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
        return s, d, r2, G, inv

    def value(t, x):
        return parts(t, x)[3]

    def grad(t, x):
        _, d, _, G, inv = parts(t, x)
        return -d * (0.5 * inv * G)[..., None]

    def dt(t, x):
        _, _, r2, G, inv = parts(t, x)
        return G * (0.25 * r2 * inv**2 - inv)

    return SmoothField(value, grad, dt, dt)


# -- manufactured solutions ----------------------------------------------------


@dataclass
class ManufacturedSolution:
    """``u = G(t - t*, x - x*)`` with the source outside the tube, ``t* = 0``."""

    geom: TubeGeometry
    source: tuple
    margin: float = 0.2
    t_star: float = field(default=0.0, init=False)

    def __post_init__(self):
        self.source = tuple(float(v) for v in self.source)
        xs = np.asarray(self.source)[None]
        need = self.margin * self.geom.R0
        for t in np.linspace(0.0, self.geom.horizon, 129):
            poly = self.geom.polygon(t, 1024)
            if abs(winding_number(poly, xs)[0]) > 0.5:
                raise ConfigError(f"source {self.source} lies inside the domain at t={t:.4g}")
            d = distance_to_polygon(poly, xs)[0]
            if d < need:
                raise ConfigError(
                    f"source {self.source} is {d:.3g} from the boundary at t={t:.4g}, margin needs {need:.3g}"
                )
        self.field = heat_source_field(self.source, self.t_star)

    def u(self, t, x):
        return self.field.value(t, x)

    def grad(self, t, x):
        return self.field.grad(t, x)

    def traces(self, sample) -> CauchyPair:
        """``(gamma_0 u, gamma_1^- u)`` at boundary samples."""
        g = self.u(sample.t, sample.x)
        psi = np.einsum("...i,...i->...", self.grad(sample.t, sample.x), sample.n) + 0.5 * sample.vn * g
        return CauchyPair(g, psi)


def manufactured_cauchy_data(geom: TubeGeometry, mesh: SpaceTimeMesh, source, margin: float = 0.2):
    """Exact Dirichlet and conormal data at the collocation points plus an interior oracle."""
    ms = ManufacturedSolution(geom, source, margin)
    g, psi = ms.traces(mesh.collocation)
    return g, psi, ms.u


def interior_probes(geom: TubeGeometry, n: int = 20, seed: int = 0, t_min: float = 0.3, frac: float = 0.6):
    """``n`` seeded points ``(t, x)`` well inside the tube, ``t`` spread over ``[t_min T, T]``.

    Points sit at a fraction ``<= frac`` of the way from the centre to the
    boundary along a ray, which keeps them inside a star-shaped section.
    """
    rng = np.random.default_rng(seed)
    T = geom.horizon
    t = T * (t_min + (1.0 - t_min) * (np.arange(n) + 0.5) / n)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = frac * np.sqrt(rng.uniform(0.0, 1.0, n))
    c = geom.center(t)
    xb = geom.positions(t, theta)
    return t, c + r[:, None] * (xb - c)


def interior_values(evaluate, t, X) -> np.ndarray:
    """Apply ``evaluate(t0, X0)`` to probes grouped by time."""
    out = np.empty(len(t))
    for t0 in np.unique(t):
        idx = np.nonzero(t == t0)[0]
        out[idx] = evaluate(float(t0), X[idx])
    return out


# -- jump relations ------------------------------------------------------------

POTENTIALS = {"single": "V", "double": "K"}
TRACES = ("dirichlet", "neumann-minus")
PREDICTED_JUMP = {
    ("single", "dirichlet"): 0.0,
    ("single", "neumann-minus"): -1.0,
    ("double", "dirichlet"): 1.0,
    ("double", "neumann-minus"): 0.0,
}


@dataclass
class JumpReport:
    potential: str
    trace: str
    points: np.ndarray  # flat collocation indices
    interior: np.ndarray
    exterior: np.ndarray
    predicted: np.ndarray
    flagged: np.ndarray  # indices into points whose extrapolation did not settle

    @property
    def jump(self):
        return self.exterior - self.interior

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.jump - self.predicted)))


def probe_slabs(M: int):
    return sorted({M // 4, M // 2, (3 * M) // 4, M - 1})


def jump_probe(mesh: SpaceTimeMesh, density, potential: str, trace: str, epsilons=None, slabs=None,
               tol: float = np.inf) -> JumpReport:
    """Two-sided extrapolated traces of a layer potential at collocation points.

    Traces are taken from ``x -+ eps n`` (interior / exterior) and extrapolated
    to ``eps = 0``; the jump is exterior minus interior.
    """
    if potential not in POTENTIALS or trace not in TRACES:
        raise ValueError(f"unknown probe {potential}/{trace}")
    eps = default_offsets(mesh) if epsilons is None else tuple(float(e) for e in epsilons)
    band = (mesh.options.near_panels + 1) * mesh.h * float(np.min(mesh.collocation.jac))
    if len(eps) < 2 or any(b >= a for a, b in zip(eps, eps[1:])) or eps[-1] <= 0 or eps[0] >= band:
        raise ValueError("epsilons must be positive, decreasing and inside the near band")
    dens = np.asarray(density, float).reshape(mesh.M, mesh.N)
    kname = POTENTIALS[potential]
    names = [kname] + ([kname + "_grad"] if trace == "neumann-minus" else [])
    col = mesh.collocation
    slabs = probe_slabs(mesh.M) if slabs is None else list(slabs)
    pts, inner, outer, flags = [], [], [], []
    for i in slabs:
        sl = slice(i * mesh.N, (i + 1) * mesh.N)
        n, vn = col.n[sl], col.vn[sl]
        sides = []
        for side in (-1.0, 1.0):
            vals = []
            for e in eps:
                rows = integrate_rows(mesh, names, float(mesh.t_mid[i]), col.x[sl] + side * e * n,
                                      theta_c=col.theta[sl], near=np.ones(mesh.N, bool), slabs=range(i + 1))
                u = np.einsum("pmn,mn->p", rows[0], dens)
                if trace == "neumann-minus":
                    du = np.einsum("pmnc,mn->pc", rows[1], dens)
                    u = np.einsum("pc,pc->p", du, n) + 0.5 * vn * u
                vals.append(u)
            sides.append(richardson(vals, eps))
        pts.append(np.arange(sl.start, sl.stop))
        inner.append(sides[0][0])
        outer.append(sides[1][0])
        flags.append(np.maximum(sides[0][1], sides[1][1]) > tol)
    pts = np.concatenate(pts)
    return JumpReport(
        potential, trace, pts, np.concatenate(inner), np.concatenate(outer),
        PREDICTED_JUMP[(potential, trace)] * dens.ravel()[pts], np.nonzero(np.concatenate(flags))[0],
    )


# -- random smooth densities ---------------------------------------------------


def smooth_density(mesh: SpaceTimeMesh, rng: np.random.Generator, degree: int = 2) -> np.ndarray:
    """Trigonometric polynomial in theta times a polynomial in t/T, sampled at collocation points."""
    col = mesh.collocation
    s = col.t / mesh.T
    out = np.zeros_like(s)
    for k in range(degree + 1):
        for m in range(degree + 1):
            a, b = rng.standard_normal(2) / (1 + k + m)
            out += s**k * (a * np.cos(m * col.theta) + (b * np.sin(m * col.theta) if m else 0.0))
    return out


def random_pair(mesh, rng, degree: int = 2) -> CauchyPair:
    return CauchyPair(smooth_density(mesh, rng, degree), smooth_density(mesh, rng, degree))


# -- Calderon identities -------------------------------------------------------


def _rel(num, den) -> float:
    den = float(np.linalg.norm(den))
    num = float(np.linalg.norm(num))
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return num / den


def calderon_residuals(blocks: CalderonBlocks, pair: CauchyPair, q: CauchyPair | None = None) -> dict:
    """Projector residual ``|C p - p| / |p|`` and, for a probe ``q``, ``|A^2 q - q/4| / |q|``."""
    w, psi = np.asarray(pair.w, float), np.asarray(pair.psi, float)
    cw, cp = blocks.apply_C(w, psi)
    out = {"projector": _rel(np.concatenate([cw - w, cp - psi]), np.concatenate([w, psi]))}
    if q is not None:
        qw, qp = np.asarray(q.w, float), np.asarray(q.psi, float)
        a1 = blocks.apply_A(*blocks.apply_A(qw, qp))
        out["involution"] = _rel(np.concatenate([a1[0] - 0.25 * qw, a1[1] - 0.25 * qp]),
                                 np.concatenate([qw, qp]))
    return out


# -- coercivity ----------------------------------------------------------------


def panel_measures(mesh: SpaceTimeMesh) -> np.ndarray:
    return mesh.far_sources["w"].sum(axis=2).ravel()


def _min_sym_eig(A: np.ndarray, W: np.ndarray) -> float:
    s = np.sqrt(W)
    B = s[:, None] * A * s[None, :]
    return float(np.linalg.eigvalsh(0.5 * (B + B.T))[0])


@dataclass
class CoercivityReport:
    min_eig_V: float
    min_eig_D: float
    form_values: np.ndarray  # quadratic form of the block operator on random pairs
    seed: int

    @property
    def passed(self) -> bool:
        return self.min_eig_V > 0 and bool(np.all(self.form_values > 0))


def block_form(blocks: CalderonBlocks, W, psi, w) -> float:
    """``<psi, V psi - K w> + <w, K' psi + D w>`` in the panel-measure inner product."""
    a = blocks.V.matvec(psi) - blocks.K.matvec(w)
    b = blocks.Kp.matvec(psi) + blocks.D.matvec(w)
    return float(np.sum(W * (psi * a + w * b)))


def coercivity_report(blocks: CalderonBlocks, mesh: SpaceTimeMesh, n_random: int = 100,
                      seed: int = 0) -> CoercivityReport:
    W = panel_measures(mesh)
    rng = np.random.default_rng(seed)
    vals = np.array([block_form(blocks, W, *random_pair(mesh, rng)) for _ in range(n_random)])
    return CoercivityReport(_min_sym_eig(blocks.V.to_dense(), W), _min_sym_eig(blocks.D.to_dense(), W),
                            vals, seed)


# -- tube calculus -------------------------------------------------------------


def bilinear_d(u: SmoothField, v: SmoothField, vq: VolumeQuadrature) -> float:
    """``int int du/dt v + 1/2 int int <V, n> u v`` over the tube and its lateral boundary."""
    t, x, w = vq.nodes
    b = vq.boundary
    vol = np.sum(w * u.dt(t, x) * v.value(t, x))
    bnd = 0.5 * np.sum(vq.boundary_weight * b.vn * u.value(b.t, b.x) * v.value(b.t, b.x))
    return float(vol + bnd)


def greens_first_residual(u: SmoothField, v: SmoothField, vq: VolumeQuadrature, mesh=None) -> float:
    """Residual of Green's first formula on the tube with the conormal trace ``gamma_1^-``.

    ``mesh`` is accepted for interface symmetry; the boundary integral uses
    the surface nodes carried by ``vq``.
    """
    t, x, w = vq.nodes
    b = vq.boundary
    grads = np.sum(w * np.einsum("ki,ki->k", u.grad(t, x), v.grad(t, x)))
    source = np.sum(w * u.heat_residual(t, x) * v.value(t, x))
    ub = u.value(b.t, b.x)
    conormal = np.einsum("ki,ki->k", u.grad(b.t, b.x), b.n) + 0.5 * b.vn * ub
    bnd = np.sum(vq.boundary_weight * conormal * v.value(b.t, b.x))
    return float(grads + bilinear_d(u, v, vq) - source - bnd)


def energy_residual(u: SmoothField, vq: VolumeQuadrature, T: float) -> float:
    """Green's formula with ``v = u``: ``d(u, u)`` replaced by ``1/2 int_{Omega_T} u(T)^2``."""
    t, x, w = vq.nodes
    b = vq.boundary
    grads = np.sum(w * np.einsum("ki,ki->k", u.grad(t, x), u.grad(t, x)))
    final = 0.5 * np.sum(vq.final_weight * u.value(np.full(len(vq.final_weight), T), vq.final_x) ** 2)
    source = np.sum(w * u.heat_residual(t, x) * u.value(t, x))
    ub = u.value(b.t, b.x)
    conormal = np.einsum("ki,ki->k", u.grad(b.t, b.x), b.n) + 0.5 * b.vn * ub
    bnd = np.sum(vq.boundary_weight * conormal * ub)
    return float(grads + final - source - bnd)
