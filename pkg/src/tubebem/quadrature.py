"""Space-time mesh on Sigma_T and causal panel integration of the heat kernels.

Densities are piecewise constant on ``M`` uniform time slabs times ``N``
uniform panels in the reference angle.  Every panel integral is a sum over
nodes ``(tau, theta)``; three node families are used:

* separated in time (target at least one slab width past the slab end):
  tensor Gauss rule, ``q_t`` nodes in ``tau`` and ``q_s`` in ``theta``;
* temporally close slabs: ``sigma = t - tau`` is integrated in the variable
  ``z = log(sigma)`` on a short composite Gauss rule whose lower end adapts to
  the target-source distance, which resolves the ``1/sigma`` and Gaussian
  concentration of the kernel as ``tau -> t``;
* temporally close and spatially close panels (panel offset <= 2): the
  ``theta`` rule is dyadically graded toward the point of the panel closest
  to the target, which resolves the logarithmic spatial singularity left
  after time integration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .geometry import TWO_PI, BoundarySample, TubeGeometry


class ConfigError(ValueError):
    """Invalid discretisation or quadrature parameters."""


def gauss01(q: int):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


def graded01(levels: int, q: int):
    """Composite Gauss rule on [0, 1] with pieces halving toward 0."""
    x, w = gauss01(q)
    nodes, weights = [], []
    for k in range(levels):
        lo, hi = 2.0 ** (-k - 1), 2.0 ** (-k)
        nodes.append(lo + (hi - lo) * x)
        weights.append((hi - lo) * w)
    hi = 2.0 ** (-levels)
    nodes.append(hi * x)
    weights.append(hi * w)
    return np.concatenate(nodes), np.concatenate(weights)


@dataclass(frozen=True)
class QuadratureOptions:
    # graded theta rule: dyadic levels on the panel holding the target angle / on neighbours
    centre_levels: int = 10
    side_levels: int = 4
    graded_q: int = 6
    # log-sigma rule: breakpoints (in z) above the adaptive lower end, Gauss nodes per piece
    z_breaks: tuple = (2.0, 4.0, 6.0, 8.0)
    z_q: int = 8
    z_tail: float = 4.0
    # lower cut-off sigma_min = r0^2 / cutoff_ratio  (exp(-cutoff_ratio/4) is negligible)
    cutoff_ratio: float = 160.0
    # half-width of the near band in panels
    near_panels: int = 2

    def __post_init__(self):
        if min(self.centre_levels, self.side_levels) < 1 or self.graded_q < 2 or self.z_q < 2:
            raise ConfigError("graded levels must be >= 1 and Gauss orders >= 2")
        if not (self.z_tail > 0 and self.cutoff_ratio > 0) or self.near_panels < 0:
            raise ConfigError("z_tail and cutoff_ratio must be positive, near_panels non-negative")
        if any(b <= 0 for b in self.z_breaks) or list(self.z_breaks) != sorted(self.z_breaks):
            raise ConfigError("z_breaks must be positive and increasing")


DEFAULT_OPTIONS = QuadratureOptions()
# tensor Gauss order of the regular (separated) rule in tau and theta
DEFAULT_ORDER = 6


@dataclass
class SpaceTimeMesh:
    geom: TubeGeometry
    M: int
    N: int
    q_t: int = DEFAULT_ORDER
    q_s: int = DEFAULT_ORDER
    options: QuadratureOptions = field(default_factory=QuadratureOptions)

    def __post_init__(self):
        if int(self.M) != self.M or int(self.N) != self.N or self.M < 4 or self.N < 4:
            raise ConfigError("M and N must be integers >= 4")
        if self.q_t < 2 or self.q_s < 2:
            raise ConfigError("q_t and q_s must be >= 2")
        self.M, self.N = int(self.M), int(self.N)

    # -- basic layout -------------------------------------------------------

    @property
    def T(self) -> float:
        return self.geom.horizon

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def h(self) -> float:
        return TWO_PI / self.N

    @property
    def size(self) -> int:
        return self.M * self.N

    @cached_property
    def t_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    @cached_property
    def theta_edges(self) -> np.ndarray:
        return np.linspace(0.0, TWO_PI, self.N + 1)

    @cached_property
    def t_mid(self) -> np.ndarray:
        return 0.5 * (self.t_edges[:-1] + self.t_edges[1:])

    @cached_property
    def theta_mid(self) -> np.ndarray:
        return 0.5 * (self.theta_edges[:-1] + self.theta_edges[1:])

    @cached_property
    def collocation(self) -> BoundarySample:
        """Slab-major collocation samples (all panels of slab 0, then slab 1, ...)."""
        tt = np.repeat(self.t_mid, self.N)
        th = np.tile(self.theta_mid, self.M)
        return self.geom.samples(tt, th)

    def slab_samples(self, i: int) -> BoundarySample:
        return self.collocation[slice(i * self.N, (i + 1) * self.N)]

    def index(self, slab: int, panel: int) -> int:
        return slab * self.N + panel

    # -- tensor rules ------------------------------------------------------

    @cached_property
    def panel_quads(self):
        """Reference Gauss rules (nodes, weights on [0, 1]) for theta and tau."""
        return {"theta": gauss01(self.q_s), "tau": gauss01(self.q_t)}

    @cached_property
    def far_sources(self):
        """Tensor Gauss nodes of every slab/panel: arrays shaped (M, N, q_t*q_s)."""
        xs, ws = gauss01(self.q_s)
        xt, wt = gauss01(self.q_t)
        tau = self.t_edges[:-1, None, None, None] + self.dt * xt[None, None, :, None]
        th = self.theta_edges[:-1][None, :, None, None] + self.h * xs[None, None, None, :]
        tau, th = np.broadcast_arrays(tau, th)
        s = self.geom.samples(tau, th)
        w = (self.dt * wt)[None, None, :, None] * (self.h * ws)[None, None, None, :] * s.jac
        shape = (self.M, self.N, self.q_t * self.q_s)
        return {
            "tau": s.t.reshape(shape),
            "x": s.x.reshape(shape + (2,)),
            "n": s.n.reshape(shape + (2,)),
            "vn": s.vn.reshape(shape),
            "w": w.reshape(shape),
        }

    def boundary_measure(self) -> float:
        s = self.far_sources
        return float(np.sum(s["w"]))


def build_mesh(geom: TubeGeometry, M: int, N: int, q_t: int = DEFAULT_ORDER, q_s: int = DEFAULT_ORDER,
               **opts) -> SpaceTimeMesh:
    try:
        options = QuadratureOptions(**opts)
    except TypeError as exc:
        raise ConfigError(f"unknown quadrature option: {exc}") from None
    return SpaceTimeMesh(geom, M, N, q_t, q_s, options)


# ---------------------------------------------------------------------------
# panel integration engine
# ---------------------------------------------------------------------------


def _ncomp(name: str) -> int:
    return 2 if name.endswith("_grad") else 1


def _reduce(vals, weights, axes):
    """Sum kernel values times weights over ``axes``; handles gradient components."""
    out = []
    for v in vals:
        if v.ndim == weights.ndim + 1:
            out.append(np.sum(v * weights[..., None], axis=axes))
        else:
            out.append(np.sum(v * weights, axis=axes))
    return out


class _Targets:
    __slots__ = ("X", "TN", "TV", "theta_c", "near")

    def __init__(self, X, TN, TV, theta_c, near):
        self.X, self.TN, self.TV, self.theta_c, self.near = X, TN, TV, theta_c, near

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return _Targets(pick(self.X), pick(self.TN), pick(self.TV), self.theta_c[idx], self.near[idx])


def _z_nodes(opts: QuadratureOptions, r0, sigma_lo: float, sigma_hi: float):
    """Nodes/weights in sigma for the log rule; broadcast over the shape of r0.

    Pieces start at the adaptive lower end, follow ``opts.z_breaks`` and then
    split the remaining range into equal pieces no wider than ``opts.z_tail``.
    """
    zq, zw = gauss01(opts.z_q)
    floor = sigma_hi * 1e-16
    s_lo = np.maximum(np.maximum(r0**2 / opts.cutoff_ratio, sigma_lo), floor)
    za = np.log(np.minimum(s_lo, sigma_hi))
    zb = np.log(sigma_hi)
    bps = [za] + [np.minimum(za + b, zb) for b in opts.z_breaks]
    tail = zb - bps[-1]
    n_tail = max(1, int(np.ceil(np.max(tail, initial=0.0) / opts.z_tail)))
    bps += [bps[-1] + tail * (k / n_tail) for k in range(1, n_tail)] + [np.broadcast_to(zb, za.shape)]
    nodes, weights = [], []
    for lo, hi in zip(bps[:-1], bps[1:]):
        span = (hi - lo)[..., None]
        z = lo[..., None] + span * zq
        sig = np.exp(z)
        nodes.append(sig)
        weights.append(span * zw * sig)
    return np.concatenate(nodes, axis=-1), np.concatenate(weights, axis=-1)


def _eval_nodes(mesh, names, t, tg: _Targets, sig, th, wgt, sum_axes):
    """Evaluate kernels at source nodes (t - sig, th) for each target.

    ``sig``, ``th`` and ``wgt`` carry a leading target axis; target arrays are
    broadcast over the remaining axes.
    """
    s = mesh.geom.samples(t - sig, th)
    extra = sig.ndim - 1
    shp = (slice(None),) + (None,) * extra
    X = tg.X[shp]
    TN = None if tg.TN is None else tg.TN[shp]
    TV = None if tg.TV is None else tg.TV[(slice(None),) + (None,) * extra]
    vals = kernels.evaluate(names, sig, X, s.x, s.n, s.vn, TN, TV)
    return _reduce(vals, wgt * s.jac, sum_axes)


def _near_slab(mesh, names, t, tg: _Targets, j: int, out):
    """Accumulate slab ``j`` (temporally close to ``t``) into ``out[c][:, j, :]``."""
    opts = mesh.options
    N, h = mesh.N, mesh.h
    t0, t1 = mesh.t_edges[j], mesh.t_edges[j + 1]
    s_lo, s_hi = max(t - t1, 0.0), t - t0
    n = tg.X.shape[0]

    # plain Gauss in theta for every panel
    xs, ws = gauss01(mesh.q_s)
    th = (mesh.theta_edges[:-1, None] + h * xs[None, :]).ravel()  # (N*q_s,)
    y0 = mesh.geom.positions(np.full(th.shape, t), th)
    r0 = np.hypot(tg.X[:, None, 0] - y0[None, :, 0], tg.X[:, None, 1] - y0[None, :, 1])
    sig, wz = _z_nodes(opts, r0, s_lo, s_hi)  # (n, N*q_s, nz)
    thb = np.broadcast_to(th[None, :, None], sig.shape)
    wgt = wz * np.tile(h * ws, N)[None, :, None]
    vals = _eval_nodes(mesh, names, t, tg, sig, thb, wgt, sum_axes=2)
    for c, v in enumerate(vals):
        v = v.reshape((n, N, mesh.q_s) + v.shape[2:]).sum(axis=2)
        out[c][:, j] = v

    near_idx = np.nonzero(tg.near)[0]
    if near_idx.size == 0:
        return
    sub = tg.take(near_idx)
    pc = np.floor(sub.theta_c / h).astype(int) % N
    offsets = sorted({((k + N // 2) % N) - N // 2 for k in range(-opts.near_panels, opts.near_panels + 1)})

    for off in offsets:
        panel = (pc + off) % N
        a = mesh.theta_edges[panel]
        # theta_c unwrapped next to this panel
        tc = sub.theta_c + TWO_PI * np.round((a + 0.5 * h - sub.theta_c - off * h) / TWO_PI)
        if off == 0:
            gx, gw = graded01(opts.centre_levels, opts.graded_q)
            p = np.clip(tc, a, a + h)
            left, right = p - a, a + h - p
            thn = np.concatenate([p[:, None] - left[:, None] * gx, p[:, None] + right[:, None] * gx], 1)
            wth = np.concatenate([left[:, None] * gw, right[:, None] * gw], 1)
        else:
            gx, gw = graded01(opts.side_levels, opts.graded_q)
            if off > 0:
                thn = a[:, None] + h * gx[None, :]
            else:
                thn = (a + h)[:, None] - h * gx[None, :]
            wth = np.broadcast_to(h * gw, thn.shape)
        y0 = mesh.geom.positions(np.full(thn.shape, t), thn)
        r0 = np.hypot(sub.X[:, None, 0] - y0[..., 0], sub.X[:, None, 1] - y0[..., 1])
        sig, wz = _z_nodes(opts, r0, s_lo, s_hi)
        thb = np.broadcast_to(thn[..., None], sig.shape)
        vals = _eval_nodes(mesh, names, t, sub, sig, thb, wz * wth[..., None], sum_axes=(1, 2))
        for c, v in enumerate(vals):
            out[c][near_idx, j, panel] = v


def _far_slabs(mesh, names, t, tg: _Targets, slabs, out, chunk_nodes: int = 2_000_000):
    src = mesh.far_sources
    n = tg.X.shape[0]
    per_slab = mesh.N * mesh.q_t * mesh.q_s
    step = max(1, chunk_nodes // max(1, n * per_slab))
    for k in range(0, len(slabs), step):
        js = slabs[k : k + step]
        sig = t - src["tau"][js]  # (m, N, q)
        X = tg.X[:, None, None, None, :]
        TN = None if tg.TN is None else tg.TN[:, None, None, None, :]
        TV = None if tg.TV is None else tg.TV[:, None, None, None]
        vals = kernels.evaluate(
            names, sig[None], X, src["x"][js][None], src["n"][js][None], src["vn"][js][None], TN, TV
        )
        red = _reduce(vals, src["w"][js][None], axes=3)
        for c, v in enumerate(red):
            out[c][:, js] = v


def integrate_rows(mesh: SpaceTimeMesh, names, t: float, X, TN=None, TV=None, theta_c=None, near=None,
                   slabs=None):
    """Panel integrals of the named kernels for targets sharing the time ``t``.

    Returns one array per name shaped (n_targets, M, N) (gradient kernels add a
    trailing axis of length 2).  Slabs starting at or after ``t`` are zero.
    ``theta_c`` is the reference angle of the boundary point closest to each
    target and ``near`` flags targets that need the graded rule.
    """
    X = np.atleast_2d(np.asarray(X, float))
    n = X.shape[0]
    if theta_c is None:
        theta_c = np.zeros(n)
    if near is None:
        near = np.zeros(n, bool)
    tg = _Targets(X, None if TN is None else np.asarray(TN, float), None if TV is None else np.asarray(TV, float),
                  np.asarray(theta_c, float), np.asarray(near, bool))
    out = [np.zeros((n, mesh.M, mesh.N) + ((2,) if _ncomp(nm) == 2 else ())) for nm in names]
    active = [j for j in range(mesh.M) if mesh.t_edges[j] < t] if slabs is None else list(slabs)
    close = [j for j in active if t - mesh.t_edges[j + 1] < mesh.dt * (1 - 1e-9)]
    far = [j for j in active if j not in close]
    if far:
        _far_slabs(mesh, names, t, tg, far, out)
    for j in close:
        _near_slab(mesh, names, t, tg, j, out)
    return out


TRACED = {
    "single": "V",
    "double": "K",
    "adjoint": "Kp",
}


def panel_integral(kernel: str, target: BoundarySample, slab: int, panel: int, mesh: SpaceTimeMesh) -> float:
    """Integral of a traced kernel over one space-time panel for a boundary target.

    ``kernel`` is ``single``, ``double`` or ``adjoint`` (or the internal names
    ``V``, ``K``, ``Kp``).
    """
    name = TRACED.get(kernel, kernel)
    t = float(target.t)
    if mesh.t_edges[slab] >= t:
        return 0.0
    (row,) = integrate_rows(
        mesh, [name], t, np.asarray(target.x)[None], np.asarray(target.n)[None],
        np.atleast_1d(target.vn), theta_c=np.atleast_1d(target.theta), near=np.ones(1, bool), slabs=[slab],
    )
    return float(row[0, slab, panel])


# ---------------------------------------------------------------------------
# volume quadrature on Q_T
# ---------------------------------------------------------------------------


@dataclass
class VolumeQuadrature:
    t: np.ndarray  # (K,)
    x: np.ndarray  # (K, 2)
    weight: np.ndarray  # (K,)
    boundary: BoundarySample
    boundary_weight: np.ndarray
    final_x: np.ndarray  # nodes of Omega_T
    final_weight: np.ndarray

    @property
    def nodes(self):
        return self.t, self.x, self.weight

    def measure(self) -> float:
        return float(np.sum(self.weight))


def _disk_rule(geom: TubeGeometry, t, rho, w_rho, theta, w_theta):
    tt, rr, th = np.meshgrid(t, rho, theta, indexing="ij")
    xb, xth, _ = geom._eval(tt, th)
    c = geom.center(tt)
    rel = xb - c
    x = c + rr[..., None] * rel
    det = rr * (rel[..., 0] * xth[..., 1] - rel[..., 1] * xth[..., 0])
    w = det * w_rho[None, :, None] * w_theta[None, None, :]
    return tt, x, w


def build_volume_quadrature(geom: TubeGeometry, resolution: int) -> VolumeQuadrature:
    """Tensor Gauss grid on the reference cylinder pushed forward through kappa.

    ``resolution`` Gauss nodes in time and radius, ``2 * resolution``
    trapezoidal nodes in angle; weights carry the Jacobian determinant.
    """
    if resolution < 8:
        raise ConfigError("resolution must be >= 8")
    T = geom.horizon
    xt, wt = gauss01(resolution)
    t, wt = T * xt, T * wt
    rho, wr = gauss01(resolution)
    nth = 2 * resolution
    theta = np.arange(nth) * (TWO_PI / nth)
    wth = np.full(nth, TWO_PI / nth)
    tt, x, w = _disk_rule(geom, t, rho, wr, theta, wth)
    w = w * wt[:, None, None]
    bt, bth = np.meshgrid(t, theta, indexing="ij")
    bs = geom.samples(bt.ravel(), bth.ravel())
    bw = (wt[:, None] * wth[None, :]).ravel() * bs.jac
    _, fx, fw = _disk_rule(geom, np.array([T]), rho, wr, theta, wth)
    return VolumeQuadrature(
        t=tt.ravel(), x=x.reshape(-1, 2), weight=w.ravel(), boundary=bs, boundary_weight=bw,
        final_x=fx.reshape(-1, 2), final_weight=fw.ravel(),
    )
