"""Moving planar domains given as analytic deformations of the unit circle.

A :class:`TubeGeometry` describes ``x(t, theta) = kappa(t, xhat(theta))`` for a
closed curve ``Gamma_t``; every quantity the kernels need (outward normal,
line element, normal velocity) is evaluated in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping

import numpy as np

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    """Invalid or degenerate geometry."""


class DomainError(ValueError):
    """Evaluation outside the admissible space-time range."""


class Family(str, Enum):
    STATIONARY_CIRCLE = "stationary-circle"
    TRANSLATING_CIRCLE = "translating-circle"
    EXPANDING_CIRCLE = "expanding-circle"
    ROTATING_ELLIPSE = "rotating-ellipse"
    PERTURBED_CIRCLE = "radially-perturbed-circle"


# parameter defaults per family; anything not listed is rejected
_DEFAULTS: dict[Family, dict[str, float]] = {
    Family.STATIONARY_CIRCLE: {"R0": 1.0},
    Family.TRANSLATING_CIRCLE: {"R0": 1.0, "cx": 0.5, "cy": 0.0},
    Family.EXPANDING_CIRCLE: {"R0": 1.0, "a": 0.3},
    Family.ROTATING_ELLIPSE: {"R0": 1.0, "b": 0.6, "omega": 1.0},
    Family.PERTURBED_CIRCLE: {"R0": 1.0, "a": 0.1, "k": 3.0, "omega": np.pi},
}


class Location(str, Enum):
    INSIDE = "inside"
    OUTSIDE = "outside"
    NEAR_BOUNDARY = "near-boundary"


@dataclass(frozen=True)
class BoundarySample:
    """Point(s) on ``Sigma_T``.  Fields broadcast: scalars or equal-shape arrays."""

    t: np.ndarray
    theta: np.ndarray
    x: np.ndarray  # (..., 2)
    n: np.ndarray  # (..., 2) outward unit normal
    jac: np.ndarray  # |d x / d theta|
    vn: np.ndarray  # <V, n>

    def __len__(self) -> int:
        return int(np.size(self.t))

    def __getitem__(self, idx) -> "BoundarySample":
        return BoundarySample(
            t=np.asarray(self.t)[idx],
            theta=np.asarray(self.theta)[idx],
            x=np.asarray(self.x)[idx],
            n=np.asarray(self.n)[idx],
            jac=np.asarray(self.jac)[idx],
            vn=np.asarray(self.vn)[idx],
        )


def _rot(phi):
    c, s = np.cos(phi), np.sin(phi)
    return c, s


@dataclass(frozen=True)
class TubeGeometry:
    """Analytic family of closed curves ``Gamma_t``, ``0 <= t <= horizon``.

    ``c_kappa`` bounds the first and second derivatives of ``kappa`` on the
    reference curve; construction fails if a family violates it or if the
    deformation folds (non-positive Jacobian determinant).
    """

    kind: Family
    params: Mapping[str, float] = field(default_factory=dict)
    horizon: float = 1.0
    c_kappa: float = 100.0

    def __post_init__(self):
        kind = Family(self.kind)
        object.__setattr__(self, "kind", kind)
        merged = dict(_DEFAULTS[kind])
        params = dict(self.params)
        if "c" in params and kind is Family.TRANSLATING_CIRCLE:
            # scalar speed along the first axis
            params.setdefault("cx", params.pop("c"))
            params.setdefault("cy", 0.0)
        unknown = set(params) - set(merged)
        if unknown:
            raise GeometryError(f"unknown parameters for {kind.value}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in params.items()})
        object.__setattr__(self, "params", MappingProxyType(merged))
        if not self.horizon > 0:
            raise GeometryError("horizon T must be positive")
        if merged["R0"] <= 0:
            raise GeometryError("R0 must be positive")
        self._validate()

    # -- closed forms -------------------------------------------------------

    @property
    def R0(self) -> float:
        return self.params["R0"]

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * self.horizon
        if np.any(t < -tol) or np.any(t > self.horizon + tol):
            raise DomainError(f"time outside [0, {self.horizon}]")
        return t

    def center(self, t):
        """Image of the reference-disk centre, shape (..., 2)."""
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind is Family.TRANSLATING_CIRCLE:
            return np.stack(np.broadcast_arrays(p["cx"] * t, p["cy"] * t), axis=-1)
        return np.zeros(t.shape + (2,))

    def _eval(self, t, theta):
        """Return x, x_theta, x_t (each (..., 2)) without range checks."""
        t, theta = np.broadcast_arrays(np.asarray(t, float), np.asarray(theta, float))
        p = self.params
        c, s = np.cos(theta), np.sin(theta)
        R0 = p["R0"]
        kind = self.kind
        if kind is Family.STATIONARY_CIRCLE:
            x = R0 * np.stack([c, s], -1)
            xth = R0 * np.stack([-s, c], -1)
            xt = np.zeros_like(x)
        elif kind is Family.TRANSLATING_CIRCLE:
            x = np.stack([R0 * c + p["cx"] * t, R0 * s + p["cy"] * t], -1)
            xth = R0 * np.stack([-s, c], -1)
            xt = np.stack(np.broadcast_arrays(p["cx"] + 0 * t, p["cy"] + 0 * t), -1)
        elif kind is Family.EXPANDING_CIRCLE:
            R = R0 + p["a"] * t
            x = np.stack([R * c, R * s], -1)
            xth = np.stack([-R * s, R * c], -1)
            xt = p["a"] * np.stack([c, s], -1)
        elif kind is Family.ROTATING_ELLIPSE:
            cw, sw = _rot(p["omega"] * t)
            ex, ey = R0 * c, p["b"] * s
            dx, dy = -R0 * s, p["b"] * c
            x = np.stack([cw * ex - sw * ey, sw * ex + cw * ey], -1)
            xth = np.stack([cw * dx - sw * dy, sw * dx + cw * dy], -1)
            xt = p["omega"] * np.stack([-x[..., 1], x[..., 0]], -1)
        else:  # PERTURBED_CIRCLE
            a, k, w = p["a"], p["k"], p["omega"]
            r = R0 * (1.0 + a * np.sin(k * theta) * np.sin(w * t))
            r_th = R0 * a * k * np.cos(k * theta) * np.sin(w * t)
            r_t = R0 * a * w * np.sin(k * theta) * np.cos(w * t)
            x = np.stack([r * c, r * s], -1)
            xth = np.stack([r_th * c - r * s, r_th * s + r * c], -1)
            xt = np.stack([r_t * c, r_t * s], -1)
        return x, xth, xt

    def _validate(self):
        tt, th = np.meshgrid(
            np.linspace(0.0, self.horizon, 33), np.linspace(0.0, TWO_PI, 129, endpoint=False)
        )
        x, xth, xt = self._eval(tt, th)
        jac = np.hypot(xth[..., 0], xth[..., 1])
        if np.min(jac) < 1e-12:
            raise GeometryError("degenerate parameterisation (vanishing tangent)")
        # star-shapedness about the centre gives det(D kappa) > 0 for the radial extension
        rel = x - self.center(tt)
        det = rel[..., 0] * xth[..., 1] - rel[..., 1] * xth[..., 0]
        if np.min(det) <= 0:
            raise GeometryError("deformation is not orientation preserving (det D kappa <= 0)")
        # a radius passing through zero keeps det > 0 but turns the section inside out;
        # the radial coordinate along the transported reference direction must stay positive
        tr, thr = np.meshgrid(np.linspace(0.0, self.horizon, 257), np.linspace(0.0, TWO_PI, 64, endpoint=False))
        xr, _, _ = self._eval(tr, thr)
        ang = thr + (self.params["omega"] * tr if self.kind is Family.ROTATING_ELLIPSE else 0.0)
        radial = np.einsum("...i,...i->...", xr - self.center(tr), np.stack([np.cos(ang), np.sin(ang)], -1))
        if np.min(radial) <= 0:
            raise GeometryError("section collapses: radius reaches zero inside [0, T]")
        # second derivatives by differencing the analytic first derivatives
        e = 1e-5
        _, xth_p, xt_p = self._eval(tt, th + e)
        _, xth_m, xt_m = self._eval(tt, th - e)
        second = [(xth_p - xth_m) / (2 * e), (xt_p - xt_m) / (2 * e)]
        _, _, xt_tp = self._eval(tt + e, th)
        _, _, xt_tm = self._eval(tt - e, th)
        second.append((xt_tp - xt_tm) / (2 * e))
        bound = max(np.max(np.abs(a)) for a in [x, xth, xt, *second])
        if bound > self.c_kappa:
            raise GeometryError(f"derivative bound {bound:.3g} exceeds C_kappa={self.c_kappa}")

    # -- public evaluation --------------------------------------------------

    def positions(self, t, theta):
        """Vectorised ``kappa(t, xhat(theta))`` without range checks, shape (..., 2)."""
        return self._eval(t, theta)[0]

    def samples(self, t, theta) -> BoundarySample:
        """Vectorised boundary samples (no range or degeneracy checks)."""
        t, theta = np.broadcast_arrays(np.asarray(t, float), np.asarray(theta, float))
        x, xth, xt = self._eval(t, theta)
        jac = np.hypot(xth[..., 0], xth[..., 1])
        n = np.stack([xth[..., 1], -xth[..., 0]], -1) / jac[..., None]
        vn = np.einsum("...i,...i->...", xt, n)
        return BoundarySample(t=t, theta=theta, x=x, n=n, jac=jac, vn=vn)

    def area(self, t):
        """Closed-form |Omega_t| for the built-in families."""
        t = np.asarray(t, dtype=float)
        p = self.params
        R0 = p["R0"]
        if self.kind in (Family.STATIONARY_CIRCLE, Family.TRANSLATING_CIRCLE):
            return np.pi * R0**2 + 0 * t
        if self.kind is Family.EXPANDING_CIRCLE:
            return np.pi * (R0 + p["a"] * t) ** 2
        if self.kind is Family.ROTATING_ELLIPSE:
            return np.pi * R0 * p["b"] + 0 * t
        # 1/2 int r^2 dtheta with r = R0 (1 + a sin(k th) sin(w t)), integer k
        s = p["a"] * np.sin(p["omega"] * t)
        return np.pi * R0**2 * (1.0 + 0.5 * s**2)

    def polygon(self, t: float, n: int = 4096) -> np.ndarray:
        th = np.linspace(0.0, TWO_PI, n, endpoint=False)
        return self.positions(np.full(n, float(t)), th)


def boundary_point(geom: TubeGeometry, t: float, theta: float) -> np.ndarray:
    """``kappa(t, xhat(theta))`` for a single point."""
    t = float(geom._check_time(t))
    return geom.positions(t, theta)


def boundary_sample(geom: TubeGeometry, t, theta) -> BoundarySample:
    t = geom._check_time(t)
    _, xth, _ = geom._eval(t, theta)
    if np.any(np.hypot(xth[..., 0], xth[..., 1]) < 1e-12):
        raise GeometryError("degenerate tangent")
    return geom.samples(t, theta)


def space_time_normal(sample: BoundarySample) -> np.ndarray:
    """Unit normal of ``Sigma_T`` in (time, space) ordering: (v_nu, n) / sqrt(1 + v_nu^2)."""
    v_nu = -np.asarray(sample.vn, dtype=float)
    n = np.asarray(sample.n, dtype=float)
    scale = 1.0 / np.sqrt(1.0 + v_nu**2)
    return np.concatenate([(v_nu * scale)[..., None], n * scale[..., None]], axis=-1)


def winding_number(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Winding number of a closed polygon (vertices in order) around each point."""
    pts = np.atleast_2d(pts)
    a = poly[None, :, :] - pts[:, None, :]
    b = np.roll(poly, -1, axis=0)[None, :, :] - pts[:, None, :]
    upward = (a[..., 1] <= 0) & (b[..., 1] > 0)
    downward = (a[..., 1] > 0) & (b[..., 1] <= 0)
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    wn = np.sum(upward & (cross > 0), axis=1) - np.sum(downward & (cross < 0), axis=1)
    return wn


def distance_to_polygon(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    a = poly
    d = np.roll(poly, -1, axis=0) - a
    ap = pts[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("pki,ki->pk", ap, d) / np.einsum("ki,ki->k", d, d), 0.0, 1.0)
    diff = ap - s[..., None] * d[None]
    return np.min(np.hypot(diff[..., 0], diff[..., 1]), axis=1)


def classify_points(geom: TubeGeometry, t: float, pts, band: float | None = None):
    """Vectorised :func:`classify_point`; returns an array of :class:`Location` values."""
    t = float(geom._check_time(t))
    band = 1e-3 * geom.R0 if band is None else band
    poly = geom.polygon(t)
    pts = np.atleast_2d(np.asarray(pts, float))
    wn = winding_number(poly, pts)
    dist = distance_to_polygon(poly, pts)
    out = np.where(wn != 0, Location.INSIDE.value, Location.OUTSIDE.value).astype(object)
    out[dist < band] = Location.NEAR_BOUNDARY.value
    return np.array([Location(v) for v in out], dtype=object)


def classify_point(geom: TubeGeometry, t: float, x, band: float | None = None) -> Location:
    return classify_points(geom, t, np.asarray(x, float)[None, :], band)[0]
