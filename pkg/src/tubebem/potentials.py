"""Single and double layer heat potentials off the boundary."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .geometry import DomainError, Location, TWO_PI, classify_points, distance_to_polygon
from .quadrature import SpaceTimeMesh, integrate_rows

# relative distance (in units of R0) below which evaluations are flagged
NEAR_BAND = 1e-3


class Evaluation(NamedTuple):
    value: float
    near_boundary: bool


class CauchyPair(NamedTuple):
    """Dirichlet data ``w`` and interior Neumann data ``psi`` as panel values."""

    w: np.ndarray
    psi: np.ndarray


def _closest(mesh: SpaceTimeMesh, t: float, X: np.ndarray, n: int = 4096):
    theta = np.arange(n) * (TWO_PI / n)
    poly = mesh.geom.positions(np.full(n, t), theta)
    d2 = (X[:, None, 0] - poly[None, :, 0]) ** 2 + (X[:, None, 1] - poly[None, :, 1]) ** 2
    k = np.argmin(d2, axis=1)
    return theta[k], distance_to_polygon(poly, X)


def potential_rows(mesh: SpaceTimeMesh, names, t0: float, X):
    """Panel-integral rows (n, M, N) of the named kernels at points ``X`` and time ``t0``.

    Also returns the distance of each point to ``Gamma_t0``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    if t0 <= 0:
        return [np.zeros((X.shape[0], mesh.M, mesh.N)) for _ in names], np.full(X.shape[0], np.inf)
    theta_c, dist = _closest(mesh, t0, X)
    jmax = float(np.max(mesh.collocation.jac))
    near = dist < (mesh.options.near_panels + 1) * mesh.h * jmax
    rows = integrate_rows(mesh, list(names), float(t0), X, theta_c=theta_c, near=near)
    return rows, dist


def near_boundary(mesh: SpaceTimeMesh, t0: float, X) -> np.ndarray:
    """Flags points closer than ``1e-3 R0`` to ``Gamma_t0``, where values are unreliable."""
    X = np.atleast_2d(np.asarray(X, float))
    return _closest(mesh, t0, X)[1] < NEAR_BAND * mesh.geom.R0


def _evaluate(mesh, name, density, t0, X):
    density = np.asarray(density, float).reshape(mesh.M, mesh.N)
    (rows,), dist = potential_rows(mesh, [name], t0, X)
    return np.einsum("pmn,mn->p", rows, density), dist < NEAR_BAND * mesh.geom.R0


def single_layer_values(mesh, psi, t0: float, X):
    """Vectorised single layer potential; returns (values, near_boundary flags)."""
    return _evaluate(mesh, "V", psi, t0, X)


def double_layer_values(mesh, w, t0: float, X):
    return _evaluate(mesh, "K", w, t0, X)


def eval_single_layer(mesh, psi, t0: float, x0) -> Evaluation:
    v, flag = single_layer_values(mesh, psi, t0, np.asarray(x0, float)[None])
    return Evaluation(float(v[0]), bool(flag[0]))


def eval_double_layer(mesh, w, t0: float, x0) -> Evaluation:
    v, flag = double_layer_values(mesh, w, t0, np.asarray(x0, float)[None])
    return Evaluation(float(v[0]), bool(flag[0]))


def representation_values(mesh, pair: CauchyPair, t0: float, X, check: bool = True):
    """``V~ psi - K~ w`` at interior points sharing the time ``t0``."""
    X = np.atleast_2d(np.asarray(X, float))
    if check:
        loc = classify_points(mesh.geom, t0, X)
        if any(v is not Location.INSIDE for v in loc):
            raise DomainError("representation formula needs interior points")
    (rv, rk), _ = potential_rows(mesh, ["V", "K"], t0, X)
    psi = np.asarray(pair.psi, float).reshape(mesh.M, mesh.N)
    w = np.asarray(pair.w, float).reshape(mesh.M, mesh.N)
    return np.einsum("pmn,mn->p", rv, psi) - np.einsum("pmn,mn->p", rk, w)


def represent_interior(mesh, pair: CauchyPair, t0: float, x0) -> float:
    return float(representation_values(mesh, pair, t0, np.asarray(x0, float)[None])[0])
