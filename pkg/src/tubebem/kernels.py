"""Heat fundamental solution and the traced kernels of the layer operators.

All functions are vectorised over numpy arrays and causal: every kernel is
exactly zero when the target time does not exceed the source time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# exp(-r^2 / 4 dt) is flushed to zero below this exponent
EXP_FLOOR = -700.0


@dataclass(frozen=True)
class KernelPoint:
    t: np.ndarray
    x: np.ndarray
    n: Optional[np.ndarray] = None
    vn: Optional[np.ndarray] = None


def heat_kernel(dt, r2, d: int = 2):
    """``(4 pi dt)^(-d/2) exp(-r2 / (4 dt))`` for ``dt > 0``, zero otherwise."""
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    dt = np.asarray(dt, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    pos = dt > 0
    safe = np.where(pos, dt, 1.0)
    expo = -r2 / (4.0 * safe)
    live = pos & (expo > EXP_FLOOR)
    val = np.where(live, np.exp(np.where(live, expo, 0.0)) / (4.0 * np.pi * safe) ** (d / 2), 0.0)
    return val[()] if val.ndim == 0 else val


def _diff(target, source):
    dt = np.asarray(target.t, float) - np.asarray(source.t, float)
    dx = np.asarray(target.x, float) - np.asarray(source.x, float)
    return dt, dx


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _causal_factor(dt):
    return np.where(dt > 0, 1.0 / (2.0 * np.where(dt > 0, dt, 1.0)), 0.0)


def grad_x_heat_kernel(target, source):
    """Gradient of G in the target point, ``-(x - y) / (2 dt) G``; zero for dt <= 0."""
    dt, dx = _diff(target, source)
    g = heat_kernel(dt, _dot(dx, dx))
    return -(dx * (_causal_factor(dt) * g)[..., None])


def grad_y_heat_kernel(target, source):
    return -grad_x_heat_kernel(target, source)


def neumann_minus(value, gradient, sample):
    """Interior conormal trace ``du/dn + 1/2 <V, n> u``."""
    return _dot(np.asarray(gradient, float), np.asarray(sample.n, float)) + 0.5 * np.asarray(
        sample.vn, float
    ) * np.asarray(value, float)


def neumann_plus(value, gradient, sample):
    """Backward conormal trace ``du/dn - 1/2 <V, n> u``."""
    return _dot(np.asarray(gradient, float), np.asarray(sample.n, float)) - 0.5 * np.asarray(
        sample.vn, float
    ) * np.asarray(value, float)


def single_layer_kernel(target, source):
    dt, dx = _diff(target, source)
    return heat_kernel(dt, _dot(dx, dx))


def double_layer_kernel(target, source):
    """``gamma_1^+`` of G taken in the source variables (tau, y)."""
    dt, dx = _diff(target, source)
    g = heat_kernel(dt, _dot(dx, dx))
    return (_dot(dx, source.n) * _causal_factor(dt) - 0.5 * np.asarray(source.vn, float)) * g


def adjoint_double_layer_kernel(target, source):
    """``gamma_1^-`` of G taken in the target variables (t, x)."""
    dt, dx = _diff(target, source)
    g = heat_kernel(dt, _dot(dx, dx))
    return (-_dot(dx, target.n) * _causal_factor(dt) + 0.5 * np.asarray(target.vn, float)) * g


# -- stacked evaluation used by the quadrature engine ------------------------

# names understood by :func:`evaluate`
KERNELS = ("V", "K", "Kp", "V_grad", "K_grad", "K_static")


def evaluate(names, sigma, X, Y, YN, YV, TN=None, TV=None):
    """Evaluate several kernels on shared nodes.

    ``sigma = t - tau > 0`` everywhere (callers never pass non-causal nodes),
    ``X``/``Y`` are (..., 2) target/source positions.  Returns a list with one
    array per name; gradient kernels return (..., 2).
    ``K_static`` is the double layer kernel with the velocity term dropped.
    """
    dx = X - Y
    r2 = dx[..., 0] ** 2 + dx[..., 1] ** 2
    inv2s = 0.5 / sigma
    expo = -r2 * (0.5 * inv2s)
    g = np.where(expo > EXP_FLOOR, np.exp(np.maximum(expo, EXP_FLOOR)), 0.0) * (
        inv2s / (2.0 * np.pi)
    )
    out = []
    dn_y = None
    for name in names:
        if name == "V":
            out.append(g)
        elif name in ("K", "K_static", "K_grad"):
            if dn_y is None:
                dn_y = (dx[..., 0] * YN[..., 0] + dx[..., 1] * YN[..., 1]) * inv2s
            if name == "K":
                out.append((dn_y - 0.5 * YV) * g)
            elif name == "K_static":
                out.append(dn_y * g)
            else:
                # grad_x of [<x-y, n_y>/(2s) - vn_y/2] G
                fac = (dn_y - 0.5 * YV) * g
                out.append(YN * (inv2s * g)[..., None] - dx * (fac * inv2s)[..., None])
        elif name == "Kp":
            dn_x = (dx[..., 0] * TN[..., 0] + dx[..., 1] * TN[..., 1]) * inv2s
            out.append((-dn_x + 0.5 * TV) * g)
        elif name == "V_grad":
            out.append(-dx * (g * inv2s)[..., None])
        else:
            raise KeyError(name)
    return out
