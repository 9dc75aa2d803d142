"""Admissible averaging functions for the mass on graph edges.

A mean ``theta(s, t)`` is concave, symmetric and 1-homogeneous, so all of
its information sits on a single ray.  Internally every mean is described
by scalar kernels of the log-ratio ``u = log(s / t)``:

``ray_value(u)``
    ``theta(exp(u/2), exp(-u/2))``
``d1(u)``
    ``d theta / d s`` at any point with ratio ``s / t = exp(u)``
``d1_prime(u)``
    derivative of ``d1`` with respect to ``u``

The second partial follows from symmetry, ``d2(u) = d1(-u)``.  These
kernels are numba-compiled so the edgewise projections can call them in
tight loops.  A new mean is added by providing the three kernels, a direct
two-argument evaluator, a superdifferential test at the origin and the
limit of the partial derivative towards the coordinate axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

__all__ = [
    "MeanKind",
    "LOG",
    "GEO",
    "get_mean",
    "theta",
    "theta_array",
    "theta_partials",
    "boundary_partial_limit",
    "in_superdifferential_at_origin",
    "SurfacePoint",
    "surface_point",
]

# |u| below which the logarithmic mean is evaluated by its Taylor series
DIAGONAL_GUARD = 1e-4
# the derivative of d1 loses three orders more to cancellation
_DERIV_GUARD = 1e-2

NEWTON_TOL = 1e-12
NEWTON_MAXIT = 100


# ---------------------------------------------------------------------------
# logarithmic mean
# ---------------------------------------------------------------------------

@njit(cache=True)
def _log_ray_value(u):
    if abs(u) < DIAGONAL_GUARD:
        u2 = u * u
        return 1.0 + u2 / 24.0 + u2 * u2 / 1920.0
    return math.sinh(0.5 * u) / (0.5 * u)


@njit(cache=True)
def _log_d1(u):
    if abs(u) < DIAGONAL_GUARD:
        return 0.5 - u / 6.0 + u * u / 24.0 - u ** 3 / 120.0 + u ** 4 / 720.0
    return (u + math.expm1(-u)) / (u * u)


@njit(cache=True)
def _log_d1_prime(u):
    if abs(u) < _DERIV_GUARD:
        return (-1.0 / 6.0 + u / 12.0 - u * u / 40.0 + u ** 3 / 180.0
                - u ** 4 / 1008.0)
    return (2.0 - u - (u + 2.0) * math.exp(-u)) / (u * u * u)


@njit(cache=True)
def _log_theta(s, t):
    if s < 0.0 or t < 0.0:
        return -np.inf
    if s == 0.0 or t == 0.0:
        return 0.0
    u = math.log(s) - math.log(t)
    if abs(u) < DIAGONAL_GUARD:
        return math.sqrt(s * t) * _log_ray_value(u)
    return (s - t) / u


# ---------------------------------------------------------------------------
# geometric mean
# ---------------------------------------------------------------------------

@njit(cache=True)
def _geo_ray_value(u):
    return 1.0


@njit(cache=True)
def _geo_d1(u):
    return 0.5 * math.exp(-0.5 * u)


@njit(cache=True)
def _geo_d1_prime(u):
    return -0.25 * math.exp(-0.5 * u)


@njit(cache=True)
def _geo_theta(s, t):
    if s < 0.0 or t < 0.0:
        return -np.inf
    return math.sqrt(s * t)


@njit(cache=True)
def _geo_superdiff(z1, z2):
    return min(z1, z2) > 0.0 and z1 * z2 >= 0.25


# ---------------------------------------------------------------------------
# superdifferential at the origin, Newton-based (any mean with d1 -> inf)
# ---------------------------------------------------------------------------

@njit
def _solve_d1(d1, d1_prime, z):
    """Return ``u <= 0`` with ``d1(u) = z`` for ``z >= d1(0)``.

    Safeguarded Newton: the bracket ``[lo, 0]`` is grown geometrically and
    every Newton step leaving it is replaced by bisection.
    """
    hi = 0.0
    lo = -1.0
    while d1(lo) < z and lo > -1400.0:
        lo *= 2.0
    u = 0.0
    for _ in range(NEWTON_MAXIT):
        r = d1(u) - z
        if abs(r) <= NEWTON_TOL * max(1.0, z):
            return u
        if r > 0.0:
            lo = u
        else:
            hi = u
        dr = d1_prime(u)
        step_ok = False
        if dr != 0.0:
            un = u - r / dr
            if lo < un < hi:
                step_ok = True
                u = un
        if not step_ok:
            u = 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, abs(u)):
            return u
    return u


@njit
def _log_superdiff(z1, z2):
    if min(z1, z2) <= 0.0:
        return False
    if max(z1, z2) < 0.5:
        return False
    if z1 < z2:
        z1, z2 = z2, z1
    u = _solve_d1(_log_d1, _log_d1_prime, z1)
    # d2(u) = d1(-u)
    return z2 >= _log_d1(-u)


# ---------------------------------------------------------------------------
# public description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanKind:
    """An admissible mean given by compiled scalar kernels.

    ``axis_limit`` is ``lim_{z -> 0} d theta / d t (s, z)``; by
    0-homogeneity of the gradient it does not depend on ``s``.
    """

    name: str
    theta_st: Callable
    ray_value: Callable
    d1: Callable
    d1_prime: Callable
    superdiff: Callable
    axis_limit: float = math.inf

    def __repr__(self) -> str:
        return f"MeanKind({self.name!r})"


LOG = MeanKind("log", _log_theta, _log_ray_value, _log_d1, _log_d1_prime,
               _log_superdiff)
GEO = MeanKind("geo", _geo_theta, _geo_ray_value, _geo_d1, _geo_d1_prime,
               _geo_superdiff)

_REGISTRY = {"log": LOG, "logarithmic": LOG, "geo": GEO, "geometric": GEO}


def get_mean(kind) -> MeanKind:
    """Resolve ``"log"``/``"geo"`` (or a :class:`MeanKind`) to a mean."""
    if isinstance(kind, MeanKind):
        return kind
    try:
        return _REGISTRY[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown mean {kind!r}; expected 'log' or 'geo'") from None


@njit
def _theta_field(theta_st, s, t, out):
    for k in range(s.size):
        out[k] = theta_st(s[k], t[k])


def theta_array(kind, s, t) -> np.ndarray:
    """Elementwise mean with ``-inf`` wherever an argument is negative."""
    mean = get_mean(kind)
    s_b, t_b = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    s_c = np.ascontiguousarray(s_b).reshape(-1)
    t_c = np.ascontiguousarray(t_b).reshape(-1)
    out = np.empty(s_c.size)
    _theta_field(mean.theta_st, s_c, t_c, out)
    return out.reshape(s_b.shape)


def theta(kind, s, t):
    """Evaluate the mean; raises ``ValueError`` on negative arguments."""
    s_arr = np.asarray(s, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(s_arr < 0) or np.any(t_arr < 0):
        raise ValueError("mean is only defined for nonnegative arguments")
    out = theta_array(kind, s_arr, t_arr)
    return float(out) if out.ndim == 0 else out


def theta_partials(kind, s: float, t: float) -> tuple[float, float]:
    """Return ``(d theta/d s, d theta/d t)`` at a point with ``s, t > 0``."""
    mean = get_mean(kind)
    if s <= 0 or t <= 0:
        raise ValueError("partials require strictly positive arguments")
    u = math.log(s) - math.log(t)
    return float(mean.d1(u)), float(mean.d1(-u))


def boundary_partial_limit(kind, s: float) -> float:
    """Limit of ``d theta/d t (s, t)`` as ``t`` decreases to zero."""
    if s <= 0:
        raise ValueError("s must be positive")
    return float(get_mean(kind).axis_limit)


def in_superdifferential_at_origin(kind, z) -> bool:
    """Whether the plane with slopes ``z`` dominates the mean on the quadrant."""
    z1, z2 = (float(v) for v in z)
    return bool(get_mean(kind).superdiff(z1, z2))


@dataclass(frozen=True)
class SurfacePoint:
    q: float
    w: np.ndarray
    n: np.ndarray


def surface_point(kind, q: float) -> SurfacePoint:
    """Point ``w(q)`` on the graph of the mean and its outward normal ``n(q)``."""
    if q <= 0:
        raise ValueError("q must be positive")
    mean = get_mean(kind)
    u = math.log(q)
    w = np.array([math.sqrt(q), 1.0 / math.sqrt(q), mean.ray_value(u)])
    n = np.array([-mean.d1(u), -mean.d1(-u), 1.0])
    return SurfacePoint(q, w, n)
