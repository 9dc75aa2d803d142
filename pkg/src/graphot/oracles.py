"""Independent reference computations used to validate the solver.

Nothing in here calls the projection kernels of :mod:`graphot.prox`; the
projections are recomputed by brute force (grid search plus local
refinement, or dense KKT systems) so that agreement is meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq, minimize_scalar

from .graph import MarkovGraph
from .means import get_mean, theta_array

__all__ = [
    "TwoNodeExact",
    "two_node_distance",
    "two_node_distance_arctanh",
    "two_node_geodesic_ode",
    "ODETrajectory",
    "dense_project_B",
    "dense_project_K",
    "dense_project_ce",
    "dense_projection_oracle",
    "polar_margin_K",
    "normal_cone_residual_K",
    "normal_cone_residual_B",
    "superdiff_margin",
    "superdiff_bruteforce",
    "finite_difference_check",
]

QUAD_TOL = 1e-11


@dataclass(frozen=True)
class TwoNodeExact:
    """Densities ``rho(r)`` on the two-node graph, ``r in [-1, 1]``."""

    p: float = 1.0
    q: float = 1.0
    mean: str = "log"

    def rho(self, r):
        r = np.asarray(r, dtype=float)
        s = self.p + self.q
        return np.stack([s / self.q * (1 - r) / 2, s / self.p * (1 + r) / 2], axis=-1)

    def theta_along(self, r):
        rho = self.rho(r)
        return theta_array(self.mean, rho[..., 0], rho[..., 1])

    @property
    def prefactor(self) -> float:
        return 0.5 * math.sqrt(1.0 / self.p + 1.0 / self.q)


def _integrate_inv_sqrt(fun, a: float, b: float, tol: float) -> tuple[float, float]:
    """``int_a^b fun(r)^(-1/2) dr`` on ``[-1, 1]`` with endpoint substitutions."""
    def f(r):
        v = fun(r)
        return 1.0 / math.sqrt(v) if v > 0 else math.inf

    total = err = 0.0
    cuts = sorted({a, b, *[c for c in (-0.5, 0.5) if a < c < b]})
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if lo < -0.5 or (lo == -0.5 and hi <= -0.5):
            # r = -1 + s^2
            s_lo, s_hi = math.sqrt(max(lo + 1.0, 0.0)), math.sqrt(max(hi + 1.0, 0.0))
            val, e = quad(lambda s: 2 * s * f(-1 + s * s) if s > 0 else 0.0, s_lo, s_hi,
                          epsabs=tol, epsrel=tol, limit=400)
        elif hi > 0.5:
            # r = 1 - s^2
            s_lo, s_hi = math.sqrt(max(1.0 - hi, 0.0)), math.sqrt(max(1.0 - lo, 0.0))
            val, e = quad(lambda s: 2 * s * f(1 - s * s) if s > 0 else 0.0, s_lo, s_hi,
                          epsabs=tol, epsrel=tol, limit=400)
        else:
            val, e = quad(f, lo, hi, epsabs=tol, epsrel=tol, limit=400)
        total += val
        err += e
    return total, err


def two_node_distance(e: TwoNodeExact, alpha: float = -1.0, beta: float = 1.0,
                      tol: float = QUAD_TOL, return_error: bool = False):
    """``W(rho(alpha), rho(beta)) = 1/2 sqrt(1/p + 1/q) int theta(rho(r))^(-1/2) dr``."""
    if not -1.0 <= alpha <= 1.0 or not -1.0 <= beta <= 1.0:
        raise ValueError("alpha and beta must lie in [-1, 1]")
    sign = 1.0
    if beta < alpha:
        alpha, beta, sign = beta, alpha, -1.0
    if alpha == beta:
        return (0.0, 0.0) if return_error else 0.0
    mean = get_mean(e.mean)
    s = e.p + e.q

    def th(r):
        return mean.theta_st(s / e.q * (1 - r) / 2, s / e.p * (1 + r) / 2)

    val, err = _integrate_inv_sqrt(th, alpha, beta, tol)
    out = sign * e.prefactor * val
    return (abs(out), e.prefactor * err) if return_error else abs(out)


def _r_over_arctanh(r: float) -> float:
    if abs(r) < 1e-4:
        r2 = r * r
        # r / arctanh r = 1 - r^2/3 - 4 r^4/45 + ...
        return 1.0 - r2 / 3.0 - 4.0 * r2 * r2 / 45.0
    if abs(r) >= 1.0:
        return 0.0
    return r / (0.5 * math.log((1 + r) / (1 - r)))


def two_node_distance_arctanh(alpha: float = -1.0, beta: float = 1.0,
                              tol: float = QUAD_TOL) -> float:
    """Symmetric log-mean case ``p = q = 1`` via ``theta = r / arctanh r``."""
    val, _ = _integrate_inv_sqrt(_r_over_arctanh, min(alpha, beta), max(alpha, beta), tol)
    return val / math.sqrt(2.0)


@dataclass
class ODETrajectory:
    times: np.ndarray
    gamma: np.ndarray
    terminal_error: float

    def rho(self, e: TwoNodeExact) -> np.ndarray:
        """Densities along the trajectory; an Euler overshoot past ``+-1`` is cut."""
        return e.rho(np.clip(self.gamma, -1.0, 1.0))


def two_node_geodesic_ode(e: TwoNodeExact, alpha: float, beta: float,
                          n_steps: int) -> ODETrajectory:
    """Explicit Euler for ``gamma' = 2 W sqrt(pq/(p+q) theta(rho(gamma)))``.

    ``W = W(rho(alpha), rho(beta))``.  Started at a zero of ``theta`` the
    right-hand side vanishes, so the first step is taken by inverting the
    distance quadrature, ``W(rho(alpha), rho(gamma_1)) = W dt``, and Euler
    is used from there on.  ``gamma`` is stored unclipped so that
    ``terminal_error`` shows the first-order overshoot.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    times = np.linspace(0.0, 1.0, n_steps + 1)
    gamma = np.full(n_steps + 1, float(alpha))
    if alpha == beta:
        return ODETrajectory(times, gamma, 0.0)
    direction = 1.0 if beta > alpha else -1.0
    total = two_node_distance(e, alpha, beta)
    dt = 1.0 / n_steps
    mean = get_mean(e.mean)
    c = e.p * e.q / (e.p + e.q)
    s = e.p + e.q

    def speed(r):
        r = min(max(r, -1.0), 1.0)
        th = mean.theta_st(s / e.q * (1 - r) / 2, s / e.p * (1 + r) / 2)
        return 2.0 * total * math.sqrt(c * max(th, 0.0))

    g = float(alpha)
    start = 1
    if speed(g) == 0.0:
        target = total * dt
        g = brentq(lambda r: two_node_distance(e, alpha, r) - target, alpha, beta,
                   xtol=1e-15, rtol=1e-14)
        gamma[1] = g
        start = 2
    for k in range(start, n_steps + 1):
        g = g + direction * dt * speed(g)
        gamma[k] = g
    return ODETrajectory(times, gamma, abs(gamma[-1] - beta))


# ---------------------------------------------------------------------------
# dense projections
# ---------------------------------------------------------------------------

def dense_project_B(p: float, q: float, resolution: int = 4001) -> np.ndarray:
    """Grid search over the boundary parabola plus bounded refinement."""
    if p + q * q / 4.0 <= 0:
        return np.array([p, q], dtype=float)
    span = max(4.0, 2.0 * abs(q) + 2.0 * math.sqrt(max(abs(p), 0.0)) * 2)
    t = np.linspace(-span, span, resolution)
    d = (p + t * t / 4.0) ** 2 + (q - t) ** 2
    k = int(np.argmin(d))
    step = t[1] - t[0]
    res = minimize_scalar(lambda s: (p + s * s / 4.0) ** 2 + (q - s) ** 2,
                          bounds=(t[k] - step, t[k] + step), method="bounded",
                          options={"xatol": 1e-14})
    s = res.x
    return np.array([-s * s / 4.0, s])


def _top_rays(mean, us) -> np.ndarray:
    """Rows ``(e^{u/2}, e^{-u/2}, theta(e^{u/2}, e^{-u/2}))``."""
    a, b = np.exp(us / 2), np.exp(-us / 2)
    return np.stack([a, b, theta_array(mean, a, b)], axis=1)


def dense_project_K(kind, p, resolution: int = 6001, u_max: float = 300.0) -> np.ndarray:
    """Nearest point of ``{0 <= v <= theta(s, t)}`` by exhaustive search.

    Candidates are the nearest point of the bottom facet and the nearest
    point of the graph surface ``tau (e^{u/2}, e^{-u/2}, theta(...))``; the
    latter is found on a ``u`` grid with optimal ``tau >= 0`` and refined.
    """
    mean = get_mean(kind)
    p = np.asarray(p, dtype=float)
    if 0 <= p[2] <= mean.theta_st(p[0], p[1]):
        return p.copy()
    bottom = np.array([max(p[0], 0.0), max(p[1], 0.0), 0.0])
    best, best_d = bottom, float(np.sum((p - bottom) ** 2))

    def surface(u):
        w = np.array([math.exp(u / 2), math.exp(-u / 2), mean.ray_value(u)])
        tau = max(0.0, float(p @ w) / float(w @ w))
        return tau * w

    def dist(u):
        x = surface(u)
        return float(np.sum((p - x) ** 2))

    us = np.linspace(-u_max, u_max, resolution)
    W = _top_rays(mean, us)
    tau = np.maximum(0.0, W @ p / np.einsum("ij,ij->i", W, W))
    ds = np.sum((p - tau[:, None] * W) ** 2, axis=1)
    k = int(np.argmin(ds))
    step = us[1] - us[0]
    res = minimize_scalar(dist, bounds=(us[k] - step, us[k] + step), method="bounded",
                          options={"xatol": 1e-13})
    top = surface(res.x)
    d_top = dist(res.x)
    if d_top < best_d:
        best = top
    return best


def _dense_ce_system(g: MarkovGraph, N: int, free_end: bool):
    """Constraint matrix and weights for variables ``(rho_0..rho_N, m[, rho_B])``."""
    n, E = g.n, g.n_edges
    h = 1.0 / N
    n_rho = (N + 1) * n
    n_m = N * E
    size = n_rho + n_m + (n if free_end else 0)
    div = g.div_matrix.toarray()
    rows = []
    for i in range(N):
        block = np.zeros((n, size))
        block[:, (i + 1) * n:(i + 2) * n] += np.eye(n) / h
        block[:, i * n:(i + 1) * n] -= np.eye(n) / h
        block[:, n_rho + i * E:n_rho + (i + 1) * E] += div
        rows.append(block)
    pins = np.zeros((n, size))
    pins[:, :n] = np.eye(n)
    rows.append(pins)
    if free_end:
        link = np.zeros((n, size))
        link[:, N * n:(N + 1) * n] = np.eye(n)
        link[:, n_rho + n_m:] = -np.eye(n)
        rows.append(link)
    else:
        end = np.zeros((n, size))
        end[:, N * n:(N + 1) * n] = np.eye(n)
        rows.append(end)
    A = np.vstack(rows)
    w = np.concatenate([np.tile(h * g.pi, N + 1), np.tile(0.5 * h * g.edge_weight, N)]
                       + ([h * g.pi] if free_end else []))
    return A, w


def dense_project_ce(g: MarkovGraph, N: int, rho, m, rho_a, rho_b=None, rho_end=None):
    """Weighted nearest point of the continuity-equation set via a dense KKT solve.

    Fixed mode pins both ends to ``rho_a`` and ``rho_b``; free mode
    (``rho_b is None``) adds the variable ``rho_end`` linked to the last node.
    """
    free_end = rho_b is None
    A, w = _dense_ce_system(g, N, free_end)
    n = g.n
    x0 = np.concatenate([np.ravel(rho), np.ravel(m)] + ([np.ravel(rho_end)] if free_end else []))
    b = np.zeros(A.shape[0])
    b[N * n:(N + 1) * n] = rho_a
    if not free_end:
        b[(N + 1) * n:(N + 2) * n] = rho_b
    size = x0.size
    kkt = np.block([[np.diag(w), A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
    rhs = np.concatenate([w * x0, b])
    sol = np.linalg.lstsq(kkt, rhs, rcond=1e-13)[0]
    x = sol[:size]
    n_rho = (N + 1) * n
    rho_pr = x[:n_rho].reshape(N + 1, n)
    m_pr = x[n_rho:n_rho + N * g.n_edges].reshape(N, g.n_edges)
    if free_end:
        return rho_pr, m_pr, x[n_rho + N * g.n_edges:]
    return rho_pr, m_pr


def polar_margin_K(kind, d, resolution: int = 4001, u_max: float = 300.0) -> float:
    """``max <d, y>`` over unit vectors ``y`` of ``K`` (``<= 0`` iff ``d`` is polar).

    ``K`` is the cone spanned by the axis rays ``(1, 0, 0)``, ``(0, 1, 0)`` and
    the top rays ``(e^{u/2}, e^{-u/2}, theta(e^{u/2}, e^{-u/2}))``.
    """
    mean = get_mean(kind)
    d = np.asarray(d, dtype=float)

    def ray(u):
        w = np.array([math.exp(u / 2), math.exp(-u / 2), mean.ray_value(u)])
        return float(d @ w) / float(np.linalg.norm(w))

    us = np.linspace(-u_max, u_max, resolution)
    W = _top_rays(mean, us)
    vals = W @ d / np.linalg.norm(W, axis=1)
    k = int(np.argmax(vals))
    step = us[1] - us[0]
    res = minimize_scalar(lambda u: -ray(u), bounds=(us[k] - step, us[k] + step),
                          method="bounded", options={"xatol": 1e-12})
    return max(float(vals[k]), -float(res.fun), float(d[0]), float(d[1]))


def normal_cone_residual_K(kind, p, proj) -> float:
    """Optimality defect of ``proj`` as the projection of ``p`` onto ``K``.

    For a closed convex cone the conditions are ``proj in K``,
    ``p - proj`` polar and ``<p - proj, proj> = 0``; each defect is scaled
    by ``max(1, |p|)``.
    """
    mean = get_mean(kind)
    p = np.asarray(p, dtype=float)
    x = np.asarray(proj, dtype=float)
    d = p - x
    scale = max(1.0, float(np.linalg.norm(p)))
    th = mean.theta_st(x[0], x[1]) if min(x[0], x[1]) >= 0 else -math.inf
    feas = max(0.0, -x[0], -x[1], -x[2], x[2] - th)
    polar = max(0.0, polar_margin_K(kind, d)) if np.linalg.norm(d) > 0 else 0.0
    return max(feas, polar, abs(float(d @ x)) / scale) / scale


def normal_cone_residual_B(p, proj) -> float:
    """Defect of ``proj`` as the projection of ``p`` onto ``{a + b^2/4 <= 0}``.

    Outside points must land on the parabola with ``p - proj`` a nonnegative
    multiple of the outward normal ``(1, b/2)``.
    """
    p = np.asarray(p, dtype=float)
    x = np.asarray(proj, dtype=float)
    scale = max(1.0, float(np.linalg.norm(p)))
    gval = x[0] + x[1] ** 2 / 4.0
    d = p - x
    if np.linalg.norm(d) == 0.0:
        return max(0.0, gval) / scale
    nrm = np.array([1.0, x[1] / 2.0])
    lam = max(0.0, float(d @ nrm) / float(nrm @ nrm))
    return max(abs(gval), float(np.linalg.norm(d - lam * nrm))) / scale


def dense_projection_oracle(kind: str, point, resolution: int = 6001, **ce):
    """Dispatch to the brute-force projection for ``"B"``, ``"K:log"``, ``"K:geo"``, ``"CE"``."""
    if kind == "B":
        return dense_project_B(*point, resolution=max(resolution, 1001))
    if kind.startswith("K"):
        mean = kind.split(":", 1)[1] if ":" in kind else "log"
        return dense_project_K(mean, point, resolution=resolution)
    if kind == "CE":
        return dense_project_ce(**ce)
    raise ValueError(f"unknown set {kind!r}")


# ---------------------------------------------------------------------------
# superdifferential and finite differences
# ---------------------------------------------------------------------------

def superdiff_margin(kind, z, resolution: int = 200, span: float = 12.0) -> float:
    """``min (z.p - theta(p))`` over the unit-length directions of the quadrant.

    A ``resolution x resolution`` log-spaced grid of ``(s, t)`` is scanned,
    normalized to ``s^2 + t^2 = 1``, and the minimum is refined along the
    angle.  The axis directions are included explicitly.
    """
    mean = get_mean(kind)
    z1, z2 = float(z[0]), float(z[1])
    g = np.logspace(-span, span, resolution)
    S, T = np.meshgrid(g, g)
    nrm = np.hypot(S, T)
    S, T = S / nrm, T / nrm
    vals = z1 * S + z2 * T - theta_array(mean, S, T)
    k = np.unravel_index(np.argmin(vals), vals.shape)
    best = float(vals[k])
    best = min(best, z1, z2)

    def along(phi):
        s, t = math.cos(phi), math.sin(phi)
        return z1 * s + z2 * t - mean.theta_st(s, t)

    phi0 = math.atan2(T[k], S[k])
    res = minimize_scalar(along, bounds=(max(phi0 - 0.2, 0.0), min(phi0 + 0.2, math.pi / 2)),
                          method="bounded", options={"xatol": 1e-14})
    return min(best, float(res.fun))


def superdiff_bruteforce(kind, z, resolution: int = 200) -> bool:
    """Whether ``theta(p) <= z.p`` on a refined grid of the quadrant."""
    return superdiff_margin(kind, z, resolution) >= 0.0


def finite_difference_check(f, x, direction, derivative, step: float = 1e-6) -> float:
    """Relative error between ``derivative`` (a number) and a central difference."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    fd = (f(x + step * d) - f(x - step * d)) / (2 * step)
    scale = max(abs(fd), abs(derivative), 1e-300)
    return abs(fd - derivative) / scale
