"""Projections and proximal maps used by the primal-dual splitting.

Pointwise maps (the parabola set ``B``, the subgraph ``K`` of a mean and the
entropy prox) are numba kernels.  The linear maps (``J+-``, ``Javg``,
``J=`` and the continuity equation) work on whole time-space arrays and use
the weights of the discrete scalar product:

* nodal densities, interval averages and ``rho_B``: ``h pi(x)``
* interval edge fields: ``h Q(x, y) pi(x) / 2``
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.linalg import cg, splu

from .graph import MarkovGraph, divergence, gradient
from .means import MeanKind, get_mean

log = logging.getLogger(__name__)

__all__ = [
    "ProjectionError",
    "project_parabola_B",
    "prox_dual_edge_action",
    "project_K",
    "project_K_top",
    "project_K_field",
    "project_Jpm",
    "prox_dual_Jpm",
    "JavgProjector",
    "prox_dual_Javg",
    "project_Jeq",
    "CEProjector",
    "entropy_prox_primal",
    "prox_dual_entropy",
]

B_TOL = 1e-14
K_TOP_TOL = 1e-13
K_TOP_MAXIT = 200
K_BRACKET_START = 60.0
# exp(1.5 u) must stay finite in the surface residual
K_BRACKET_MAX = 300.0
ENTROPY_FLOOR = 1e-300


class ProjectionError(RuntimeError):
    """A root finder inside a projection failed."""


# ---------------------------------------------------------------------------
# B = {(p, q) : p + q^2/4 <= 0}
# ---------------------------------------------------------------------------

@njit(cache=True)
def _proj_b_point(p, q):
    if p + 0.25 * q * q <= 0.0:
        return p, q
    if q == 0.0:
        # p > 0 here: the vertex of the parabola
        return 0.0, 0.0
    # nearest boundary point (-t^2/4, t): t^3/8 + (p/2 + 1) t - q = 0
    aq = abs(q)
    c1 = 0.5 * p + 1.0
    hi = max(aq, 1.0)
    lo = 0.0
    t = hi
    for _ in range(200):
        r = 0.125 * t * t * t + c1 * t - aq
        # every term of the cubic is of the order of |q|
        if abs(r) <= B_TOL * aq:
            break
        if r > 0.0:
            hi = t
        else:
            lo = t
        dr = 0.375 * t * t + c1
        # t - r/dr rearranged to avoid cancellation when t is far above the root
        tn = (0.25 * t * t * t + aq) / dr if dr > 0.0 else -1.0
        if not (lo < tn < hi):
            tn = 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * hi:
            t = tn
            break
        t = tn
    if q < 0.0:
        t = -t
    return -0.25 * t * t, t


@njit(cache=True)
def _proj_b_field(p, q, out_p, out_q):
    for k in range(p.size):
        out_p[k], out_q[k] = _proj_b_point(p[k], q[k])


def project_parabola_B(p: float, q: float) -> tuple[float, float]:
    """Euclidean projection onto ``{p + q^2/4 <= 0}``."""
    return _proj_b_point(float(p), float(q))


def prox_dual_edge_action(p, q, sigma: float = 1.0):
    """Pointwise projection onto ``B``; the step size does not enter."""
    p = np.ascontiguousarray(p, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same shape")
    out_p = np.empty_like(p)
    out_q = np.empty_like(q)
    _proj_b_field(p.reshape(-1), q.reshape(-1), out_p.reshape(-1), out_q.reshape(-1))
    return out_p, out_q


# ---------------------------------------------------------------------------
# K = {(s, t, v) : 0 <= v <= theta(s, t)}
# ---------------------------------------------------------------------------

@njit
def _top_residual(ray_value, d1, d1_prime, p1, p2, p3, u):
    """Return ``<p, w x n>`` at ``q = exp(u)``, its u-derivative and a scale."""
    a = math.exp(0.5 * u)
    b = math.exp(-0.5 * u)
    g = ray_value(u)
    e1 = d1(u)
    e2 = d1(-u)
    e1p = d1_prime(u)
    e2p = -d1_prime(-u)
    gp = 0.5 * (a * e1 - b * e2)
    c1 = b + g * e2
    c2 = a + g * e1
    c3 = b * e1 - a * e2
    f = p1 * c1 - p2 * c2 + p3 * c3
    df = (p1 * (-0.5 * b + gp * e2 + g * e2p)
          - p2 * (0.5 * a + gp * e1 + g * e1p)
          + p3 * (-0.5 * b * e1 + b * e1p - 0.5 * a * e2 - a * e2p))
    scale = (abs(p1) + abs(p2) + abs(p3)) * (abs(c1) + abs(c2) + abs(c3))
    return f, df, scale


@njit
def _project_k_top(ray_value, d1, d1_prime, p1, p2, p3, u_start):
    """Projection onto the graph of the mean; returns ``(s, t, v, u, status)``.

    Newton on ``u = log q`` with a bracket that is only grown when a step is
    rejected.  ``u_start`` is used as initial guess when finite.  ``status``
    is 0 on success, 1 if the root lies beyond ``|u| = K_BRACKET_MAX`` and
    2 if the iteration did not converge.
    """
    if math.isfinite(u_start):
        u = u_start
    elif p1 > 0.0 and p2 > 0.0:
        u = math.log(p1) - math.log(p2)
    else:
        u = 0.0
    u = min(max(u, -K_BRACKET_MAX), K_BRACKET_MAX)
    # for p3 > 0 the residual is positive for u -> -inf and negative for u -> +inf
    lo = -math.inf
    hi = math.inf
    step = 1.0
    dx_old = math.inf
    status = 2
    for it in range(K_TOP_MAXIT):
        f, df, scale = _top_residual(ray_value, d1, d1_prime, p1, p2, p3, u)
        if abs(f) <= K_TOP_TOL * scale:
            status = 0
            break
        if f > 0.0:
            lo = u
            if u >= K_BRACKET_MAX:
                status = 1
                break
        else:
            hi = u
            if u <= -K_BRACKET_MAX:
                status = 1
                break
        un = u - f / df if df < 0.0 else math.nan
        if math.isinf(hi):
            # no sign change yet, the root lies to the right; Newton crawls on
            # the nearly exponential tails, so after two steps insist on
            # geometrically growing moves
            target = u + step
            step *= 2.0
            if not un > u:
                un = target
            elif it >= 2:
                un = max(un, target)
            un = min(un, K_BRACKET_MAX)
        elif math.isinf(lo):
            target = u - step
            step *= 2.0
            if not un < u:
                un = target
            elif it >= 2:
                un = min(un, target)
            un = max(un, -K_BRACKET_MAX)
        else:
            # bracketed: Newton only while it at least halves the previous step
            if not (lo < un < hi) or abs(un - u) > 0.5 * dx_old:
                un = 0.5 * (lo + hi)
            dx_old = abs(un - u)
        if hi - lo <= 4e-16 * max(1.0, abs(u)):
            u = un
            status = 0
            break
        u = un

    a = math.exp(0.5 * u)
    b = math.exp(-0.5 * u)
    g = ray_value(u)
    tau = (p1 * a + p2 * b + p3 * g) / (a * a + b * b + g * g)
    if tau <= 0.0:
        return 0.0, 0.0, 0.0, u, status
    return tau * a, tau * b, tau * g, u, status


@njit
def _project_k_point(theta_st, ray_value, d1, d1_prime, superdiff, axis_limit,
                     p1, p2, p3, u_start):
    """Case analysis of the projection onto ``K``; returns ``(s, t, v, u, status)``.

    ``u`` is the log-ratio of the surface root (``nan`` for other cases).
    """
    nan = math.nan
    if p3 >= 0.0 and p3 <= theta_st(p1, p2):
        return p1, p2, p3, nan, 0
    if p3 <= 0.0:
        return max(p1, 0.0), max(p2, 0.0), 0.0, nan, 0
    # from here p3 > 0
    if p1 > 0.0 and p2 <= 0.0:
        if -p2 / p3 >= axis_limit:
            return p1, 0.0, 0.0, nan, 0
    elif p1 <= 0.0 and p2 > 0.0:
        if -p1 / p3 >= axis_limit:
            return 0.0, p2, 0.0, nan, 0
    elif p1 <= 0.0 and p2 <= 0.0:
        if superdiff(-p1 / p3, -p2 / p3):
            return 0.0, 0.0, 0.0, nan, 0
    return _project_k_top(ray_value, d1, d1_prime, p1, p2, p3, u_start)


@njit
def _project_k_field(theta_st, ray_value, d1, d1_prime, superdiff, axis_limit,
                     p1, p2, p3, o1, o2, o3, u_cache):
    worst = 0
    for k in range(p1.size):
        a, b, c, u, st = _project_k_point(theta_st, ray_value, d1, d1_prime, superdiff,
                                          axis_limit, p1[k], p2[k], p3[k], u_cache[k])
        o1[k] = a
        o2[k] = b
        o3[k] = c
        if not math.isnan(u):
            u_cache[k] = u
        if st > worst:
            worst = st
    return worst


def _kernels(mean: MeanKind):
    return (mean.theta_st, mean.ray_value, mean.d1, mean.d1_prime, mean.superdiff,
            float(mean.axis_limit))


def project_K(kind, p) -> np.ndarray:
    """Euclidean projection of ``p = (s, t, v)`` onto ``{0 <= v <= theta(s, t)}``."""
    mean = get_mean(kind)
    p1, p2, p3 = (float(x) for x in p)
    a, b, c, _, st = _project_k_point(*_kernels(mean), p1, p2, p3, math.nan)
    if st == 2:
        raise ProjectionError(f"surface root finder failed for p={p!r} ({mean.name})")
    return np.array([a, b, c])


def project_K_top(kind, p) -> np.ndarray:
    """Projection onto the upper surface, assuming the case analysis routed there."""
    mean = get_mean(kind)
    p1, p2, p3 = (float(x) for x in p)
    a, b, c, _, st = _project_k_top(mean.ray_value, mean.d1, mean.d1_prime, p1, p2, p3,
                                    math.nan)
    if st != 0:
        raise ProjectionError(f"surface root not bracketed or not converged for p={p!r}")
    return np.array([a, b, c])


def project_K_field(kind, theta_minus, theta_plus, vartheta, u_cache=None):
    """Pointwise :func:`project_K` over arrays of equal shape.

    ``u_cache`` (same shape, float) holds initial guesses for the surface
    root and is updated in place; repeated calls on slowly changing input,
    as inside the primal-dual loop, then need one or two Newton steps.
    """
    mean = get_mean(kind)
    arrs = [np.ascontiguousarray(x, dtype=float) for x in (theta_minus, theta_plus, vartheta)]
    shape = arrs[0].shape
    if any(x.shape != shape for x in arrs):
        raise ValueError("fields must have the same shape")
    if u_cache is None:
        u_cache = np.full(shape, np.nan)
    elif u_cache.shape != shape or not u_cache.flags.c_contiguous:
        raise ValueError("u_cache must be a contiguous array of the field shape")
    outs = [np.empty(shape) for _ in range(3)]
    worst = _project_k_field(*_kernels(mean), *(x.reshape(-1) for x in arrs),
                             *(o.reshape(-1) for o in outs), u_cache.reshape(-1))
    if worst == 2:
        raise ProjectionError(f"surface root finder failed ({mean.name})")
    if worst == 1:
        log.debug("K projection hit the bracket cap |log q| = %g", K_BRACKET_MAX)
    return tuple(outs)


# ---------------------------------------------------------------------------
# J+- : q(x) = theta-(x, y), q(y) = theta+(x, y)
# ---------------------------------------------------------------------------

def project_Jpm(g: MarkovGraph, q, theta_minus, theta_plus):
    """Projection onto ``J+-`` in the weighted norm.

    ``rho(x) = (q(x) + 1/2 sum_y Q(x,y) (theta-(x,y) + theta+(y,x))) / (1 + D(x))``
    with ``D(x) = sum_y Q(x, y)``.
    """
    q = np.asarray(q, dtype=float)
    tm = np.asarray(theta_minus, dtype=float)
    tp = np.asarray(theta_plus, dtype=float)
    flux = (tm + tp[..., g.rev]) * g.rate
    acc = (g.src_incidence @ flux.reshape(-1, g.n_edges).T).T.reshape(q.shape)
    rho = (q + 0.5 * acc) / (1.0 + g.out_rate)
    return rho, rho[..., g.src], rho[..., g.dst]


def prox_dual_Jpm(g: MarkovGraph, q, theta_minus, theta_plus, sigma: float = 1.0):
    """Moreau complement ``id - proj_J+-``; independent of ``sigma``."""
    rho, pm, pp = project_Jpm(g, q, theta_minus, theta_plus)
    return (np.asarray(q, dtype=float) - rho, np.asarray(theta_minus, dtype=float) - pm,
            np.asarray(theta_plus, dtype=float) - pp)


# ---------------------------------------------------------------------------
# Javg : rho_bar = avg rho, with pinned endpoint(s)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JavgProjector:
    """Banded Cholesky factor of ``I + P_f P_f^T`` for ``N`` intervals.

    ``P_f`` is the averaging matrix restricted to the unpinned nodes; both
    endpoints are pinned in the fixed problem and only ``t_0`` in the free
    endpoint problem.
    """

    n_intervals: int
    free_end: bool = False
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_intervals
        free = np.ones(n + 1, dtype=bool)
        free[0] = False
        if not self.free_end:
            free[n] = False
        cnt = free[:-1].astype(float) + free[1:]
        diag = 1.0 + 0.25 * cnt
        off = 0.25 * free[1:-1]
        ab = np.zeros((2, n))
        ab[1] = diag
        ab[0, 1:] = off
        object.__setattr__(self, "_factor", cholesky_banded(ab, lower=False))
        object.__setattr__(self, "_free", free)

    def matrix(self) -> np.ndarray:
        """Dense ``I + P_f P_f^T`` (for diagnostics and tests)."""
        n = self.n_intervals
        P = np.zeros((n, n + 1))
        P[np.arange(n), np.arange(n)] = 0.5
        P[np.arange(n), np.arange(n) + 1] = 0.5
        Pf = P[:, self._free]
        return np.eye(n) + Pf @ Pf.T

    def project(self, rho, rho_bar, rho_a, rho_b=None):
        rho = np.array(rho, dtype=float)
        rho_bar = np.asarray(rho_bar, dtype=float)
        rho[0] = rho_a
        if not self.free_end:
            rho[-1] = rho_b
        rhs = rho_bar - 0.5 * (rho[1:] + rho[:-1])
        lam = cho_solve_banded((self._factor, False), rhs)
        # P_f^T lam on free nodes
        corr = np.zeros_like(rho)
        corr[1:] += 0.5 * lam
        corr[:-1] += 0.5 * lam
        rho[self._free] += corr[self._free]
        return rho, rho_bar - lam


def prox_dual_Javg(proj: JavgProjector, rho, rho_bar, sigma: float, rho_a, rho_b=None):
    """``v - sigma proj(v / sigma)`` for the affine set ``Javg``."""
    rho = np.asarray(rho, dtype=float)
    rho_bar = np.asarray(rho_bar, dtype=float)
    pr, pb = proj.project(rho / sigma, rho_bar / sigma, rho_a, rho_b)
    return rho - sigma * pr, rho_bar - sigma * pb


def project_Jeq(rho_bar, q):
    avg = 0.5 * (np.asarray(rho_bar, dtype=float) + np.asarray(q, dtype=float))
    return avg, avg.copy()


# ---------------------------------------------------------------------------
# continuity equation
# ---------------------------------------------------------------------------

class CEProjector:
    """Weighted projection onto the discrete continuity equation.

    With multiplier ``phi`` of shape ``(N, n)`` the projection reads
    ``rho'(t_i) = rho(t_i) + (phi_i - phi_{i-1}) / h`` at free nodes and
    ``m' = m + grad phi``.  ``phi`` solves the space-time elliptic system
    ``-(phi_{i+1} - 2 phi_i + phi_{i-1}) / h^2 - Lap phi_i = r_i``, assembled
    with every row multiplied by ``pi(x)`` so that it is symmetric.  In the
    fixed-endpoint mode its kernel (constants) is removed by the augmented
    row ``sum phi = 0``; with a free endpoint the last nodal density and
    ``rho_B`` are merged into one unknown and the matrix is nonsingular.
    """

    def __init__(self, g: MarkovGraph, n_intervals: int, free_end: bool = False,
                 use_factorization: bool = True):
        self.graph = g
        self.n_intervals = N = int(n_intervals)
        self.h = h = 1.0 / N
        self.free_end = bool(free_end)
        n = g.n
        diag = np.zeros(N)
        diag[1:] += 1.0
        diag[:-1] += 1.0
        if self.free_end:
            diag[-1] += 0.5
        T = sp.diags([diag, -np.ones(N - 1), -np.ones(N - 1)], [0, 1, -1], shape=(N, N))
        pi = sp.diags(g.pi)
        lap_pi = (sp.diags(g.pi * g.out_rate) - pi @ g.kernel)
        S = (sp.kron(T, pi) / h ** 2 + sp.kron(sp.identity(N), lap_pi)).tocsc()
        self.S = S
        self._pi_rows = np.tile(g.pi, N)
        self._lu = None
        if use_factorization:
            try:
                if self.free_end:
                    self._lu = splu(S)
                else:
                    w = sp.csc_matrix(np.ones((N * n, 1)))
                    aug = sp.bmat([[S, w], [w.T, None]], format="csc")
                    self._lu = splu(aug)
            except (RuntimeError, MemoryError) as exc:
                log.warning("factorization failed (%s); using conjugate gradients", exc)
                self._lu = None

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        size = rhs.size
        if self._lu is not None:
            if self.free_end:
                return self._lu.solve(rhs)
            return self._lu.solve(np.append(rhs, 0.0))[:size]
        if not self.free_end:
            rhs = rhs - rhs.mean()
        x, info = cg(self.S, rhs, rtol=1e-12, atol=0.0, maxiter=10 * size)
        if info != 0:
            log.warning("conjugate gradients stopped with info=%d", info)
        if not self.free_end:
            x -= x.mean()
        return x

    def multiplier(self, rho, m, rho_a, end):
        """Multiplier ``phi`` for pinned/merged endpoints ``rho_a`` and ``end``."""
        g = self.graph
        N, h = self.n_intervals, self.h
        r_nodes = np.array(rho, dtype=float)
        r_nodes[0] = rho_a
        r_nodes[-1] = end
        res = (r_nodes[1:] - r_nodes[:-1]) / h + divergence(g, m)
        phi = self._solve((res * g.pi).reshape(-1))
        return phi.reshape(N, g.n)

    def project_fixed(self, rho, m, rho_a, rho_b):
        if self.free_end:
            raise ValueError("projector was built for the free-endpoint problem")
        rho_a = np.asarray(rho_a, dtype=float)
        rho_b = np.asarray(rho_b, dtype=float)
        if abs(self.graph.mass(rho_a) - self.graph.mass(rho_b)) > 1e-10:
            raise ValueError("boundary densities have different mass")
        phi = self.multiplier(rho, m, rho_a, rho_b)
        return self._apply(rho, m, phi, rho_a, rho_b), phi

    def project_free(self, rho, m, rho_end, rho_a):
        if not self.free_end:
            raise ValueError("projector was built for the fixed-endpoint problem")
        rho = np.asarray(rho, dtype=float)
        rho_a = np.asarray(rho_a, dtype=float)
        target = 0.5 * (rho[-1] + np.asarray(rho_end, dtype=float))
        phi = self.multiplier(rho, m, rho_a, target)
        end = target - phi[-1] / (2.0 * self.h)
        rho_pr, m_pr = self._apply(rho, m, phi, rho_a, end)
        return (rho_pr, m_pr, end.copy()), phi

    def _apply(self, rho, m, phi, first, last):
        g = self.graph
        rho_pr = np.array(rho, dtype=float)
        rho_pr[1:-1] += (phi[1:] - phi[:-1]) / self.h
        rho_pr[0] = first
        rho_pr[-1] = last
        m_pr = np.asarray(m, dtype=float) + gradient(g, phi)
        return rho_pr, m_pr


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

@njit(cache=True)
def _entropy_prox_point(kind, a, c):
    """Root ``y > 0`` of ``y - a + c (log y + 1)`` (kind 0) or ``y - a - c/sqrt(y)`` (kind 1)."""
    if c <= 0.0:
        return max(a, 0.0)
    if kind == 0 and ENTROPY_FLOOR - a + c * (math.log(ENTROPY_FLOOR) + 1.0) >= 0.0:
        # the root is not representable
        return ENTROPY_FLOOR
    lo = ENTROPY_FLOOR
    hi = max(a, 1.0) + (c if kind == 1 else 0.0)
    y = max(a, 1e-12)
    if y > hi:
        y = 0.5 * hi
    scale = max(1.0, abs(a), c)
    for _ in range(200):
        if kind == 0:
            r = y - a + c * (math.log(y) + 1.0)
            dr = 1.0 + c / y
        else:
            r = y - a - c / math.sqrt(y)
            dr = 1.0 + 0.5 * c / (y * math.sqrt(y))
        if abs(r) <= 1e-15 * scale:
            return y
        if r > 0.0:
            hi = y
        else:
            lo = y
        yn = y - r / dr
        if not (lo < yn < hi):
            yn = math.sqrt(lo * hi)
        yn = max(yn, ENTROPY_FLOOR)
        if hi - lo <= 1e-16 * hi or yn == y:
            return yn
        y = yn
    return y


@njit(cache=True)
def _entropy_prox_field(kind, a, c, out):
    for k in range(a.size):
        out[k] = _entropy_prox_point(kind, a[k], c)


_ENTROPY_CODES = {"shannon": 0, "renyi": 1}


def entropy_prox_primal(kind: str, a, c: float):
    """Pointwise minimizer of ``(y - a)^2 / 2 + c E(y)``.

    ``E(y) = y log y`` for ``kind="shannon"`` and ``-2 sqrt(y)`` (Renyi with
    exponent 1/2) for ``kind="renyi"``.
    """
    code = _ENTROPY_CODES[kind]
    a = np.ascontiguousarray(a, dtype=float)
    out = np.empty_like(a)
    _entropy_prox_field(code, a.reshape(-1), float(c), out.reshape(-1))
    return out


def prox_dual_entropy(kind: str, v, sigma: float, tau_jko: float, h: float):
    """``prox`` of ``sigma (2 tau H)^*`` in the norm ``h ||.||_pi``.

    Moreau: ``v - sigma y`` where ``y`` minimizes
    ``(h/2)(y - v/sigma)^2 + (2 tau / sigma) E(y)`` per vertex.
    """
    v = np.asarray(v, dtype=float)
    if tau_jko == 0.0:
        return np.zeros_like(v)
    c = 2.0 * tau_jko / (sigma * h)
    return v - sigma * entropy_prox_primal(kind, v / sigma, c)
