"""Acceptance criteria as runnable checks.

Each ``criterion_<k>`` returns a :class:`CriterionResult`; :func:`run_suite`
groups them into the named suites used by ``graphot validate``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import oracles
from .entropy import (euler_heat_flow, euler_porous_flow, is_nonincreasing, jko_flow,
                      sup_discrepancy)
from .graph import (MarkovGraph, builtin_graph, dirac, divergence, gradient, inner_edge,
                    inner_node, laplacian, line5, line5_initial_density, make_two_node_graph)
from .means import in_superdifferential_at_origin
from .prox import CEProjector, project_K, project_parabola_B
from .solver import SolverConfig, solve_geodesic
from .timegrid import BoundaryPair, TimeGrid, ce_residual

__all__ = [
    "CriterionResult",
    "CRITERIA",
    "SUITES",
    "run_criterion",
    "run_suite",
    "random_reversible_graph",
    "window_mass",
]


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return (f"[{status}] criterion {self.number:2d} {self.name}: value={self.value:.6g} "
                f"threshold={self.threshold:.6g}{extra} [{self.seconds:.1f}s]")


def _two_node_bc() -> BoundaryPair:
    return BoundaryPair(np.array([2.0, 0.0]), np.array([0.0, 2.0]))


@lru_cache(maxsize=None)
def _two_node_run(mean: str, N: int = 2000, tol: float | None = None):
    cfg = SolverConfig(mean=mean)
    if tol is not None:
        cfg = cfg.replace(tol=tol)
    return solve_geodesic(make_two_node_graph(1.0, 1.0), TimeGrid(N), _two_node_bc(), cfg)


@lru_cache(maxsize=None)
def _dirac_run(name: str, source: int, target: int, N: int = 100):
    g = builtin_graph(name)
    return g, solve_geodesic(g, TimeGrid(N), BoundaryPair(dirac(g, source), dirac(g, target)))


def _as_density(g: MarkovGraph, rho) -> np.ndarray:
    """Cut roundoff-level negatives and restore unit mass."""
    rho = np.maximum(np.asarray(rho, dtype=float), 0.0)
    return rho / g.mass(rho)


# ---------------------------------------------------------------------------
# two-node graph
# ---------------------------------------------------------------------------

def criterion_1() -> CriterionResult:
    sol = _two_node_run("log")
    ref = oracles.two_node_distance(oracles.TwoNodeExact(1.0, 1.0, "log"))
    err = abs(sol.distance - ref) / ref
    ok = err <= 1e-2 and sol.wall_time <= 60.0
    return CriterionResult(1, "two-node distance vs quadrature", ok, err, 1e-2,
                           f"W_h={sol.distance:.10f} oracle={ref:.10f} "
                           f"solve {sol.wall_time:.1f}s of 60s")


def criterion_2() -> CriterionResult:
    sol = _two_node_run("log")
    e = oracles.TwoNodeExact(1.0, 1.0, "log")
    ref = oracles.two_node_geodesic_ode(e, -1.0, 1.0, 2000).rho(e)[:, 1]
    err = float(np.max(np.abs(sol.rho[:, 1] - ref)))
    return CriterionResult(2, "two-node geodesic vs explicit Euler ODE", err <= 2e-2, err, 2e-2)


def criterion_3() -> CriterionResult:
    geo = _two_node_run("geo")
    log_ = _two_node_run("log")
    gap = float(np.max(np.abs(geo.rho[:, 1] - log_.rho[:, 1])))
    ok = geo.converged and math.isfinite(geo.distance) and gap >= 1e-3
    return CriterionResult(3, "geometric vs logarithmic two-node curves", ok, gap, 1e-3,
                           f"geo converged={geo.converged} W_geo={geo.distance:.6f}")


def criterion_11(Ns=(25, 50, 100, 200, 400), tol: float = 1e-13) -> CriterionResult:
    ref = oracles.two_node_distance(oracles.TwoNodeExact(1.0, 1.0, "log"))
    errs = [abs(_two_node_run("log", N, tol).distance - ref) for N in Ns]
    ratios = [b / a for a, b in zip(errs[:-1], errs[1:])]
    worst = max(ratios)
    return CriterionResult(11, "h-refinement error nonincreasing", worst <= 1.05, worst, 1.05,
                           "errors " + ", ".join(f"N={N}:{e:.2e}" for N, e in zip(Ns, errs)))


# ---------------------------------------------------------------------------
# metric properties and symmetric graphs
# ---------------------------------------------------------------------------

def criterion_4(n_triples: int = 10, seed: int = 0) -> CriterionResult:
    g = builtin_graph("triangle")
    grid = TimeGrid(100)
    rng = np.random.default_rng(seed)

    def w(a, b):
        return solve_geodesic(g, grid, BoundaryPair(a, b)).distance

    sym = selfd = 0.0
    tri = math.inf
    for _ in range(n_triples):
        a, b, c = (rng.dirichlet(np.ones(g.n)) / g.pi for _ in range(3))
        ab, ba, bc, ac = w(a, b), w(b, a), w(b, c), w(a, c)
        sym = max(sym, abs(ab - ba))
        tri = min(tri, ab + bc - ac)
        selfd = max(selfd, w(a, a))
    ok = sym <= 1e-4 and tri >= -1e-4 and selfd <= 1e-5
    value = max(sym / 1e-4, -tri / 1e-4, selfd / 1e-5)
    return CriterionResult(4, "metric axioms on the triangle", ok, value, 1.0,
                           f"symmetry {sym:.2e}, triangle slack {tri:.2e}, self {selfd:.2e}; "
                           "value is the worst ratio to its bound")


def criterion_5() -> CriterionResult:
    g, sol = _dirac_run("cube", 0, 7)
    N = sol.grid.N
    rho0 = dirac(g, 0)
    worst = 0.0
    parts = []
    for frac in (0.25, 0.5, 0.75):
        i = int(round(frac * N))
        sub = solve_geodesic(g, sol.grid, BoundaryPair(rho0, _as_density(g, sol.rho[i])))
        dev = abs(sub.distance - frac * sol.distance) / sol.distance
        worst = max(worst, dev)
        parts.append(f"t={frac}: {dev:.2e}")
    return CriterionResult(5, "constant speed on the cube", worst <= 2e-2, worst, 2e-2,
                           ", ".join(parts))


def criterion_6() -> CriterionResult:
    g, sol = _dirac_run("cube", 0, 7)
    err = float(np.max(np.abs(sol.rho[sol.grid.N // 2] - 1.0)))
    return CriterionResult(6, "cube equidistribution at t=1/2", err <= 5e-3, err, 5e-3)


def criterion_7() -> CriterionResult:
    g, cube = _dirac_run("cube", 0, 7)
    reflect_cube = np.array([7 - v for v in range(8)])
    e1 = float(np.max(np.abs(cube.rho - cube.rho[::-1][:, reflect_cube])))
    g, lat = _dirac_run("lattice3x3", 0, 8)
    reflect_lat = np.arange(9)[::-1]
    e2 = float(np.max(np.abs(lat.rho - lat.rho[::-1][:, reflect_lat])))
    err = max(e1, e2)
    return CriterionResult(7, "time-reversal symmetry", err <= 1e-3, err, 1e-3,
                           f"cube {e1:.2e}, lattice3x3 {e2:.2e}")


def window_mass(rho, a: float = 0.4, b: float = 0.6) -> float:
    """``int_a^b`` of the piecewise linear interpolant of ``rho`` at ``x_i = i / M``."""
    rho = np.asarray(rho, dtype=float)
    x = np.linspace(0.0, 1.0, rho.size)
    xs = np.unique(np.concatenate([[a, b], x[(x > a) & (x < b)]]))
    return float(np.trapezoid(np.interp(xs, x, rho), xs))


def criterion_10(Ms=(2, 4, 8, 16, 32)) -> CriterionResult:
    masses = []
    for M in Ms:
        g, sol = _dirac_run(f"chain({M})", 0, M)
        masses.append(window_mass(sol.rho[sol.grid.N // 2]))
    steps = np.diff(masses)
    return CriterionResult(10, "chain concentration in the middle fifth", bool(np.all(steps > 0)),
                           float(steps.min()), 0.0,
                           "masses " + ", ".join(f"M={M}:{m:.4f}" for M, m in zip(Ms, masses)))


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def _random_points(rng, n, dim):
    scales = rng.choice([1e-2, 1.0, 10.0, 100.0], size=(n, 1))
    pts = rng.normal(size=(n, dim)) * scales
    # exercise the coordinate axes and the positive octant explicitly
    pts[::5, 0] = 0.0
    pts[1::7, :] = np.abs(pts[1::7, :])
    return pts


def criterion_8(n_points: int = 200, seed: int = 1) -> CriterionResult:
    rng = np.random.default_rng(seed)
    idem = cone = agree = 0.0
    parts = []
    for label in ("B", "K:log", "K:geo"):
        i_w = c_w = a_w = 0.0
        if label == "B":
            for p in _random_points(rng, n_points, 2):
                x = np.array(project_parabola_B(*p))
                i_w = max(i_w, float(np.abs(np.array(project_parabola_B(*x)) - x).max()))
                c_w = max(c_w, oracles.normal_cone_residual_B(p, x))
                a_w = max(a_w, float(np.abs(oracles.dense_project_B(*p) - x).max())
                          / max(1.0, float(np.abs(p).max())))
        else:
            kind = label[2:]
            for p in _random_points(rng, n_points, 3):
                x = project_K(kind, p)
                i_w = max(i_w, float(np.abs(project_K(kind, x) - x).max()))
                c_w = max(c_w, oracles.normal_cone_residual_K(kind, p, x))
                a_w = max(a_w, float(np.abs(oracles.dense_project_K(kind, p) - x).max())
                          / max(1.0, float(np.abs(p).max())))
        parts.append(f"{label}: idem {i_w:.1e} cone {c_w:.1e} oracle {a_w:.1e}")
        idem, cone, agree = max(idem, i_w), max(cone, c_w), max(agree, a_w)

    g = make_two_node_graph(1.0, 1.0)
    N = 2
    res_w = ce_w = 0.0
    for free in (False, True):
        proj = CEProjector(g, N, free_end=free)
        for _ in range(20):
            rho = rng.normal(size=(N + 1, g.n))
            m = rng.normal(size=(N, g.n_edges))
            rho_a = rng.dirichlet(np.ones(g.n)) / g.pi
            if free:
                end = rng.normal(size=g.n)
                (r, mm, e), _ = proj.project_free(rho, m, end, rho_a)
                ref = oracles.dense_project_ce(g, N, rho, m, rho_a, rho_end=end)
                diff = max(np.abs(r - ref[0]).max(), np.abs(mm - ref[1]).max(),
                           np.abs(e - ref[2]).max())
                res, viol = ce_residual(g, r, mm, BoundaryPair(rho_a, e))
            else:
                rho_b = rng.dirichlet(np.ones(g.n)) / g.pi
                (r, mm), _ = proj.project_fixed(rho, m, rho_a, rho_b)
                ref = oracles.dense_project_ce(g, N, rho, m, rho_a, rho_b)
                diff = max(np.abs(r - ref[0]).max(), np.abs(mm - ref[1]).max())
                res, viol = ce_residual(g, r, mm, BoundaryPair(rho_a, rho_b))
            res_w = max(res_w, float(np.abs(res).max()), viol)
            ce_w = max(ce_w, float(diff))
    parts.append(f"CE: residual {res_w:.1e} oracle {ce_w:.1e}")
    ok = idem <= 1e-12 and cone <= 1e-9 and agree <= 1e-4 and res_w <= 1e-10 and ce_w <= 1e-8
    value = max(idem / 1e-12, cone / 1e-9, agree / 1e-4, res_w / 1e-10, ce_w / 1e-8)
    return CriterionResult(8, "projection suite", ok, value, 1.0,
                           "; ".join(parts) + "; value is the worst ratio to its bound")


def criterion_9(n_points: int = 500, seed: int = 2, band: float = 1e-10) -> CriterionResult:
    rng = np.random.default_rng(seed)
    bad = 0
    counts = []
    for kind in ("log", "geo"):
        inside = skipped = 0
        for _ in range(n_points):
            if rng.random() < 0.2:
                z = rng.normal(size=2) * 2.0
            else:
                z = np.exp(rng.uniform(-4.0, 4.0, size=2))
            margin = oracles.superdiff_margin(kind, z)
            if abs(margin) <= band:
                skipped += 1
                continue
            mine = in_superdifferential_at_origin(kind, z)
            inside += mine
            bad += mine != (margin >= 0.0)
        counts.append(f"{kind}: {inside} inside, {skipped} in band")
    return CriterionResult(9, "superdifferential vs tangent-plane grid", bad == 0, bad, 0,
                           ", ".join(counts))


# ---------------------------------------------------------------------------
# entropy flows
# ---------------------------------------------------------------------------

def _flow_comparison(kind: str):
    g = line5()
    rho0 = line5_initial_density(g)
    jko = jko_flow(g, rho0, 1e-3, 50, TimeGrid(100), kind=kind)
    if kind == "shannon":
        ref = euler_heat_flow(g, rho0, 1e-3, 50)
    else:
        ref = euler_porous_flow(g, rho0, 1e-3, 50, 0.5)
    return jko, ref


def criterion_12() -> CriterionResult:
    jko, ref = _flow_comparison("shannon")
    err = sup_discrepancy(jko, ref)
    mono = is_nonincreasing(jko.entropy_values, 1e-10)
    rise = float(np.max(np.diff(jko.entropy_values)))
    return CriterionResult(12, "JKO (Shannon, log) vs heat flow", err <= 5e-2 and mono, err,
                           5e-2, f"largest entropy increment {rise:.2e} (slack 1e-10)")


def criterion_13() -> CriterionResult:
    jko, ref = _flow_comparison("renyi")
    err = sup_discrepancy(jko, ref)
    return CriterionResult(13, "JKO (Renyi 1/2, geo) vs porous-medium flow", err <= 5e-2, err,
                           5e-2)


# ---------------------------------------------------------------------------
# operator identities
# ---------------------------------------------------------------------------

def random_reversible_graph(rng, n: int | None = None, p_edge: float = 0.5) -> MarkovGraph:
    """Connected graph with random symmetric conductances ``c(x, y)``.

    ``pi(x) = sum_y c(x, y) / total`` and ``Q(x, y) = c(x, y) / (total pi(x))``,
    which is reversible by construction.
    """
    n = int(rng.integers(2, 12)) if n is None else n
    pairs = {(i, i + 1) for i in range(n - 1)}
    pairs |= {(i, j) for i in range(n) for j in range(i + 2, n) if rng.random() < p_edge}
    perm = rng.permutation(n)
    pairs = sorted((min(perm[i], perm[j]), max(perm[i], perm[j])) for i, j in pairs)
    c = rng.uniform(0.1, 10.0, size=len(pairs))
    src = np.array([i for i, _ in pairs] + [j for _, j in pairs])
    dst = np.array([j for _, j in pairs] + [i for i, _ in pairs])
    cond = np.concatenate([c, c])
    total = cond.sum()
    pi = np.bincount(src, weights=cond, minlength=n) / total
    return MarkovGraph(pi, src, dst, cond / (total * pi[src]))


def criterion_14(n_instances: int = 1000, seed: int = 3) -> CriterionResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    ibp = lap = mass = 0.0
    for _ in range(n_instances):
        g = random_reversible_graph(rng)
        phi = rng.normal(size=g.n)
        Psi = rng.normal(size=g.n_edges)
        lhs = inner_node(g, phi, divergence(g, Psi))
        rhs = -inner_edge(g, gradient(g, phi), Psi)
        scale = max(abs(lhs), abs(rhs), 1e-300)
        ibp = max(ibp, abs(lhs - rhs) / scale)
        L = laplacian(g, phi)
        lap = max(lap, float(np.abs(L - divergence(g, gradient(g, phi))).max())
                  / max(1.0, float(np.abs(L).max())))
        div = divergence(g, Psi)
        mass = max(mass, abs(float(div @ g.pi)) / max(1.0, float(np.abs(div).max())))
    dt = time.perf_counter() - t0
    ok = ibp <= 1e-12 and lap <= 1e-14 and mass <= 1e-12 and dt <= 10.0
    value = max(ibp / 1e-12, lap / 1e-14, mass / 1e-12)
    return CriterionResult(14, "operator identities on random graphs", ok, value, 1.0,
                           f"integration by parts {ibp:.1e}, Laplacian {lap:.1e}, "
                           f"mass {mass:.1e}, {dt:.2f}s of 10s; value is the worst ratio")


CRITERIA = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
    11: criterion_11, 12: criterion_12, 13: criterion_13, 14: criterion_14,
}

SUITES = {
    "two-node": (1, 2, 3, 11),
    "metric": (4,),
    "cube": (5, 6, 7),
    "chain": (10,),
    "projections": (8, 9),
    "flows": (12, 13),
    "identities": (14,),
    "all": tuple(range(1, 15)),
}


def run_criterion(k: int) -> CriterionResult:
    t0 = time.perf_counter()
    res = CRITERIA[k]()
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(name: str, emit=print) -> list[CriterionResult]:
    """Run a named suite, emitting one line per criterion."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    out = []
    for k in SUITES[name]:
        res = run_criterion(k)
        if emit is not None:
            emit(res.line())
        out.append(res)
    return out
