"""Chambolle-Pock iteration for the slack-variable formulation of the distance.

The primal variable is ``a = (rho, m, vartheta, theta-, theta+, rho_bar, q)``
(plus ``rho_B`` when the final density is free).  The splitting is

* ``F = A(vartheta, m) + I_J+-(q, theta-, theta+) + I_Javg(rho, rho_bar)``
  (``+ 2 tau H(rho_B)`` in the entropy step),
* ``G = I_CE(rho, m) + I_K(theta-, theta+, vartheta) + I_J=(rho_bar, q)``,

coupled by the identity, so the iteration is

.. code-block:: text

    b+ = prox[sigma F*](b + sigma a_bar)
    a+ = prox[tau G](a - tau b+)
    a_bar = a+ + lambda (a+ - a)

All states are stored as one flat array; :class:`StateLayout` hands out
shaped views into it.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import MarkovGraph
from .means import get_mean, theta_array
from .prox import (
    CEProjector,
    JavgProjector,
    prox_dual_edge_action,
    prox_dual_entropy,
    prox_dual_Javg,
    prox_dual_Jpm,
    project_Jeq,
    project_K_field,
)
from .timegrid import (BoundaryPair, TimeGrid, antisymmetrize, avg_h, ce_residual,
                       discrete_action)

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "StateLayout",
    "PrimalState",
    "DualState",
    "GeodesicSolution",
    "h_inner",
    "apply_prox_F_star",
    "apply_prox_G",
    "Problem",
    "solve_geodesic",
    "solve_free_endpoint",
    "reported_action",
]

NEGATIVE_CLAMP = 1e-8
# relative flux still carried by an edge whose averaged density has reached
# zero; below this it is read as the zero-flux limit when reporting the action
ZERO_FLUX_TOL = 1e-5


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes and stopping rule.

    ``tol`` bounds ``h sum_i ||rho^{k+1}(t_i) - rho^k(t_i)||_pi^2``, which is
    evaluated every ``check_every`` iterations.
    """

    sigma: float = 64.0
    tau: float = 0.99 / 64.0
    lam: float = 1.0
    max_iters: int = 500_000
    tol: float = 1e-10
    mean: str = "log"
    check_every: int = 10
    history_stride: int = 100
    min_iters: int = 20

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0):
            raise ValueError("step sizes must be positive")
        if self.sigma * self.tau >= 1.0:
            raise ValueError(f"sigma * tau = {self.sigma * self.tau} must be < 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.max_iters < 1 or self.check_every < 1 or self.history_stride < 1:
            raise ValueError("iteration counts must be positive")
        get_mean(self.mean)

    def replace(self, **changes) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **changes})


_NODE, _EDGE = "node", "edge"


class StateLayout:
    """Offsets of the state components inside a flat array."""

    def __init__(self, g: MarkovGraph, n_intervals: int, free_end: bool = False):
        self.graph = g
        self.N = N = int(n_intervals)
        self.h = 1.0 / N
        self.free_end = bool(free_end)
        n, E = g.n, g.n_edges
        parts = [
            ("rho", (N + 1, n), _NODE),
            ("m", (N, E), _EDGE),
            ("vartheta", (N, E), _EDGE),
            ("theta_minus", (N, E), _EDGE),
            ("theta_plus", (N, E), _EDGE),
            ("rho_bar", (N, n), _NODE),
            ("q", (N, n), _NODE),
        ]
        if self.free_end:
            parts.append(("rho_b", (n,), _NODE))
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        weights = []
        pos = 0
        for name, shape, kind in parts:
            size = int(np.prod(shape))
            self.slices[name] = slice(pos, pos + size)
            self.shapes[name] = shape
            base = g.pi if kind == _NODE else 0.5 * g.edge_weight
            weights.append(np.broadcast_to(self.h * base, shape).reshape(-1))
            pos += size
        self.size = pos
        self.weights = np.concatenate(weights)
        self.names = tuple(self.slices)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        return flat[self.slices[name]].reshape(self.shapes[name])

    def zeros(self) -> "PrimalState":
        return PrimalState(self, np.zeros(self.size))


class PrimalState:
    """Flat state vector with named, shaped views."""

    __slots__ = ("layout", "data")

    def __init__(self, layout: StateLayout, data: np.ndarray):
        if data.shape != (layout.size,):
            raise ValueError(f"state has size {data.shape}, expected ({layout.size},)")
        self.layout = layout
        self.data = data

    def __getattr__(self, name):
        layout = object.__getattribute__(self, "layout")
        if name in layout.slices:
            return layout.view(object.__getattribute__(self, "data"), name)
        raise AttributeError(name)

    def copy(self) -> "PrimalState":
        return PrimalState(self.layout, self.data.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).copy() for k in self.layout.names}


DualState = PrimalState


def h_inner(a1: PrimalState, a2: PrimalState) -> float:
    """Weighted scalar product of two states on the same layout."""
    if a1.layout is not a2.layout and a1.layout.size != a2.layout.size:
        raise ValueError("states live on different layouts")
    return float(np.dot(a1.layout.weights * a1.data, a2.data))


# ---------------------------------------------------------------------------
# problem data and proximal maps
# ---------------------------------------------------------------------------

class Problem:
    """Cached operators for one graph, grid and boundary mode.

    ``rho_b`` is ``None`` in the free-endpoint problem, where ``tau_jko`` and
    ``entropy`` describe the additional term ``2 tau H(rho_B)``.
    """

    def __init__(self, g: MarkovGraph, grid: TimeGrid | int, rho_a, rho_b=None, mean="log",
                 tau_jko: float = 0.0, entropy: str = "shannon"):
        grid = grid if isinstance(grid, TimeGrid) else TimeGrid(int(grid))
        self.graph = g
        self.grid = grid
        self.mean = get_mean(mean)
        self.free_end = rho_b is None
        self.rho_a = np.asarray(rho_a, dtype=float)
        self.rho_b = None if rho_b is None else np.asarray(rho_b, dtype=float)
        self.tau_jko = float(tau_jko)
        self.entropy = entropy
        self.layout = StateLayout(g, grid.N, self.free_end)
        self.ce = CEProjector(g, grid.N, free_end=self.free_end)
        self.javg = JavgProjector(grid.N, free_end=self.free_end)
        # warm-start guesses for the surface root of the K projection
        self.u_cache = np.full((grid.N, g.n_edges), np.nan)

    def initial_state(self) -> PrimalState:
        g, lay = self.graph, self.layout
        a = lay.zeros()
        end = self.rho_a if self.free_end else self.rho_b
        t = self.grid.nodes[:, None]
        a.rho[:] = (1.0 - t) * self.rho_a + t * end
        mid = 0.5 * (a.rho[1:] + a.rho[:-1])
        a.vartheta[:] = theta_array(self.mean, mid[:, g.src], mid[:, g.dst])
        a.theta_minus[:] = mid[:, g.src]
        a.theta_plus[:] = mid[:, g.dst]
        a.rho_bar[:] = mid
        a.q[:] = mid
        if self.free_end:
            a.rho_b[:] = self.rho_a
        return a


def apply_prox_F_star(prob: Problem, sigma: float, v: DualState, out: DualState | None = None):
    """``prox[sigma F*]`` applied componentwise."""
    g = prob.graph
    out = v.layout.zeros() if out is None else out
    out.vartheta[:], out.m[:] = prox_dual_edge_action(v.vartheta, v.m)
    out.q[:], out.theta_minus[:], out.theta_plus[:] = prox_dual_Jpm(
        g, v.q, v.theta_minus, v.theta_plus)
    out.rho[:], out.rho_bar[:] = prox_dual_Javg(prob.javg, v.rho, v.rho_bar, sigma,
                                                prob.rho_a, prob.rho_b)
    if prob.free_end:
        out.rho_b[:] = prox_dual_entropy(prob.entropy, v.rho_b, sigma, prob.tau_jko,
                                         prob.grid.h)
    return out


def apply_prox_G(prob: Problem, tau: float, v: PrimalState, out: PrimalState | None = None):
    """``prox[tau G]``: three projections, so ``tau`` does not enter."""
    out = v.layout.zeros() if out is None else out
    if prob.free_end:
        (rho, m, rho_b), _ = prob.ce.project_free(v.rho, v.m, v.rho_b, prob.rho_a)
        out.rho_b[:] = rho_b
    else:
        (rho, m), _ = prob.ce.project_fixed(v.rho, v.m, prob.rho_a, prob.rho_b)
    out.rho[:] = rho
    out.m[:] = m
    out.theta_minus[:], out.theta_plus[:], out.vartheta[:] = project_K_field(
        prob.mean, v.theta_minus, v.theta_plus, v.vartheta, u_cache=prob.u_cache)
    out.rho_bar[:], out.q[:] = project_Jeq(v.rho_bar, v.q)
    return out


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    iteration: int
    stop_value: float
    fixed_point_residual: float
    action: float
    ce_residual: float


@dataclass
class GeodesicSolution:
    """Result of a primal-dual solve.

    ``rho``/``m`` are the final primal iterate (``m`` antisymmetrized);
    ``state`` and ``dual`` allow warm starts.
    """

    graph: MarkovGraph
    grid: TimeGrid
    rho: np.ndarray
    m: np.ndarray
    distance: float
    action: float
    iterations: int
    converged: bool
    stop_value: float
    fixed_point_residual: float
    ce_residual: float
    wall_time: float
    mean: str
    config: SolverConfig
    state: PrimalState = field(repr=False)
    dual: DualState = field(repr=False)
    history: list[IterationRecord] = field(default_factory=list, repr=False)
    rho_b: np.ndarray | None = None
    negative_mass: float = 0.0
    flags: list[str] = field(default_factory=list)

    def density_at(self, t: float) -> np.ndarray:
        """Piecewise linear interpolation of the nodal densities."""
        N = self.grid.N
        s = min(max(t, 0.0), 1.0) * N
        i = min(int(math.floor(s)), N - 1)
        w = s - i
        return (1.0 - w) * self.rho[i] + w * self.rho[i + 1]

    def report(self) -> dict:
        return {
            "config": asdict(self.config),
            "n_intervals": self.grid.N,
            "vertices": self.graph.n,
            "edges": self.graph.n_edges,
            "mean": self.mean,
            "iterations": self.iterations,
            "converged": self.converged,
            "stop_value": self.stop_value,
            "fixed_point_residual": self.fixed_point_residual,
            "distance": self.distance,
            "action": self.action,
            "ce_residual": self.ce_residual,
            "negative_mass": self.negative_mass,
            "wall_time": self.wall_time,
            "flags": list(self.flags),
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2)


def reported_action(g: MarkovGraph, rho, m, kind, flux_tol: float = ZERO_FLUX_TOL):
    """Discrete action of a (nearly) feasible final iterate.

    Averaged densities are cut at zero.  An edge whose mean vanishes while
    ``|m| <= flux_tol * max(1, max |m|)`` is counted as the zero-flux limit ``alpha(0, 0) = 0``;
    any larger flux there makes the action infinite.  Returns the action and
    the number of edge terms treated as limits.
    """
    mid = np.maximum(avg_h(rho), 0.0)
    th = theta_array(kind, mid[:, g.src], mid[:, g.dst])
    m = np.asarray(m, dtype=float)
    cut = flux_tol * max(1.0, float(np.abs(m).max(initial=0.0)))
    pos = th > 0
    limit = ~pos & (m != 0) & (np.abs(m) <= cut)
    if np.any(~pos & (np.abs(m) > cut)):
        return math.inf, int(limit.sum())
    a = np.zeros_like(m)
    a[pos] = m[pos] ** 2 / th[pos]
    return float(0.5 / (len(rho) - 1) * np.sum(a @ g.edge_weight)), int(limit.sum())



def _finalize(prob: Problem, a: PrimalState, b: DualState, cfg: SolverConfig, it: int,
              converged: bool, stop: float, fpr: float, history, t0: float) -> GeodesicSolution:
    g = prob.graph
    flags = []
    rho = a.rho.copy()
    worst = float(min(rho.min(), 0.0))
    if worst < -NEGATIVE_CLAMP:
        flags.append(f"negative density {worst:.3e} below clamp threshold")
        log.warning("final density has entries down to %.3e", worst)
    rho[(rho < 0) & (rho >= -NEGATIVE_CLAMP)] = 0.0
    m = antisymmetrize(g, a.m)
    action, n_limit = reported_action(g, rho, m, prob.mean)
    if n_limit:
        flags.append(f"{n_limit} edge terms at zero density read as zero flux")
    if not math.isfinite(action):
        flags.append("action infinite on the final iterate")
    end = prob.rho_b if not prob.free_end else a.rho_b
    res, viol = ce_residual(g, a.rho, a.m, BoundaryPair(prob.rho_a, end))
    if not converged:
        flags.append("maximum number of iterations reached")
    return GeodesicSolution(
        graph=g, grid=prob.grid, rho=rho, m=m,
        distance=math.sqrt(action) if math.isfinite(action) else math.inf,
        action=action, iterations=it, converged=converged, stop_value=stop,
        fixed_point_residual=fpr, ce_residual=float(max(np.abs(res).max(), viol)),
        wall_time=time.perf_counter() - t0, mean=prob.mean.name, config=cfg,
        state=a.copy(), dual=b.copy(), history=history,
        rho_b=None if not prob.free_end else a.rho_b.copy(),
        negative_mass=worst, flags=flags)


def run_chambolle_pock(prob: Problem, cfg: SolverConfig, a0: PrimalState | None = None,
                       b0: DualState | None = None, callback=None) -> GeodesicSolution:
    """Iterate until the density stopping functional drops below ``cfg.tol``."""
    t0 = time.perf_counter()
    lay = prob.layout
    a = prob.initial_state() if a0 is None else PrimalState(lay, a0.data.copy())
    b = lay.zeros() if b0 is None else PrimalState(lay, b0.data.copy())
    a_bar = a.copy()
    a_new = lay.zeros()
    work = lay.zeros()
    sigma, tau, lam = cfg.sigma, cfg.tau, cfg.lam
    rho_sl = lay.slices["rho"]
    w_rho = lay.weights[rho_sl]
    history: list[IterationRecord] = []
    converged = False
    stop = math.inf
    fpr = math.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        work.data[:] = b.data + sigma * a_bar.data
        apply_prox_F_star(prob, sigma, work, out=b)
        work.data[:] = a.data - tau * b.data
        apply_prox_G(prob, tau, work, out=a_new)
        check = it % cfg.check_every == 0
        record = it % cfg.history_stride == 0
        if check or record:
            diff = a_new.data - a.data
            d_rho = diff[rho_sl]
            stop = float(np.dot(w_rho * d_rho, d_rho))
            fpr = math.sqrt(float(np.dot(lay.weights * diff, diff)))
        np.subtract(a_new.data, a.data, out=a_bar.data)
        a_bar.data *= lam
        a_bar.data += a_new.data
        a, a_new = a_new, a
        if record:
            act = discrete_action(prob.graph, a.rho, antisymmetrize(prob.graph, a.m), prob.mean)
            res, _ = ce_residual(prob.graph, a.rho, a.m)
            history.append(IterationRecord(it, stop, fpr, act, float(np.abs(res).max())))
            if callback is not None:
                callback(history[-1])
        if check and it >= cfg.min_iters and stop < cfg.tol:
            converged = True
            break
    log.info("primal-dual stopped after %d iterations (stop=%.3e, converged=%s)",
             it, stop, converged)
    return _finalize(prob, a, b, cfg, it, converged, stop, fpr, history, t0)


def solve_geodesic(g: MarkovGraph, grid: TimeGrid | int, bc: BoundaryPair,
                   cfg: SolverConfig | None = None, warm: GeodesicSolution | None = None,
                   problem: Problem | None = None) -> GeodesicSolution:
    """Discrete geodesic between ``bc.rho_a`` and ``bc.rho_b``."""
    cfg = SolverConfig() if cfg is None else cfg
    BoundaryPair.checked(g, bc.rho_a, bc.rho_b, tol=1e-10)
    prob = problem or Problem(g, grid, bc.rho_a, bc.rho_b, mean=cfg.mean)
    a0 = b0 = None
    if warm is not None and warm.state.layout.size == prob.layout.size:
        a0, b0 = warm.state, warm.dual
    return run_chambolle_pock(prob, cfg, a0, b0)


ENTROPY_PAIRING = {"shannon": "log", "renyi": "geo"}


def solve_free_endpoint(g: MarkovGraph, grid: TimeGrid | int, rho_a, tau_jko: float,
                        cfg: SolverConfig | None = None, entropy: str = "shannon",
                        warm: GeodesicSolution | None = None) -> GeodesicSolution:
    """Minimize ``W_h(rho_a, rho_B)^2 / 2 + tau_jko H(rho_B)`` over ``rho_B``.

    Equivalently ``W_h^2 + 2 tau_jko H`` is minimized by the splitting;
    ``solution.rho_b`` holds the minimizer.  ``entropy`` is ``"shannon"``
    (paired with the logarithmic mean) or ``"renyi"`` (exponent 1/2, paired
    with the geometric mean).
    """
    cfg = SolverConfig() if cfg is None else cfg
    if entropy not in ENTROPY_PAIRING:
        raise ValueError(f"unknown entropy {entropy!r}")
    if tau_jko < 0:
        raise ValueError("tau_jko must be nonnegative")
    rho_a = np.asarray(rho_a, dtype=float)
    if np.any(rho_a < 0) or abs(g.mass(rho_a) - 1.0) > 1e-8:
        raise ValueError("rho_a must be a probability density")
    prob = Problem(g, grid, rho_a, None, mean=cfg.mean, tau_jko=tau_jko, entropy=entropy)
    a0 = b0 = None
    if warm is not None and warm.state.layout.size == prob.layout.size:
        # shift the previous path so that it starts at the new rho_a
        a0 = warm.state.copy()
        shift = rho_a - a0.rho[0]
        a0.rho[:] += shift
        a0.rho_b[:] += shift
        a0.rho_bar[:] += shift
        a0.q[:] += shift
        a0.theta_minus[:] += shift[g.src]
        a0.theta_plus[:] += shift[g.dst]
        b0 = warm.dual
    return run_chambolle_pock(prob, cfg, a0, b0)
