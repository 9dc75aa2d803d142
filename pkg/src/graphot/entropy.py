"""Entropy functionals, the JKO scheme and explicit reference flows.

The JKO step ``rho_{k+1} = argmin 1/2 W_h(rho_k, .)^2 + tau H(.)`` is solved by
:func:`graphot.solver.solve_free_endpoint`.  Only two entropy/mean pairings
produce the gradient flows of interest:

* Shannon entropy with the logarithmic mean (heat equation),
* Renyi entropy of order 1/2 with the geometric mean
  (``d_t rho = Laplacian(rho^(1/2))``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import MarkovGraph, laplacian
from .means import get_mean
from .solver import ENTROPY_PAIRING, SolverConfig, solve_free_endpoint
from .timegrid import TimeGrid

log = logging.getLogger(__name__)

__all__ = [
    "EntropyKind",
    "sup_discrepancy",
    "is_nonincreasing",
    "SHANNON",
    "RENYI_HALF",
    "entropy",
    "FlowTrajectory",
    "FlowError",
    "jko_flow",
    "euler_heat_flow",
    "euler_porous_flow",
]

MASS_TOL = 1e-8
# negative mass tolerated in the explicit flows before they are declared unstable
EULER_NEGATIVE_TOL = 1e-12


@dataclass(frozen=True)
class EntropyKind:
    """``tag`` is ``"shannon"`` or ``"renyi"``; ``m`` is the Renyi exponent."""

    tag: str = "shannon"
    m: float = 0.5

    def __post_init__(self):
        if self.tag not in ("shannon", "renyi"):
            raise ValueError(f"unknown entropy {self.tag!r}")
        if self.tag == "renyi" and not 0.0 < self.m < 1.0:
            raise ValueError("Renyi exponent must lie in (0, 1)")

    @classmethod
    def parse(cls, spec) -> "EntropyKind":
        """Accept an instance, ``"shannon"``, ``"renyi"`` or ``"renyi(0.5)"``."""
        if isinstance(spec, cls):
            return spec
        text = str(spec).strip().lower()
        if text.startswith("renyi(") and text.endswith(")"):
            return cls("renyi", float(text[6:-1]))
        return cls(text)

    @property
    def label(self) -> str:
        return "shannon" if self.tag == "shannon" else f"renyi({self.m:g})"

    def paired_mean(self) -> str:
        """Mean for which the JKO scheme discretizes the corresponding flow."""
        if self.tag == "renyi" and self.m != 0.5:
            raise ValueError("the JKO scheme supports the Renyi entropy of order 1/2 only")
        return ENTROPY_PAIRING[self.tag]


SHANNON = EntropyKind("shannon")
RENYI_HALF = EntropyKind("renyi", 0.5)


def entropy(kind, rho, pi) -> float:
    """``sum rho log rho pi`` or ``(m - 1)^-1 sum rho^m pi`` (``0 log 0 = 0``)."""
    kind = EntropyKind.parse(kind)
    rho = np.asarray(rho, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(rho < 0):
        raise ValueError("entropy of a density with negative entries")
    if kind.tag == "shannon":
        terms = np.zeros_like(rho)
        pos = rho > 0
        terms[pos] = rho[pos] * np.log(rho[pos])
        return float(terms @ pi)
    return float((rho ** kind.m) @ pi / (kind.m - 1.0))


class FlowError(RuntimeError):
    """Raised when a flow is aborted; ``partial`` holds the steps computed so far."""

    def __init__(self, message: str, partial: "FlowTrajectory"):
        super().__init__(message)
        self.partial = partial


@dataclass
class FlowTrajectory:
    """States of a gradient flow at increasing times."""

    kind: EntropyKind
    pi: np.ndarray
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    entropy_values: list[float] = field(default_factory=list)
    method: str = ""
    iterations: list[int] = field(default_factory=list)

    def append(self, t: float, rho, iterations: int = 0):
        rho = np.asarray(rho, dtype=float).copy()
        self.times.append(float(t))
        self.states.append(rho)
        self.entropy_values.append(entropy(self.kind, np.maximum(rho, 0.0), self.pi))
        self.iterations.append(int(iterations))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def array(self) -> np.ndarray:
        """States stacked as ``(steps + 1, n)``."""
        return np.array(self.states)

    def rows(self):
        for k, (t, rho, ent) in enumerate(zip(self.times, self.states, self.entropy_values)):
            for v, r in enumerate(rho):
                yield k, t, v, float(r), ent

    def write_csv(self, path) -> Path:
        """Columns ``step, t, vertex, rho, entropy`` at 17 significant digits."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "vertex", "rho", "entropy"])
            w.writerows([k, f"{t:.17g}", v, f"{r:.17g}", f"{e:.17g}"]
                         for k, t, v, r, e in self.rows())
        return path


def _check_density(g: MarkovGraph, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (g.n,):
        raise ValueError(f"density has shape {rho.shape}, expected ({g.n},)")
    if np.any(rho < 0):
        raise ValueError("density has negative entries")
    if abs(g.mass(rho) - 1.0) > MASS_TOL:
        raise ValueError(f"density has mass {g.mass(rho)!r}, expected 1")
    return rho


def jko_flow(g: MarkovGraph, rho0, tau_jko: float, n_steps: int,
             grid: TimeGrid | int = 100, cfg: SolverConfig | None = None,
             kind="shannon", mean: str | None = None, callback=None) -> FlowTrajectory:
    """``n_steps`` JKO steps of size ``tau_jko`` for the entropy ``kind``.

    ``mean`` defaults to the paired mean (and overrides ``cfg.mean``); any
    other choice is rejected.  Each inner solve is warm started from the
    previous one.  Without ``cfg`` the default stopping threshold is scaled
    by ``tau_jko^2``.  If an inner solve fails to converge a :class:`FlowError`
    carrying the partial trajectory is raised.
    """
    kind = EntropyKind.parse(kind)
    paired = kind.paired_mean()
    mean = paired if mean is None else get_mean(mean).name
    if mean != paired:
        raise ValueError(f"{kind.label} entropy must be paired with the {paired} mean; "
                         f"the {mean} mean does not yield its gradient flow")
    if tau_jko <= 0:
        raise ValueError("tau_jko must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if cfg is None:
        # one step moves the density by O(tau), so the absolute threshold on
        # the squared iterate change is scaled accordingly
        base = SolverConfig(mean=mean)
        cfg = base.replace(tol=base.tol * tau_jko ** 2)
    else:
        cfg = cfg.replace(mean=mean)
    rho = _check_density(g, rho0)
    traj = FlowTrajectory(kind, g.pi, method=f"jko-{mean}")
    traj.append(0.0, rho)
    warm = None
    for k in range(1, n_steps + 1):
        sol = solve_free_endpoint(g, grid, rho, tau_jko, cfg, entropy=kind.tag, warm=warm)
        if not sol.converged:
            raise FlowError(f"inner solve of step {k} did not converge "
                            f"({sol.iterations} iterations)", traj)
        rho = np.maximum(sol.rho_b, 0.0)
        rho /= g.mass(rho)
        traj.append(k * tau_jko, rho, sol.iterations)
        log.info("JKO step %d: %d iterations, entropy %.12g", k, sol.iterations,
                 traj.entropy_values[-1])
        if callback is not None:
            callback(k, sol)
        warm = sol
    return traj


def _euler(g: MarkovGraph, rho0, dt: float, n_steps: int, rhs, kind, method):
    rho = _check_density(g, rho0).copy()
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt * g.out_rate.max() >= 1.0:
        raise ValueError(f"dt = {dt} violates dt * max_x sum_y Q(x, y) < 1")
    traj = FlowTrajectory(kind, g.pi, method=method)
    traj.append(0.0, rho)
    for k in range(1, n_steps + 1):
        rho = rho + dt * rhs(rho)
        if rho.min() < -EULER_NEGATIVE_TOL:
            raise FlowError(f"explicit Euler lost positivity at step {k} "
                            f"(min {rho.min():.3e})", traj)
        rho = np.maximum(rho, 0.0)
        traj.append(k * dt, rho)
    return traj


def euler_heat_flow(g: MarkovGraph, rho0, dt: float, n_steps: int) -> FlowTrajectory:
    """``rho_{k+1} = rho_k + dt Laplacian(rho_k)``."""
    return _euler(g, rho0, dt, n_steps, lambda r: laplacian(g, r), SHANNON, "euler-heat")


def euler_porous_flow(g: MarkovGraph, rho0, dt: float, n_steps: int,
                      m: float = 0.5) -> FlowTrajectory:
    """``rho_{k+1} = rho_k + dt Laplacian(rho_k^m)``."""
    kind = EntropyKind("renyi", m)
    return _euler(g, rho0, dt, n_steps, lambda r: laplacian(g, r ** m), kind,
                  f"euler-porous({m:g})")


def sup_discrepancy(a: FlowTrajectory, b: FlowTrajectory) -> float:
    """Max over common steps and vertices of ``|rho_a - rho_b|``."""
    k = min(len(a), len(b))
    if k == 0:
        return 0.0
    if not np.allclose(a.times[:k], b.times[:k], rtol=0, atol=1e-12):
        raise ValueError("trajectories are not aligned in time")
    return float(np.max(np.abs(a.array[:k] - b.array[:k])))


def is_nonincreasing(values, slack: float = 1e-10) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) <= slack)) if v.size > 1 else True
