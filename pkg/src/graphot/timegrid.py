"""Piecewise affine / piecewise constant discretization of the unit time interval.

Shapes used throughout:

* nodal path ``rho``: ``(N + 1, n)``, value at ``t_i = i h``
* interval node field: ``(N, n)``, constant on ``[t_i, t_{i+1})``
* interval edge field: ``(N, E)``
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import MarkovGraph, divergence
from .means import theta_array

__all__ = [
    "TimeGrid",
    "BoundaryPair",
    "avg_h",
    "time_derivative",
    "lagrange_interpolate",
    "ce_residual",
    "alpha",
    "edge_action_phi",
    "discrete_action",
    "antisymmetrize",
    "linear_path",
    "write_trajectory",
    "read_trajectory",
]

MASS_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``N`` intervals on ``[0, 1]``."""

    n_intervals: int

    def __post_init__(self):
        if int(self.n_intervals) != self.n_intervals or self.n_intervals < 1:
            raise ValueError("number of intervals must be a positive integer")

    @property
    def N(self) -> int:
        return self.n_intervals

    @property
    def h(self) -> float:
        return 1.0 / self.n_intervals

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_intervals + 1) / self.n_intervals

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_intervals) + 0.5) / self.n_intervals


@dataclass(frozen=True)
class BoundaryPair:
    """Endpoint densities; both must be probability densities w.r.t. ``pi``."""

    rho_a: np.ndarray
    rho_b: np.ndarray

    @classmethod
    def checked(cls, g: MarkovGraph, rho_a, rho_b, tol: float = MASS_TOL) -> "BoundaryPair":
        out = []
        for name, rho in (("rho_A", rho_a), ("rho_B", rho_b)):
            rho = np.asarray(rho, dtype=float)
            if rho.shape != (g.n,):
                raise ValueError(f"{name} has shape {rho.shape}, expected ({g.n},)")
            if np.any(rho < 0):
                raise ValueError(f"{name} has negative entries")
            mass = g.mass(rho)
            if abs(mass - 1.0) > tol:
                raise ValueError(f"{name} has mass {mass!r}, expected 1")
            out.append(rho)
        return cls(*out)


def avg_h(rho):
    """Interval midpoints of a nodal path."""
    rho = np.asarray(rho, dtype=float)
    return 0.5 * (rho[1:] + rho[:-1])


def time_derivative(rho):
    """Forward difference quotient per interval."""
    rho = np.asarray(rho, dtype=float)
    n_int = rho.shape[0] - 1
    return (rho[1:] - rho[:-1]) * n_int


def lagrange_interpolate(samples, grid: TimeGrid | None = None) -> np.ndarray:
    """Nodal path with the given values at ``t_0, ..., t_N``.

    ``samples`` is either an array of shape ``(N + 1, ...)`` or a callable
    evaluated at the grid nodes (``grid`` required then).
    """
    if callable(samples):
        if grid is None:
            raise ValueError("a grid is required to sample a callable")
        return np.array([np.asarray(samples(t), dtype=float) for t in grid.nodes])
    arr = np.array(samples, dtype=float)
    if grid is not None and arr.shape[0] != grid.N + 1:
        raise ValueError(f"expected {grid.N + 1} samples, got {arr.shape[0]}")
    return arr


def linear_path(rho_a, rho_b, grid: TimeGrid) -> np.ndarray:
    t = grid.nodes[:, None]
    return (1.0 - t) * np.asarray(rho_a, dtype=float) + t * np.asarray(rho_b, dtype=float)


def ce_residual(g: MarkovGraph, rho, m, bc: BoundaryPair | None = None):
    """Return ``(d_t rho + div m, endpoint deviation)``.

    The deviation is the max-norm distance of the endpoints from ``bc``
    (``0.0`` when no boundary data is given).
    """
    rho = np.asarray(rho, dtype=float)
    m = np.asarray(m, dtype=float)
    if rho.ndim != 2 or rho.shape[1] != g.n:
        raise ValueError(f"rho has shape {rho.shape}, expected (N+1, {g.n})")
    if m.shape != (rho.shape[0] - 1, g.n_edges):
        raise ValueError(f"m has shape {m.shape}, expected ({rho.shape[0] - 1}, {g.n_edges})")
    res = time_derivative(rho) + divergence(g, m)
    viol = 0.0
    if bc is not None:
        viol = max(np.max(np.abs(rho[0] - bc.rho_a)), np.max(np.abs(rho[-1] - bc.rho_b)))
    return res, float(viol)


def edge_action_phi(vartheta, m):
    """``m^2 / vartheta`` extended by ``0`` at the origin and ``+inf`` elsewhere."""
    vt = np.asarray(vartheta, dtype=float)
    m = np.asarray(m, dtype=float)
    vt, m = np.broadcast_arrays(vt, m)
    out = np.full(vt.shape, np.inf)
    pos = vt > 0
    out[pos] = m[pos] ** 2 / vt[pos]
    out[(vt == 0) & (m == 0)] = 0.0
    return float(out) if out.ndim == 0 else out


def alpha(s, t, m, kind="log"):
    """Local action ``m^2 / theta(s, t)``; ``+inf`` for negative arguments."""
    th = theta_array(kind, s, t)
    return edge_action_phi(th, m)


def discrete_action(g: MarkovGraph, rho, m, kind="log") -> float:
    """``h/2 sum_i sum_e alpha(avg rho(src), avg rho(dst), m) Q pi(src)``."""
    rho = np.asarray(rho, dtype=float)
    m = np.asarray(m, dtype=float)
    n_int = rho.shape[0] - 1
    if m.shape != (n_int, g.n_edges):
        raise ValueError(f"m has shape {m.shape}, expected ({n_int}, {g.n_edges})")
    mid = avg_h(rho)
    a = alpha(mid[:, g.src], mid[:, g.dst], m, kind)
    if np.isinf(a).any():
        return math.inf
    return float(0.5 / n_int * np.sum(a @ g.edge_weight))


def antisymmetrize(g: MarkovGraph, m):
    """``(m(x, y) - m(y, x)) / 2``."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m - m[..., g.rev])


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

def trajectory_records(g: MarkovGraph, rho, m=None):
    """Long-format rows for densities and (optionally) momenta."""
    rho = np.asarray(rho, dtype=float)
    n_int = rho.shape[0] - 1
    dens = [(i, i / n_int, v, float(rho[i, v])) for i in range(n_int + 1) for v in range(g.n)]
    mom = []
    if m is not None:
        m = np.asarray(m, dtype=float)
        mom = [(i, (i + 0.5) / n_int, int(g.src[e]), int(g.dst[e]), float(m[i, e]))
               for i in range(n_int) for e in range(g.n_edges)]
    return dens, mom


def write_trajectory(path, g: MarkovGraph, rho, m=None, fmt: str = "csv") -> list[Path]:
    """Write densities (and momenta) to ``path``.

    CSV output produces ``<stem>_rho.csv`` and ``<stem>_m.csv``; JSON writes
    a single file holding both tables.  Values use 17 significant digits.
    """
    path = Path(path)
    dens, mom = trajectory_records(g, rho, m)
    if fmt == "json":
        payload = {
            "rho": [dict(zip(("t_index", "t", "vertex", "rho"), r)) for r in dens],
            "m": [dict(zip(("t_index", "t", "from", "to", "m"), r)) for r in mom],
        }
        path.write_text(json.dumps(payload, indent=1))
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    stem = path.with_suffix("")
    p_rho = stem.parent / f"{stem.name}_rho.csv"
    p_m = stem.parent / f"{stem.name}_m.csv"
    with open(p_rho, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_index", "t", "vertex", "rho"])
        w.writerows([i, f"{t:.17g}", v, f"{r:.17g}"] for i, t, v, r in dens)
    written = [p_rho]
    if m is not None:
        with open(p_m, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_index", "t", "from", "to", "m"])
            w.writerows([i, f"{t:.17g}", a, b, f"{x:.17g}"] for i, t, a, b, x in mom)
        written.append(p_m)
    return written


def _table_to_arrays(g, rows_rho, rows_m):
    n_int = max(int(r["t_index"]) for r in rows_rho)
    rho = np.zeros((n_int + 1, g.n))
    for r in rows_rho:
        rho[int(r["t_index"]), int(r["vertex"])] = float(r["rho"])
    if not rows_m:
        return rho, None
    m = np.zeros((n_int, g.n_edges))
    key = {(int(a), int(b)): e for e, (a, b) in enumerate(zip(g.src, g.dst))}
    for r in rows_m:
        m[int(r["t_index"]), key[int(r["from"]), int(r["to"])]] = float(r["m"])
    return rho, m


def read_trajectory(path, g: MarkovGraph):
    """Inverse of :func:`write_trajectory`; returns ``(rho, m or None)``."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return _table_to_arrays(g, data["rho"], data.get("m", []))
    stem = path.with_suffix("")
    if stem.name.endswith("_rho") or stem.name.endswith("_m"):
        stem = stem.parent / stem.name.rsplit("_", 1)[0]
    p_rho = stem.parent / f"{stem.name}_rho.csv"
    p_m = stem.parent / f"{stem.name}_m.csv"
    with open(p_rho) as fh:
        rows_rho = list(csv.DictReader(fh))
    rows_m = []
    if p_m.exists():
        with open(p_m) as fh:
            rows_m = list(csv.DictReader(fh))
    return _table_to_arrays(g, rows_rho, rows_m)


def format_table(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
