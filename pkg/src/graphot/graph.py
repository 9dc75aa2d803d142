"""Finite state spaces with a reversible Markov kernel.

Node functions are arrays of shape ``(n,)``; edge functions are arrays of
shape ``(E,)`` indexed like :attr:`MarkovGraph.src` / :attr:`MarkovGraph.dst`.
Only the support of the kernel (both orientations of every edge) is stored,
and every leading axis in front of the node or edge axis is treated as a
batch axis by the operators below.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

BALANCE_RTOL = 1e-12
NORMALIZATION_TOL = 1e-12
LOADER_RENORMALIZE_TOL = 1e-6


class GraphError(ValueError):
    """Input does not describe an irreducible reversible Markov chain."""


@dataclass(frozen=True, eq=False)
class MarkovGraph:
    """Vertex weights ``pi`` and a sparse reversible kernel ``Q``.

    Edges are kept sorted by ``(src, dst)``; ``rev[e]`` is the index of the
    reversed edge so that ``f[rev]`` maps ``f(x, y)`` to ``f(y, x)``.
    """

    pi: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rate: np.ndarray
    labels: tuple[str, ...] | None = None
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        rate = np.asarray(self.rate, dtype=float)
        n = pi.size
        if n == 0:
            raise GraphError("graph needs at least one vertex")
        if not (src.shape == dst.shape == rate.shape) or src.ndim != 1:
            raise GraphError("edge arrays must be one-dimensional and of equal length")
        if np.any(pi <= 0):
            raise GraphError("stationary weights must be positive")
        if abs(pi.sum() - 1.0) > NORMALIZATION_TOL:
            raise GraphError(f"stationary weights sum to {pi.sum()!r}, not 1")
        if src.size and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n):
            raise GraphError("edge endpoint out of range")
        if np.any(src == dst):
            raise GraphError("self-loops are not allowed")
        if np.any(rate <= 0):
            raise GraphError("edge rates must be positive")

        order = np.lexsort((dst, src))
        src, dst, rate = src[order], dst[order], rate[order]
        key = src * n + dst
        if np.any(np.diff(key) == 0):
            raise GraphError("duplicate edge")
        rev = np.searchsorted(key, dst * n + src)
        rev = np.minimum(rev, max(key.size - 1, 0))
        if key.size and np.any(key[rev] != dst * n + src):
            raise GraphError("kernel support is not symmetric")

        flux = pi[src] * rate
        if np.any(np.abs(flux - flux[rev]) > BALANCE_RTOL * np.maximum(flux, flux[rev])):
            raise GraphError("detailed balance pi(x)Q(x,y) = pi(y)Q(y,x) violated")

        if n > 1:
            adj = sp.coo_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
            ncomp, _ = connected_components(adj, directed=True, connection="strong")
            if ncomp != 1:
                raise GraphError("kernel is not irreducible (graph not connected)")

        for name, value in (("pi", pi), ("src", src), ("dst", dst), ("rate", rate)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        rev.setflags(write=False)
        object.__setattr__(self, "rev", rev)
        if self.labels is not None:
            labels = tuple(str(x) for x in self.labels)
            if len(labels) != n:
                raise GraphError("one label per vertex required")
            object.__setattr__(self, "labels", labels)

    # -- sizes and weights -------------------------------------------------

    @property
    def n(self) -> int:
        return self.pi.size

    vertex_count = n

    @property
    def n_edges(self) -> int:
        return self.src.size

    @cached_property
    def edge_weight(self) -> np.ndarray:
        """``Q(x, y) pi(x)`` per stored edge (symmetric under reversal)."""
        return self.rate * self.pi[self.src]

    @cached_property
    def out_rate(self) -> np.ndarray:
        """``sum_y Q(x, y)``."""
        return np.bincount(self.src, weights=self.rate, minlength=self.n)

    @cached_property
    def kernel(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.rate, (self.src, self.dst)), shape=(self.n, self.n))

    @cached_property
    def grad_matrix(self) -> sp.csr_matrix:
        e = np.arange(self.n_edges)
        data = np.concatenate([np.ones(self.n_edges), -np.ones(self.n_edges)])
        return sp.csr_matrix((data, (np.concatenate([e, e]), np.concatenate([self.src, self.dst]))),
                             shape=(self.n_edges, self.n))

    @cached_property
    def div_matrix(self) -> sp.csr_matrix:
        half = 0.5 * self.rate
        rows = np.concatenate([self.src, self.src])
        cols = np.concatenate([self.rev, np.arange(self.n_edges)])
        data = np.concatenate([half, -half])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n_edges))

    @cached_property
    def src_incidence(self) -> sp.csr_matrix:
        """``(n, E)`` matrix summing edge values over outgoing edges."""
        return sp.csr_matrix((np.ones(self.n_edges), (self.src, np.arange(self.n_edges))),
                             shape=(self.n, self.n_edges))

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        return (self.kernel - sp.diags(self.out_rate)).tocsr()

    def edge_list(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(r)) for a, b, r in zip(self.src, self.dst, self.rate)]

    def edge_index(self, x: int, y: int) -> int:
        hit = np.flatnonzero((self.src == x) & (self.dst == y))
        if hit.size == 0:
            raise KeyError((x, y))
        return int(hit[0])

    def mass(self, rho) -> np.ndarray | float:
        """``sum_x rho(x) pi(x)`` along the last axis."""
        return np.asarray(rho) @ self.pi


# ---------------------------------------------------------------------------
# inner products and differential operators
# ---------------------------------------------------------------------------

def _check_last(arr, size, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1:] != (size,):
        raise ValueError(f"{what} has trailing dimension {arr.shape[-1:]}, expected ({size},)")
    return arr


def inner_node(g: MarkovGraph, phi, psi):
    """``<phi, psi>_pi = sum_x phi(x) psi(x) pi(x)``."""
    phi = _check_last(phi, g.n, "phi")
    psi = _check_last(psi, g.n, "psi")
    return (phi * psi) @ g.pi


def inner_edge(g: MarkovGraph, Phi, Psi):
    """``<Phi, Psi>_Q = 1/2 sum_(x,y) Phi Psi Q(x,y) pi(x)``."""
    Phi = _check_last(Phi, g.n_edges, "Phi")
    Psi = _check_last(Psi, g.n_edges, "Psi")
    return 0.5 * ((Phi * Psi) @ g.edge_weight)


def gradient(g: MarkovGraph, psi):
    psi = _check_last(psi, g.n, "psi")
    return psi[..., g.src] - psi[..., g.dst]


def divergence(g: MarkovGraph, Psi):
    """``div Psi(x) = 1/2 sum_y Q(x,y) (Psi(y,x) - Psi(x,y))``."""
    Psi = _check_last(Psi, g.n_edges, "Psi")
    flat = Psi.reshape(-1, g.n_edges)
    out = (g.div_matrix @ flat.T).T
    return out.reshape(Psi.shape[:-1] + (g.n,))


def laplacian(g: MarkovGraph, psi):
    """``(Q - D) psi`` summed edgewise, so constants map to exact zeros."""
    psi = _check_last(psi, g.n, "psi")
    flat = psi.reshape(-1, g.n)
    flux = g.rate * (flat[:, g.dst] - flat[:, g.src])
    out = (g.src_incidence @ flux.T).T
    return out.reshape(psi.shape)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def make_two_node_graph(p: float, q: float) -> MarkovGraph:
    """Two vertices ``a, b`` with ``Q(a,b) = p``, ``Q(b,a) = q``."""
    if not (p > 0 and q > 0):
        raise GraphError("rates p and q must be positive")
    if p > 1 or q > 1:
        log.warning("two-node rates outside (0, 1]: p=%g q=%g", p, q)
    pi = np.array([q / (p + q), p / (p + q)])
    return MarkovGraph(pi, [0, 1], [1, 0], [p, q], labels=("a", "b"))


def _undirected_pairs(adjacency, n=None):
    """Normalize an adjacency description into a sorted set of pairs."""
    if sp.issparse(adjacency) or (isinstance(adjacency, np.ndarray) and adjacency.ndim == 2
                                  and adjacency.shape[0] == adjacency.shape[1]
                                  and n is None and adjacency.dtype != object
                                  and adjacency.shape[1] != 2):
        a = sp.coo_matrix(adjacency)
        n = a.shape[0]
        pairs = {(min(i, j), max(i, j)) for i, j in zip(a.row.tolist(), a.col.tolist()) if i != j}
        return n, sorted(pairs)
    pairs = set()
    for i, j in adjacency:
        i, j = int(i), int(j)
        if i == j:
            raise GraphError("self-loops are not allowed")
        pairs.add((min(i, j), max(i, j)))
    if n is None:
        n = 1 + max(max(pr) for pr in pairs) if pairs else 1
    return n, sorted(pairs)


def make_uniform_edge_graph(adjacency, n: int | None = None, labels=None) -> MarkovGraph:
    """Graph with ``pi(x) = deg(x)/|E|`` and ``Q(x,y) = 1/(pi(x)|E|)``.

    ``adjacency`` is either a square (sparse) matrix or an iterable of
    undirected vertex pairs; ``|E|`` counts directed edges.
    """
    n, pairs = _undirected_pairs(adjacency, n)
    if n == 1:
        raise GraphError("uniform-edge convention needs at least one edge")
    src = [i for i, j in pairs] + [j for i, j in pairs]
    dst = [j for i, j in pairs] + [i for i, j in pairs]
    src = np.array(src)
    dst = np.array(dst)
    n_dir = src.size
    deg = np.bincount(src, minlength=n)
    if np.any(deg == 0):
        raise GraphError("graph has isolated vertices")
    pi = deg / n_dir
    adj = sp.coo_matrix((np.ones(n_dir), (src, dst)), shape=(n, n))
    if connected_components(adj, directed=False)[0] != 1:
        raise GraphError("graph is disconnected")
    rate = 1.0 / (pi[src] * n_dir)
    return MarkovGraph(pi, src, dst, rate, labels=labels)


def triangle() -> MarkovGraph:
    return make_uniform_edge_graph([(0, 1), (1, 2), (0, 2)])


def square_lattice(rows: int, cols: int | None = None) -> MarkovGraph:
    """Rectangular grid; vertex ``(i, j)`` has index ``i * cols + j``."""
    cols = rows if cols is None else cols
    pairs = []
    for i, j in product(range(rows), range(cols)):
        v = i * cols + j
        if j + 1 < cols:
            pairs.append((v, v + 1))
        if i + 1 < rows:
            pairs.append((v, v + cols))
    labels = [f"({i},{j})" for i, j in product(range(rows), range(cols))]
    return make_uniform_edge_graph(pairs, n=rows * cols, labels=labels)


def hypercube(dim: int) -> MarkovGraph:
    """``{0,1}^dim`` with edges between words at Hamming distance one."""
    n = 2 ** dim
    pairs = [(v, v ^ (1 << k)) for v in range(n) for k in range(dim) if v < v ^ (1 << k)]
    labels = [format(v, f"0{dim}b") for v in range(n)]
    return make_uniform_edge_graph(pairs, n=n, labels=labels)


def chain(m: int) -> MarkovGraph:
    """Path ``x_0, ..., x_M`` (``M + 1`` vertices)."""
    if m < 1:
        raise GraphError("chain needs M >= 1")
    return make_uniform_edge_graph([(i, i + 1) for i in range(m)], n=m + 1)


def line5() -> MarkovGraph:
    """Five-vertex line used for the entropy flow experiments.

    Kernel ``Q(x, y) = 1 / (10 w(x))`` with ``w = (1,2,2,2,1)/5``; the
    stationary weights are ``w`` renormalized to ``(1,2,2,2,1)/8``
    (detailed balance is unaffected by the scaling).
    """
    w = np.array([1, 2, 2, 2, 1]) / 5.0
    src = np.array([0, 1, 1, 2, 2, 3, 3, 4])
    dst = np.array([1, 0, 2, 1, 3, 2, 4, 3])
    rate = 1.0 / (10.0 * w[src])
    pi = w / w.sum()
    return MarkovGraph(pi, src, dst, rate,
                       notes=("stationary weights (1,2,2,2,1)/5 renormalized to (1,2,2,2,1)/8",))


def line5_initial_density(g: MarkovGraph | None = None) -> np.ndarray:
    """``(1,1,5,1,1)/10`` rescaled to unit mass for :func:`line5`."""
    g = line5() if g is None else g
    rho = np.array([1, 1, 5, 1, 1]) / 10.0
    return rho / g.mass(rho)


def builtin_graph(spec: str) -> MarkovGraph:
    """Construct a named graph.

    ``two-node(p,q)``, ``triangle``, ``lattice3x3``, ``cube``,
    ``hypercube4``, ``chain(M)``, ``grid2d(M)`` (an ``(M+1) x (M+1)`` grid)
    and ``line5``.
    """
    name = spec.strip().lower().replace(" ", "")
    args: list[float] = []
    if "(" in name:
        if not name.endswith(")"):
            raise GraphError(f"malformed graph name {spec!r}")
        name, raw = name[:-1].split("(", 1)
        try:
            args = [float(a) for a in raw.split(",") if a]
        except ValueError:
            raise GraphError(f"malformed arguments in {spec!r}") from None

    def nargs(k):
        if len(args) != k:
            raise GraphError(f"{name} expects {k} argument(s)")

    if name in ("two-node", "twonode", "two_node"):
        if not args:
            args = [1.0, 1.0]
        nargs(2)
        return make_two_node_graph(*args)
    if name == "triangle":
        nargs(0)
        return triangle()
    if name in ("lattice3x3", "lattice"):
        nargs(0)
        return square_lattice(3)
    if name == "cube":
        nargs(0)
        return hypercube(3)
    if name in ("hypercube4", "hypercube"):
        nargs(0)
        return hypercube(4)
    if name == "chain":
        nargs(1)
        return chain(int(args[0]))
    if name == "grid2d":
        nargs(1)
        return square_lattice(int(args[0]) + 1)
    if name == "line5":
        nargs(0)
        return line5()
    raise GraphError(f"unknown built-in graph {spec!r}")


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def graph_from_dict(data: dict) -> MarkovGraph:
    """Build a graph from the JSON schema.

    ``{"vertices": int, "labels": [...]?, "pi": [...]?, "edges":
    [{"from": i, "to": j, "q": rate}], "convention": "explicit" |
    "uniform-edge"}``
    """
    try:
        n = int(data["vertices"])
        edges = data["edges"]
        convention = data.get("convention", "explicit")
        labels = data.get("labels")
        if convention == "uniform-edge":
            return make_uniform_edge_graph([(e["from"], e["to"]) for e in edges], n=n,
                                           labels=labels)
        if convention != "explicit":
            raise GraphError(f"unknown convention {convention!r}")
        pi = np.asarray(data["pi"], dtype=float)
        src = [int(e["from"]) for e in edges]
        dst = [int(e["to"]) for e in edges]
        rate = [float(e["q"]) for e in edges]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph description: missing or invalid {exc}") from None
    if pi.size != n:
        raise GraphError("length of pi does not match vertex count")
    notes = ()
    total = pi.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        if abs(total - 1.0) > LOADER_RENORMALIZE_TOL:
            raise GraphError(f"pi sums to {total!r}; refusing to renormalize")
        pi = pi / total
        notes = (f"pi renormalized from total {total!r}",)
        log.info("renormalized pi (sum was %r)", total)
    return MarkovGraph(pi, src, dst, rate, labels=labels, notes=notes)


def load_graph(path) -> MarkovGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise GraphError(f"{path}: expected a JSON object")
    return graph_from_dict(data)


def graph_to_dict(g: MarkovGraph) -> dict:
    out = {
        "vertices": g.n,
        "pi": [float(v) for v in g.pi],
        "edges": [{"from": a, "to": b, "q": r} for a, b, r in g.edge_list()],
        "convention": "explicit",
    }
    if g.labels is not None:
        out["labels"] = list(g.labels)
    return out


def dirac(g: MarkovGraph, x: int) -> np.ndarray:
    """Probability density concentrated on vertex ``x``."""
    rho = np.zeros(g.n)
    rho[x] = 1.0 / g.pi[x]
    return rho


def check_density(g: MarkovGraph, rho, tol: float = 1e-12) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (g.n,):
        raise ValueError(f"density has shape {rho.shape}, expected ({g.n},)")
    if np.any(rho < 0):
        raise ValueError("density has negative entries")
    mass = g.mass(rho)
    if not math.isclose(mass, 1.0, rel_tol=0, abs_tol=tol):
        raise ValueError(f"density has mass {mass!r}, expected 1")
    return rho
