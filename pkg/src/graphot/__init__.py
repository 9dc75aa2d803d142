"""Discrete transport distances on graphs with reversible Markov kernels.

The distance is computed by a primal-dual proximal splitting of the
time-discrete Benamou-Brenier problem; the free-endpoint variant drives a
JKO scheme for entropy gradient flows.
"""

from .entropy import (EntropyKind, FlowTrajectory, entropy, euler_heat_flow,
                      euler_porous_flow, jko_flow)
from .graph import (GraphError, MarkovGraph, builtin_graph, dirac, load_graph,
                    make_two_node_graph, make_uniform_edge_graph)
from .means import theta
from .solver import GeodesicSolution, SolverConfig, solve_free_endpoint, solve_geodesic
from .timegrid import BoundaryPair, TimeGrid

__all__ = [
    "BoundaryPair",
    "EntropyKind",
    "FlowTrajectory",
    "GeodesicSolution",
    "GraphError",
    "MarkovGraph",
    "SolverConfig",
    "TimeGrid",
    "builtin_graph",
    "dirac",
    "entropy",
    "euler_heat_flow",
    "euler_porous_flow",
    "jko_flow",
    "load_graph",
    "make_two_node_graph",
    "make_uniform_edge_graph",
    "solve_free_endpoint",
    "solve_geodesic",
    "theta",
]

__version__ = "0.1.0"
