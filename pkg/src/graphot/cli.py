"""``graphot`` command line front end.

Exit codes: ``0`` success, ``2`` invalid input, ``3`` non-convergence (or a
failed validation suite, which exits ``1``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .entropy import EntropyKind, FlowError, euler_heat_flow, euler_porous_flow, jko_flow
from .graph import GraphError, MarkovGraph, builtin_graph, dirac, load_graph
from .solver import SolverConfig, solve_geodesic
from .timegrid import BoundaryPair, TimeGrid, write_trajectory

log = logging.getLogger("graphot")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3


class InputError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("GRAPHOT_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _load_graph(args) -> MarkovGraph:
    if args.graph and args.builtin:
        raise InputError("use either --graph or --builtin, not both")
    if args.graph:
        return load_graph(args.graph)
    return builtin_graph(args.builtin or "two-node(1,1)")


def _vertex(g: MarkovGraph, token: str) -> int:
    if g.labels is not None and token in g.labels:
        return g.labels.index(token)
    try:
        v = int(token)
    except ValueError:
        raise InputError(f"unknown vertex {token!r}") from None
    if not 0 <= v < g.n:
        raise InputError(f"vertex {v} out of range")
    return v


def parse_density(g: MarkovGraph, text: str | None, what: str) -> np.ndarray:
    """Density from a file, inline JSON, ``uniform`` or ``dirac:<vertex>``.

    JSON may be a list (vertex order) or an object keyed by vertex label or
    index; other files are read as whitespace or comma separated numbers.
    """
    if text is None:
        raise InputError(f"{what} is required")
    text = text.strip()
    if text == "uniform":
        return np.ones(g.n)
    if text.startswith("dirac:"):
        return dirac(g, _vertex(g, text[6:]))
    path = Path(text)
    if path.exists():
        raw = path.read_text()
        try:
            data = json.loads(raw)
        except json.JSONDecodeError:
            try:
                data = [float(x) for x in raw.replace(",", " ").split()]
            except ValueError:
                raise InputError(f"cannot read {what} from {path}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            raise InputError(f"{what} is neither a file nor valid JSON: {text!r}") from None
    if isinstance(data, dict):
        rho = np.zeros(g.n)
        for key, val in data.items():
            rho[_vertex(g, str(key))] = float(val)
    else:
        rho = np.asarray(data, dtype=float)
    if rho.shape != (g.n,):
        raise InputError(f"{what} has {rho.size} entries, graph has {g.n} vertices")
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise InputError(f"{what} must be finite and nonnegative")
    mass = g.mass(rho)
    if abs(mass - 1.0) > 1e-10:
        raise InputError(f"{what} has mass {mass!r}; densities must satisfy sum rho pi = 1")
    return rho


def _config(args) -> SolverConfig:
    base = SolverConfig()
    changes = {"mean": args.mean}
    for name, attr in (("sigma", "sigma"), ("tau", "tau"), ("lam", "lam"), ("tol", "tol"),
                       ("max_iters", "max_iters")):
        val = getattr(args, name)
        if val is not None:
            changes[attr] = val
    if args.sigma is not None and args.tau is None:
        changes["tau"] = 0.99 / args.sigma
    elif args.tau is not None and args.sigma is None:
        changes["sigma"] = 0.99 / args.tau
    return base.replace(**changes)


def _set_threads(k: int | None):
    if k is None:
        return
    if k < 1:
        raise InputError("--threads must be positive")
    import numba

    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _solve(args):
    g = _load_graph(args)
    rho_a = parse_density(g, args.rho_a, "--rho-a")
    rho_b = parse_density(g, args.rho_b, "--rho-b")
    cfg = _config(args)
    sol = solve_geodesic(g, TimeGrid(args.n), BoundaryPair(rho_a, rho_b), cfg)
    return g, sol


def _print_summary(sol):
    print(f"distance          {sol.distance:.12g}")
    print(f"action            {sol.action:.12g}")
    print(f"iterations        {sol.iterations}")
    print(f"converged         {sol.converged}")
    print(f"stop value        {sol.stop_value:.3e}")
    print(f"ce residual       {sol.ce_residual:.3e}")
    print(f"wall time         {sol.wall_time:.2f}s")
    for flag in sol.flags:
        print(f"note              {flag}")


def cmd_distance(args) -> int:
    _, sol = _solve(args)
    _print_summary(sol)
    if args.out:
        _write_json(args.out, sol.report())
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def cmd_geodesic(args) -> int:
    g, sol = _solve(args)
    _print_summary(sol)
    out = Path(args.out or "geodesic")
    files = write_trajectory(out, g, sol.rho, sol.m, fmt=args.format)
    report = out.with_suffix("").parent / f"{out.with_suffix('').name}_report.json"
    _write_json(report, sol.report())
    for f in [*files, report]:
        print(f"wrote             {f}")
    return EXIT_OK if sol.converged else EXIT_NONCONVERGED


def cmd_jko(args) -> int:
    g = _load_graph(args)
    rho0 = parse_density(g, args.rho_a, "--rho-a")
    kind = EntropyKind.parse(args.entropy)
    mean = args.mean or kind.paired_mean()
    cfg = None
    if any(getattr(args, k) is not None for k in ("sigma", "tau", "lam", "tol", "max_iters")):
        args.mean = mean
        cfg = _config(args)
    out = Path(args.out or "jko.csv")
    status = EXIT_OK
    try:
        traj = jko_flow(g, rho0, args.tau_jko, args.steps, TimeGrid(args.n), cfg,
                        kind=kind, mean=mean)
    except FlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        traj, status = exc.partial, EXIT_NONCONVERGED
    traj.write_csv(out)
    print(f"wrote             {out}")
    if args.euler:
        if kind.tag == "shannon":
            ref = euler_heat_flow(g, rho0, args.tau_jko, args.steps)
        else:
            ref = euler_porous_flow(g, rho0, args.tau_jko, args.steps, kind.m)
        ref_out = out.with_name(f"{out.stem}_euler{out.suffix or '.csv'}")
        ref.write_csv(ref_out)
        print(f"wrote             {ref_out}")
    return status


def cmd_validate(args) -> int:
    from .validation import SUITES, run_suite

    if args.suite not in SUITES:
        raise InputError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    results = run_suite(args.suite)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return EXIT_OK if n_pass == len(results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("graph")
    src.add_argument("--graph", help="graph JSON file")
    src.add_argument("--builtin", help="named graph, e.g. cube, chain(8), two-node(1,3)")
    common.add_argument("--n", type=int, default=100, help="number of time intervals")
    common.add_argument("--sigma", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=int)

    p = argparse.ArgumentParser(prog="graphot",
                                description="Transport distances and geodesics on graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    def boundary(sp, need_b=True):
        sp.add_argument("--rho-a", required=True,
                        help="file, inline JSON, 'uniform' or 'dirac:<vertex>'")
        if need_b:
            sp.add_argument("--rho-b", required=True, help="as --rho-a")

    d = sub.add_parser("distance", parents=[common], help="discrete transport distance")
    boundary(d)
    d.add_argument("--mean", choices=["log", "geo"], default="log")
    d.add_argument("--format", choices=["json"], default="json")
    d.set_defaults(func=cmd_distance)

    gd = sub.add_parser("geodesic", parents=[common], help="discrete geodesic trajectory")
    boundary(gd)
    gd.add_argument("--mean", choices=["log", "geo"], default="log")
    gd.add_argument("--format", choices=["csv", "json"], default="csv")
    gd.set_defaults(func=cmd_geodesic)

    j = sub.add_parser("jko", parents=[common], help="JKO entropy gradient flow")
    boundary(j, need_b=False)
    j.add_argument("--mean", choices=["log", "geo"], default=None,
                   help="defaults to the mean paired with the entropy")
    j.add_argument("--entropy", default="shannon", help="shannon or renyi")
    j.add_argument("--tau-jko", type=float, default=1e-3)
    j.add_argument("--steps", type=int, default=50)
    j.add_argument("--euler", action="store_true",
                   help="also write the explicit Euler reference flow")
    j.add_argument("--format", choices=["csv"], default="csv")
    j.set_defaults(func=cmd_jko)

    v = sub.add_parser("validate", help="run an acceptance suite")
    v.add_argument("suite", help="two-node, metric, cube, chain, projections, flows, "
                                 "identities or all")
    v.add_argument("--threads", type=int)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (InputError, GraphError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
