import math
from dataclasses import replace

import numpy as np
import pytest

from graphot.graph import builtin_graph, dirac, make_two_node_graph
from graphot.means import LOG, theta, theta_partials
from graphot.oracles import (dense_project_B, dense_project_ce, dense_project_K,
                             normal_cone_residual_B, normal_cone_residual_K)
from graphot.prox import (ENTROPY_FLOOR, CEProjector, JavgProjector, entropy_prox_primal, project_Jeq,
                          project_Jpm, project_K, project_K_field, project_K_top,
                          project_parabola_B, prox_dual_edge_action, prox_dual_entropy,
                          prox_dual_Javg, prox_dual_Jpm)
from graphot.timegrid import TimeGrid, avg_h, ce_residual, linear_path


def _random_k_inputs(rng, n):
    return rng.normal(size=(n, 3)) * rng.choice([0.1, 1.0, 10.0], size=(n, 1))


# ---------------------------------------------------------------------------
# parabola set B
# ---------------------------------------------------------------------------

def test_project_B_examples():
    assert project_parabola_B(-1.0, 0.0) == (-1.0, 0.0)
    assert project_parabola_B(1.0, 0.0) == (0.0, 0.0)
    p, q = project_parabola_B(0.0, 2.0)
    assert q == pytest.approx(1.5418339941184962, rel=1e-13)
    assert p == pytest.approx(-0.5943130163548488, rel=1e-13)
    assert q ** 3 / 4 + 2 * q - 4 == pytest.approx(0.0, abs=1e-13)
    p2, q2 = project_parabola_B(0.0, -2.0)
    assert (p2, q2) == (p, -q)


def test_project_B_optimality_and_oracle():
    rng = np.random.default_rng(0)
    for p, q in rng.normal(scale=3.0, size=(300, 2)):
        pr = project_parabola_B(p, q)
        assert pr[0] + pr[1] ** 2 / 4 <= 1e-12 * max(1.0, abs(pr[0]))
        assert normal_cone_residual_B((p, q), pr) <= 1e-8
    for p, q in rng.normal(scale=2.0, size=(20, 2)):
        np.testing.assert_allclose(project_parabola_B(p, q), dense_project_B(p, q), atol=1e-6)


def test_prox_dual_edge_action_is_pointwise_and_sigma_free():
    rng = np.random.default_rng(1)
    p, q = rng.normal(size=(2, 4, 6))
    outs = [prox_dual_edge_action(p, q, sigma) for sigma in (0.1, 1.0, 10.0)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o[0], outs[0][0])
        np.testing.assert_array_equal(o[1], outs[0][1])
    assert (outs[0][0][2, 3], outs[0][1][2, 3]) == project_parabola_B(p[2, 3], q[2, 3])
    inside_p = -np.abs(q) ** 2
    ip, iq = prox_dual_edge_action(inside_p, q)
    np.testing.assert_array_equal(ip, inside_p)
    np.testing.assert_array_equal(iq, q)
    with pytest.raises(ValueError):
        prox_dual_edge_action(p, q[:2])


# ---------------------------------------------------------------------------
# subgraph K of a mean
# ---------------------------------------------------------------------------

def test_project_K_examples():
    p = (0.3, 0.5, 0.2)
    assert theta("log", 0.3, 0.5) == pytest.approx(0.39152, abs=1e-5)
    np.testing.assert_array_equal(project_K("log", p), p)
    np.testing.assert_array_equal(project_K("log", (1.0, 1.0, -2.0)), (1.0, 1.0, 0.0))
    np.testing.assert_array_equal(project_K("geo", (-1.0, 2.0, -2.0)), (0.0, 2.0, 0.0))
    for kind in ("log", "geo"):
        np.testing.assert_array_equal(project_K(kind, (-1.0, -1.0, 1.0)), 0.0)
        np.testing.assert_allclose(project_K(kind, (1.0, 1.0, 1.3)), 1.1, rtol=1e-13)
        np.testing.assert_allclose(project_K_top(kind, (1.0, 1.0, 1.3)), 1.1, rtol=1e-13)


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_top_symmetry_and_limit(kind):
    for a, eps in ((0.5, 0.2), (3.0, 1e-6), (7.0, 5.0)):
        out = project_K_top(kind, (a, a, a + eps))
        assert out[0] == pytest.approx(out[1], rel=1e-13)
        assert out[2] == pytest.approx(out[0], rel=1e-12)
    np.testing.assert_allclose(project_K_top(kind, (1.0, 1.0, 1.0 + 1e-9)), 1.0, atol=1e-9)


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_collinearity(kind):
    rng = np.random.default_rng(2)
    for p in _random_k_inputs(rng, 200):
        pr = project_K(kind, p)
        if pr[2] <= 0 or pr[0] <= 0 or pr[1] <= 0 or np.allclose(pr, p):
            continue
        # the displacement is parallel to the surface normal
        d = p - pr
        d1, d2 = theta_partials(kind, pr[0], pr[1])
        n = np.array([-d1, -d2, 1.0])
        cross = np.linalg.norm(np.cross(d, n)) / max(1.0, np.linalg.norm(d) * np.linalg.norm(n))
        assert cross <= 1e-8


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_normal_cone(kind):
    rng = np.random.default_rng(3)
    P = _random_k_inputs(rng, 1000)
    s, t = rng.exponential(size=(2, 100))
    v = rng.random(100) * np.array([theta(kind, a, b) for a, b in zip(s, t)])
    Kpts = np.stack([s, t, v], axis=1)
    worst = 0.0
    for p in P:
        pr = project_K(kind, p)
        worst = max(worst, float(np.max((Kpts - pr) @ (p - pr))))
    assert worst <= 1e-9


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_cone_optimality(kind):
    rng = np.random.default_rng(4)
    for p in _random_k_inputs(rng, 60):
        assert normal_cone_residual_K(kind, p, project_K(kind, p)) <= 1e-8


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_matches_dense_oracle(kind):
    rng = np.random.default_rng(5)
    worst = 0.0
    for p in _random_k_inputs(rng, 200):
        worst = max(worst, float(np.max(np.abs(project_K(kind, p) - dense_project_K(kind, p)))))
    assert worst <= 1e-4


@pytest.mark.parametrize("kind", ["log", "geo"])
def test_project_K_field_idempotent_and_nonexpansive(kind):
    rng = np.random.default_rng(6)
    a = _random_k_inputs(rng, 500).T
    b = _random_k_inputs(rng, 500).T
    pa = np.array(project_K_field(kind, *a))
    pb = np.array(project_K_field(kind, *b))
    for k in (0, 17, 499):
        np.testing.assert_array_equal(pa[:, k], project_K(kind, a[:, k]))
    np.testing.assert_allclose(np.array(project_K_field(kind, *pa)), pa, atol=1e-12)
    diff = pa - pb
    lhs = np.sum(diff * diff, axis=0)
    rhs = np.sum(diff * (a - b), axis=0)
    assert np.all(lhs <= rhs + 1e-10)


def test_project_K_field_warm_start_cache():
    rng = np.random.default_rng(7)
    p = np.abs(rng.normal(size=(3, 50))) + 0.1
    p[2] += 2.0
    cache = np.full(50, np.nan)
    first = project_K_field("log", *p, u_cache=cache)
    # only points routed to the surface solve record a root
    on_top = np.any(np.array(first) != p, axis=0) & (first[2] > 0)
    assert on_top.sum() > 10
    assert np.all(np.isfinite(cache[on_top]))
    assert np.all(np.isnan(cache[~on_top]))
    second = project_K_field("log", *p, u_cache=cache)
    np.testing.assert_allclose(second, first, atol=1e-13)
    with pytest.raises(ValueError):
        project_K_field("log", *p, u_cache=np.zeros(3))


def test_project_K_axis_branch_with_finite_boundary_partial():
    # no implemented mean has a finite axis limit; a synthetic one reaches the branch
    synthetic = replace(LOG, name="log-finite-axis", axis_limit=2.0)
    np.testing.assert_array_equal(project_K(synthetic, (1.0, -3.0, 1.0)), (1.0, 0.0, 0.0))
    np.testing.assert_array_equal(project_K(synthetic, (-3.0, 1.0, 1.0)), (0.0, 1.0, 0.0))
    assert project_K(synthetic, (1.0, -1.0, 1.0))[2] > 0.0


# ---------------------------------------------------------------------------
# linear sets
# ---------------------------------------------------------------------------

def test_Jpm_example_two_node():
    g = make_two_node_graph(1.0, 1.0)
    dq, dm, dp = prox_dual_Jpm(g, np.array([[1.0, 1.0]]), np.zeros((1, 2)), np.zeros((1, 2)))
    np.testing.assert_allclose(dq, [[0.5, 0.5]])
    np.testing.assert_allclose(dm, [[-0.5, -0.5]])
    np.testing.assert_allclose(dp, [[-0.5, -0.5]])


def test_Jpm_membership_and_moreau():
    g = builtin_graph("lattice3x3")
    rng = np.random.default_rng(8)
    q = rng.normal(size=(3, g.n))
    tm, tp = rng.normal(size=(2, 3, g.n_edges))
    rho, pm, pp = project_Jpm(g, q, tm, tp)
    np.testing.assert_array_equal(pm, rho[:, g.src])
    np.testing.assert_array_equal(pp, rho[:, g.dst])
    for a, b in zip(prox_dual_Jpm(g, rho, pm, pp), (0, 0, 0)):
        np.testing.assert_allclose(a, b, atol=1e-14)
    duals = prox_dual_Jpm(g, q, tm, tp, sigma=7.0)
    for d, p, v in zip(duals, (rho, pm, pp), (q, tm, tp)):
        np.testing.assert_allclose(d + p, v, atol=1e-12)
    again = project_Jpm(g, *project_Jpm(g, q, tm, tp))
    for a, b in zip(again, (rho, pm, pp)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_Jpm_is_weighted_projection():
    # optimality: the residual is orthogonal (in the h pi / h Q pi / 2 weights) to J+-
    g = builtin_graph("triangle")
    rng = np.random.default_rng(9)
    q = rng.normal(size=g.n)
    tm, tp = rng.normal(size=(2, g.n_edges))
    rho, pm, pp = project_Jpm(g, q, tm, tp)
    for _ in range(5):
        z = rng.normal(size=g.n)
        inner = (np.sum((q - rho) * z * g.pi)
                 + 0.5 * np.sum(((tm - pm) * z[g.src] + (tp - pp) * z[g.dst]) * g.edge_weight))
        assert abs(inner) <= 1e-13


def test_Javg_matrix_examples():
    np.testing.assert_allclose(4 * JavgProjector(3).matrix(), [[5, 1, 0], [1, 6, 1], [0, 1, 5]])
    np.testing.assert_allclose(JavgProjector(1).matrix(), [[1.0]])
    np.testing.assert_allclose(4 * JavgProjector(3, free_end=True).matrix(),
                               [[5, 1, 0], [1, 6, 1], [0, 1, 6]])


@pytest.mark.parametrize("N, free", [(1, False), (2, False), (3, False), (5, False), (3, True)])
def test_Javg_projection_against_dense_solve(N, free):
    rng = np.random.default_rng(10 + N)
    n = 2
    rho = rng.normal(size=(N + 1, n))
    rho_bar = rng.normal(size=(N, n))
    rho_a, rho_b = rng.normal(size=(2, n))
    proj = JavgProjector(N, free_end=free)
    pr, pb = proj.project(rho, rho_bar, rho_a, None if free else rho_b)
    np.testing.assert_allclose(avg_h(pr), pb, atol=1e-13)
    np.testing.assert_array_equal(pr[0], rho_a)
    if not free:
        np.testing.assert_array_equal(pr[-1], rho_b)
    # dense least squares over the free nodal values per vertex
    fixed = [0] if free else [0, N]
    free_idx = [i for i in range(N + 1) if i not in fixed]
    for x in range(n):
        P = np.zeros((N, N + 1))
        P[np.arange(N), np.arange(N)] = 0.5
        P[np.arange(N), np.arange(N) + 1] = 0.5
        pinned = np.zeros(N + 1)
        pinned[0] = rho_a[x]
        if not free:
            pinned[N] = rho_b[x]
        # minimize |r_f - rho_f|^2 + |P_f r_f + P pinned - rho_bar|^2
        Pf = P[:, free_idx]
        A = np.vstack([np.eye(len(free_idx)), Pf])
        b = np.concatenate([rho[free_idx, x], rho_bar[:, x] - P @ pinned])
        rf = np.linalg.lstsq(A, b, rcond=None)[0]
        np.testing.assert_allclose(pr[free_idx, x], rf, atol=1e-12)


def test_Javg_dual_vanishes_on_the_set():
    N = 4
    rng = np.random.default_rng(11)
    rho = rng.normal(size=(N + 1, 3))
    proj = JavgProjector(N)
    for sigma in (1.0, 64.0):
        dr, db = prox_dual_Javg(proj, sigma * rho, sigma * avg_h(rho), sigma, rho[0], rho[-1])
        np.testing.assert_allclose(dr, 0.0, atol=1e-12 * sigma)
        np.testing.assert_allclose(db, 0.0, atol=1e-12 * sigma)


def test_Javg_moreau_sigma_one():
    N = 3
    rng = np.random.default_rng(12)
    rho, rho_a, rho_b = rng.normal(size=(N + 1, 2)), rng.normal(size=2), rng.normal(size=2)
    rho_bar = rng.normal(size=(N, 2))
    proj = JavgProjector(N)
    dr, db = prox_dual_Javg(proj, rho, rho_bar, 1.0, rho_a, rho_b)
    pr, pb = proj.project(rho, rho_bar, rho_a, rho_b)
    np.testing.assert_allclose(dr + pr, rho, atol=1e-12)
    np.testing.assert_allclose(db + pb, rho_bar, atol=1e-12)


def test_Jeq_examples():
    a, b = project_Jeq(np.zeros(3), np.full(3, 2.0))
    np.testing.assert_array_equal(a, 1.0)
    np.testing.assert_array_equal(b, 1.0)
    x = np.array([0.3, -1.0])
    np.testing.assert_array_equal(project_Jeq(x, x)[0], x)
    once = project_Jeq(np.array([1.0, 2.0]), np.array([3.0, -4.0]))
    np.testing.assert_array_equal(project_Jeq(*once)[0], once[0])


# ---------------------------------------------------------------------------
# continuity equation
# ---------------------------------------------------------------------------

def test_ce_fixed_example_against_dense_oracle():
    g = make_two_node_graph(1.0, 1.0)
    N = 2
    rho_a, rho_b = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    rho, m = np.zeros((N + 1, 2)), np.zeros((N, 2))
    (pr, pm), phi = CEProjector(g, N).project_fixed(rho, m, rho_a, rho_b)
    res, viol = ce_residual(g, pr, pm)
    assert np.max(np.abs(res)) <= 1e-10
    np.testing.assert_array_equal(pr[0], rho_a)
    np.testing.assert_array_equal(pr[-1], rho_b)
    assert abs(phi.sum()) <= 1e-10
    dr, dm = dense_project_ce(g, N, rho, m, rho_a, rho_b)
    np.testing.assert_allclose(pr, dr, atol=1e-10)
    np.testing.assert_allclose(pm, dm, atol=1e-10)


@pytest.mark.parametrize("name", ["triangle", "two-node(1,3)", "lattice3x3"])
def test_ce_fixed_random_against_dense_oracle(name):
    g = builtin_graph(name)
    N = 3
    rng = np.random.default_rng(13)
    rho, m = rng.normal(size=(N + 1, g.n)), rng.normal(size=(N, g.n_edges))
    rho_a, rho_b = np.ones(g.n), dirac(g, 0)
    proj = CEProjector(g, N)
    (pr, pm), phi = proj.project_fixed(rho, m, rho_a, rho_b)
    dr, dm = dense_project_ce(g, N, rho, m, rho_a, rho_b)
    np.testing.assert_allclose(pr, dr, atol=1e-9)
    np.testing.assert_allclose(pm, dm, atol=1e-9)
    assert abs(phi.sum()) <= 1e-10
    (pr2, pm2), _ = proj.project_fixed(pr, pm, rho_a, rho_b)
    np.testing.assert_allclose(pr2, pr, atol=1e-12)
    np.testing.assert_allclose(pm2, pm, atol=1e-12)


def test_ce_fixed_cg_fallback_matches_factorization():
    g = builtin_graph("triangle")
    N = 4
    rng = np.random.default_rng(14)
    rho, m = rng.normal(size=(N + 1, g.n)), rng.normal(size=(N, g.n_edges))
    a = CEProjector(g, N).project_fixed(rho, m, np.ones(3), dirac(g, 1))[0]
    b = CEProjector(g, N, use_factorization=False).project_fixed(rho, m, np.ones(3),
                                                                 dirac(g, 1))[0]
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)


def test_ce_fixed_rejects_unequal_masses():
    g = make_two_node_graph(1.0, 1.0)
    with pytest.raises(ValueError, match="mass"):
        CEProjector(g, 2).project_fixed(np.zeros((3, 2)), np.zeros((2, 2)),
                                        np.array([2.0, 0.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        CEProjector(g, 2).project_free(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(2),
                                       np.ones(2))


def test_ce_free_against_dense_oracle():
    g = make_two_node_graph(1.0, 1.0)
    N = 2
    rng = np.random.default_rng(15)
    rho, m, rho_end = rng.normal(size=(N + 1, 2)), rng.normal(size=(N, 2)), rng.normal(size=2)
    rho_a = np.array([1.5, 0.5])
    proj = CEProjector(g, N, free_end=True)
    (pr, pm, pe), _ = proj.project_free(rho, m, rho_end, rho_a)
    dr, dm, de = dense_project_ce(g, N, rho, m, rho_a, rho_end=rho_end)
    np.testing.assert_allclose(pr, dr, atol=1e-8)
    np.testing.assert_allclose(pm, dm, atol=1e-8)
    np.testing.assert_allclose(pe, de, atol=1e-8)
    np.testing.assert_array_equal(pr[-1], pe)
    res, _ = ce_residual(g, pr, pm)
    assert np.max(np.abs(res)) <= 1e-10
    assert g.mass(pe) == pytest.approx(g.mass(rho_a), abs=1e-10)
    with pytest.raises(ValueError):
        proj.project_fixed(rho, m, rho_a, rho_a)


def test_ce_free_consistent_input_unchanged():
    g = builtin_graph("triangle")
    N = 3
    rho = linear_path(np.ones(3), dirac(g, 2), TimeGrid(N))
    (pr, pm), _ = CEProjector(g, N).project_fixed(rho, np.zeros((N, g.n_edges)), rho[0], rho[-1])
    (fr, fm, fe), _ = CEProjector(g, N, free_end=True).project_free(pr, pm, pr[-1], pr[0])
    np.testing.assert_allclose(fr, pr, atol=1e-12)
    np.testing.assert_allclose(fm, pm, atol=1e-12)
    np.testing.assert_allclose(fe, pr[-1], atol=1e-12)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def test_entropy_prox_examples():
    y = entropy_prox_primal("shannon", np.array([1.0]), 1.0)[0]
    assert y == pytest.approx(0.56714329040978387, rel=1e-13)
    assert abs(y - 1 + (math.log(y) + 1)) <= 1e-12
    y = entropy_prox_primal("renyi", np.array([1.0]), 1.0)[0]
    assert abs(y - 1 - 1 / math.sqrt(y)) <= 1e-12
    assert y == pytest.approx(1.75487766624669, rel=1e-12)
    assert entropy_prox_primal("shannon", np.array([1.0]), 1e-12)[0] == pytest.approx(1.0)
    np.testing.assert_array_equal(entropy_prox_primal("shannon", np.array([-2.0, 3.0]), 0.0),
                                  [0.0, 3.0])


@pytest.mark.parametrize("kind", ["shannon", "renyi"])
def test_entropy_prox_stationarity(kind):
    rng = np.random.default_rng(16)
    a = rng.normal(scale=5.0, size=400)
    for c in (1e-3, 0.3, 10.0):
        y = entropy_prox_primal(kind, a, c)
        assert np.all(y >= ENTROPY_FLOOR)
        if kind == "shannon":
            # the root exp((a - c) / c) underflows for very negative a / c
            ok = ENTROPY_FLOOR - a + c * (math.log(ENTROPY_FLOOR) + 1.0) < 0.0
            np.testing.assert_array_equal(y[~ok], ENTROPY_FLOOR)
            r = y - a + c * (np.log(y) + 1.0)
        else:
            ok = np.ones(a.shape, dtype=bool)
            r = y - a - c / np.sqrt(y)
        assert np.max(np.abs(r[ok]) / np.maximum(1.0, np.abs(a[ok]) + c)) <= 1e-12


def test_prox_dual_entropy_moreau():
    rng = np.random.default_rng(17)
    v = rng.normal(size=5)
    np.testing.assert_array_equal(prox_dual_entropy("shannon", v, 2.0, 0.0, 0.1), 0.0)
    sigma, tau, h = 1.0, 0.05, 0.1
    dual = prox_dual_entropy("shannon", v, sigma, tau, h)
    primal = entropy_prox_primal("shannon", v / sigma, 2 * tau / (sigma * h))
    np.testing.assert_allclose(dual + sigma * primal, v, atol=1e-12)
