import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from graphot.cli import EXIT_FAILED, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, main, parse_density
from graphot.graph import builtin_graph, graph_to_dict, line5
from graphot.oracles import TwoNodeExact, two_node_distance
from graphot.solver import reported_action
from graphot.timegrid import ce_residual, read_trajectory


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_distance_identical_boundaries(capsys, tmp_path):
    report = tmp_path / "r.json"
    code, out, _ = _run(capsys, "distance", "--builtin", "triangle", "--rho-a", "uniform",
                        "--rho-b", "[1, 1, 1]", "--n", 10, "--out", report)
    assert code == EXIT_OK
    data = json.loads(report.read_text())
    assert data["distance"] <= 1e-5
    assert data["converged"] and "config" in data
    assert "distance" in out


def test_distance_two_node_benchmark(capsys, tmp_path):
    report = tmp_path / "r.json"
    code, _, _ = _run(capsys, "distance", "--builtin", "two-node(1,1)", "--rho-a", "dirac:0",
                      "--rho-b", "dirac:1", "--n", 200, "--out", report)
    assert code == EXIT_OK
    w = json.loads(report.read_text())["distance"]
    assert w == pytest.approx(two_node_distance(TwoNodeExact()), rel=1e-2)


def test_malformed_graph_json(capsys, tmp_path):
    bad = tmp_path / "g.json"
    bad.write_text("{\"vertices\": 2, ")
    code, _, err = _run(capsys, "distance", "--graph", bad, "--rho-a", "uniform",
                        "--rho-b", "uniform")
    assert code == EXIT_INPUT
    assert "error" in err


@pytest.mark.parametrize("argv", [
    ["distance", "--builtin", "nonsense", "--rho-a", "uniform", "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "[1, 1]", "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "[3, 1, 1]", "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "dirac:7", "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "{oops", "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "uniform", "--rho-b", "uniform",
     "--sigma", "2", "--tau", "1"],
    ["distance", "--builtin", "triangle", "--graph", "x.json", "--rho-a", "uniform",
     "--rho-b", "uniform"],
    ["distance", "--builtin", "triangle", "--rho-a", "uniform"],
    ["jko", "--builtin", "triangle", "--rho-a", "uniform", "--entropy", "shannon",
     "--mean", "geo"],
    ["validate", "no-such-suite"],
    ["frobnicate"],
])
def test_invalid_input_exits_2(capsys, argv):
    assert main(argv) == EXIT_INPUT


def test_nonconvergence_exits_3(capsys):
    code, out, _ = _run(capsys, "distance", "--builtin", "triangle", "--rho-a", "uniform",
                        "--rho-b", "dirac:0", "--n", 10, "--max-iters", 15)
    assert code == EXIT_NONCONVERGED
    assert "maximum number of iterations" in out


def test_density_parsing(tmp_path):
    g = builtin_graph("lattice3x3")
    np.testing.assert_array_equal(parse_density(g, "uniform", "x"), np.ones(9))
    assert parse_density(g, "dirac:4", "x")[4] == pytest.approx(1 / g.pi[4])
    np.testing.assert_array_equal(parse_density(g, json.dumps({"4": 1 / g.pi[4]}), "x"),
                                  parse_density(g, "dirac:4", "x"))
    path = tmp_path / "rho.txt"
    path.write_text("1 1 1\n1 1 1\n1 1 1\n")
    np.testing.assert_array_equal(parse_density(g, str(path), "x"), np.ones(9))
    cube = builtin_graph("cube")
    assert parse_density(cube, f"dirac:{cube.labels[3]}", "x")[3] == 8.0


def test_geodesic_round_trip(capsys, tmp_path):
    stem = tmp_path / "geo"
    code, out, _ = _run(capsys, "geodesic", "--builtin", "triangle", "--rho-a", "uniform",
                        "--rho-b", "[0.6, 0.9, 1.5]", "--n", 20, "--out", stem)
    assert code == EXIT_OK
    g = builtin_graph("triangle")
    report = json.loads((tmp_path / "geo_report.json").read_text())
    rho, m = read_trajectory(tmp_path / "geo_rho.csv", g)
    res, viol = ce_residual(g, rho, m)
    assert np.max(np.abs(res)) <= 1e-9
    np.testing.assert_allclose(rho[0], 1.0)
    np.testing.assert_allclose(m, -m[:, g.rev], atol=0)
    action, _ = reported_action(g, rho, m, "log")
    assert action == pytest.approx(report["action"], rel=1e-9)
    assert out.count("wrote") == 3


def test_geodesic_cube_equidistribution(capsys, tmp_path):
    g = builtin_graph("cube")
    far = g.labels[-1]
    code, _, _ = _run(capsys, "geodesic", "--builtin", "cube", "--rho-a", f"dirac:{g.labels[0]}",
                      "--rho-b", f"dirac:{far}", "--n", 20, "--format", "json",
                      "--out", tmp_path / "cube.json")
    assert code == EXIT_OK
    rho, _ = read_trajectory(tmp_path / "cube.json", g)
    mid = rho[10]
    layer = [v for v, lab in enumerate(g.labels) if lab.count("1") == 1]
    assert np.ptp(mid[layer]) <= 5e-3


def test_geodesic_csv_is_deterministic(capsys, tmp_path):
    args = ["geodesic", "--builtin", "two-node(1,3)", "--rho-a", "dirac:0", "--rho-b",
            "uniform", "--n", "10"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for suffix in ("_rho.csv", "_m.csv"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()


def test_jko_with_euler_reference(capsys, tmp_path):
    gpath = tmp_path / "line5.json"
    gpath.write_text(json.dumps(graph_to_dict(line5())))
    out = tmp_path / "heat.csv"
    code, _, _ = _run(capsys, "jko", "--graph", gpath, "--rho-a", "[0.5, 0.5, 2.5, 0.5, 0.5]",
                      "--tau-jko", "1e-3", "--steps", 3, "--n", 20, "--euler", "--out", out)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    ref = list(csv.DictReader(open(tmp_path / "heat_euler.csv")))
    assert len(rows) == len(ref) == 4 * 5
    assert [r["t"] for r in rows] == [r["t"] for r in ref]
    ent = [float(r["entropy"]) for r in rows if r["vertex"] == "0"]
    assert all(b <= a + 1e-10 for a, b in zip(ent, ent[1:]))


def test_jko_uniform_start_is_flat(capsys, tmp_path):
    out = tmp_path / "flat.csv"
    code, _, _ = _run(capsys, "jko", "--builtin", "triangle", "--rho-a", "uniform",
                      "--entropy", "renyi", "--tau-jko", "1e-2", "--steps", 2, "--n", 10,
                      "--out", out)
    assert code == EXIT_OK
    rho = [float(r["rho"]) for r in csv.DictReader(open(out))]
    np.testing.assert_allclose(rho, 1.0, atol=1e-8)


def test_validate_suite(capsys):
    code, out, _ = _run(capsys, "validate", "identities")
    assert code == EXIT_OK
    assert "[PASS] criterion 14" in out
    assert "1/1 criteria passed" in out


def test_validate_reports_failure(capsys, monkeypatch):
    import graphot.validation as validation

    def broken():
        return validation.CriterionResult(14, "forced", False, 1.0, 0.0)

    monkeypatch.setitem(validation.CRITERIA, 14, broken)
    code, out, _ = _run(capsys, "validate", "identities")
    assert code == EXIT_FAILED
    assert "[FAIL]" in out


@pytest.mark.skipif(shutil.which("graphot") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["graphot", "distance", "--builtin", "two-node(1,1)", "--rho-a",
                           "uniform", "--rho-b", "uniform", "--n", "4"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert proc.stdout.startswith("distance")
    proc = subprocess.run(["graphot", "validate", "bogus"], capture_output=True, text=True,
                          timeout=120)
    assert proc.returncode == 2
