"""Problem-file format and the command line interface."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from ctrlstop.cli import (
    ProblemFileError,
    emit_problem_file,
    load_problem,
    main,
    parse_problem_file,
)
from ctrlstop.model import build_builtin

GOOD_FILE = """
# a plain at-the-money put
[problem] dim=1 T=1.0 name="demo"
[params] sigma0=0.2 K=1.0
[controls] points=0.0
[sigma] expr="sigma0"
[f] expr="0"
[gamma] expr="0"
[g] expr="max(K-x1,0)"
[h] expr="max(K-x1,0)"
[growth] C_f=0.0 C_sigma_inv=5.0 C_poly=1.0 p=1.0
[domain] lo=-3.0 hi=5.0
"""


@pytest.mark.parametrize("name", ["bachelier_put", "controlled_drift_abs", "decaying_obstacle"])
def test_emit_parse_round_trip(name):
    spec = build_builtin(name)
    again = parse_problem_file(emit_problem_file(spec))
    assert again.name == spec.name
    assert again.dim == spec.dim
    assert again.horizon_T == spec.horizon_T
    assert np.array_equal(again.controls.points, spec.controls.points)
    assert np.array_equal(again.domain.lo, spec.domain.lo)
    assert again.growth == spec.growth
    rng = np.random.default_rng(0)
    X = rng.uniform(spec.domain.lo, spec.domain.hi, size=(64, spec.dim))
    for t in (0.0, 0.37):
        assert np.array_equal(again.sigma(t, X), spec.sigma(t, X))
        assert np.array_equal(again.h(t, X), spec.h(t, X))
        for a in spec.controls.points:
            assert np.array_equal(again.f(t, X, a), spec.f(t, X, a))
            assert np.array_equal(again.gamma(t, X, a), spec.gamma(t, X, a))
    assert np.array_equal(again.g(X), spec.g(X))


def test_parse_good_file():
    spec = parse_problem_file(GOOD_FILE)
    assert spec.name == "demo"
    assert spec.controls.k == 1
    assert spec.domain.radius == 5.0


@pytest.mark.parametrize(
    "mangle,message",
    [
        (lambda s: s.replace("[growth] C_f=0.0 C_sigma_inv=5.0 C_poly=1.0 p=1.0\n", ""), "missing sections"),
        (lambda s: s + "stray line\n", "expected '\\[section\\]"),
        (lambda s: s + "[bogus] a=1\n", "unknown section"),
        (lambda s: s + "[problem] ???\n", "malformed key=value"),
        (lambda s: s.replace("dim=1", "dim=one"), "not a number"),
        (lambda s: s.replace("points=0.0", "points=a;b"), "cannot parse points"),
        (lambda s: s.replace('[sigma] expr="sigma0"', '[sigma] expr="max(1,2"'), "unbalanced"),
        (lambda s: s.replace('[g] expr="max(K-x1,0)"', '[g] expr="abs(x1"'), "offset 7"),
        (lambda s: s.replace("T=1.0", "Q=1.0"), "needs key T="),
        (lambda s: s.replace("lo=-3.0 hi=5.0", "lo=-3.0,1.0 hi=5.0"), "1 or 1 entries"),
    ],
)
def test_parse_rejects_malformed_files(mangle, message):
    with pytest.raises(ProblemFileError, match=message):
        parse_problem_file(mangle(GOOD_FILE))


def test_parse_rejects_invalid_problems():
    bad = GOOD_FILE.replace('[h] expr="max(K-x1,0)"', '[h] expr="max(K-x1,0.5)"')
    with pytest.raises(ProblemFileError, match="rejected by validation: terminal_barrier"):
        parse_problem_file(bad)
    # the same text loads with validation off
    spec = parse_problem_file(bad, validate_spec=False)
    assert spec.name == "demo"


def test_emit_requires_expression_backing():
    spec = build_builtin("bachelier_put")
    stripped = dataclasses.replace(spec.coefficients, sigma_exprs=None)
    with pytest.raises(ValueError, match="expression-backed"):
        emit_problem_file(dataclasses.replace(spec, coefficients=stripped))


def test_load_problem_from_disk(tmp_path):
    path = tmp_path / "demo.prob"
    path.write_text(GOOD_FILE)
    assert load_problem(path).name == "demo"


def test_main_requires_exactly_one_problem_source(capsys):
    assert main(["solve-pde", "--builtin", "bachelier_put", "--problem", "x"]) == 2
    assert main(["solve-pde"]) == 2
    err = capsys.readouterr().err
    assert "exactly one of --builtin or --problem" in err


def test_main_rejects_bad_inputs(tmp_path, capsys):
    assert main(["solve-pde", "--builtin", "nope", "--nx", "51"]) == 2
    assert main(["solve-pde", "--builtin", "bachelier_put", "--param", "K"]) == 2
    assert main(["solve-pde", "--builtin", "controlled_drift_abs", "--param", "d=3", "--nx", "11"]) == 2
    assert main(["solve-pde", "--builtin", "bachelier_put", "--x0", "1,2", "--nx", "51"]) == 2
    assert main(["solve-pde", "--builtin", "bachelier_put", "--trunc-n", "2", "--nx", "51"]) == 2
    bad = tmp_path / "bad.prob"
    bad.write_text(GOOD_FILE.replace('[g] expr="max(K-x1,0)"', '[g] expr="abs(x1"'))
    assert main(["solve-pde", "--problem", str(bad)]) == 2
    assert "offset 7" in capsys.readouterr().err


def test_solve_pde_writes_deterministic_csv(tmp_path, capsys):
    argv = [
        "solve-pde",
        "--builtin", "bachelier_put",
        "--nx", "81",
        "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "v(0, 1) = 0.0" in out
    csv_path = tmp_path / "value_policy.csv"
    first = csv_path.read_bytes()
    header = first.decode().splitlines()[0]
    assert header == "t,x1,value,h,a_index,stop"
    assert main(argv) == 0
    assert csv_path.read_bytes() == first


def test_solve_mc_reports_and_writes(tmp_path, capsys):
    argv = [
        "solve-mc",
        "--builtin", "decaying_obstacle",
        "--paths", "2000",
        "--steps", "10",
        "--seed", "3",
        "--basis", "local:15",
        "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "y0 = 0." in out
    assert "skorokhod residual = 0.0" in out
    lines = (tmp_path / "rbsde.csv").read_text().splitlines()
    assert lines[0] == "node,t,mean_y,mean_abs_z,mean_dk,reflection_frequency"
    assert len(lines) == 12  # header + 11 nodes


def test_solve_mc_rejects_unknown_basis():
    argv = ["solve-mc", "--builtin", "bachelier_put", "--paths", "100", "--steps", "4", "--basis", "fourier:3"]
    assert main(argv) == 2


def test_simulate_reports_the_gap(tmp_path, capsys):
    argv = [
        "simulate",
        "--builtin", "controlled_drift_abs",
        "--nx", "161",
        "--paths", "4000",
        "--steps", "40",
        "--seed", "1",
        "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "extracted policy" in out
    assert "constant control (0.0)" in out
    strategy_lines = (tmp_path / "strategy.csv").read_text().splitlines()
    assert strategy_lines[0] == "strategy,mean,stderr,fraction_stopped_early"
    assert len(strategy_lines) == 8  # header + optimal + 6 challengers
    path_lines = (tmp_path / "paths.csv").read_text().splitlines()
    assert path_lines[0] == "path,node,t,x1,a,logM"
    assert len(path_lines) == 1 + 200 * 41


def test_ladder_command(capsys):
    argv = [
        "ladder",
        "--builtin", "controlled_drift_abs",
        "--nx", "61",
        "--n-list", "1,5",
        "--m-list", "1,5",
        "--paths", "0",
    ]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "exhaustion gap: 0.0" in out


def test_verify_subset(tmp_path, capsys):
    assert main(["verify", "--only", "10", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "[PASS] 10" in out
    assert "1/1 checks passed" in out
    assert "[PASS] 10" in (tmp_path / "verify.txt").read_text()
    assert main(["verify", "--only", "99"]) == 2


def test_convergence_command(capsys):
    argv = ["convergence", "--builtin", "bachelier_put", "--nx-list", "51,101,201"]
    assert main(argv) == 0
    assert "refinement contracts" in capsys.readouterr().out
    assert main(["convergence", "--builtin", "bachelier_put", "--nx-list", "51,101"]) == 2
