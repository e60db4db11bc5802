"""Problem specification, builtin families, and coefficient validation."""

from __future__ import annotations

import numpy as np
import pytest

from ctrlstop.model import (
    Box,
    ControlSet,
    Growth,
    ProblemSpec,
    build_builtin,
    dominating_constant,
    dominating_generator,
    dominating_generator_batch,
    validate,
)

BUILTINS = ("bachelier_put", "controlled_drift_abs", "decaying_obstacle")


@pytest.mark.parametrize("name", BUILTINS)
def test_builtins_pass_validation(name):
    spec = build_builtin(name)
    report = validate(spec, samples=1024, seed=0)
    assert report.passed, report.render()


def test_control_set_shapes_and_lookup():
    cs = ControlSet([-1.0, 0.0, 1.0])
    assert cs.k == 3 and cs.ka == 1
    assert cs.points.shape == (3, 1)
    assert cs.index_of(0.0) == 1
    assert cs.index_of([-1.0]) == 0
    with pytest.raises(ValueError, match="not in the control set"):
        cs.index_of(0.5)


def test_control_set_rejects_bad_input():
    with pytest.raises(ValueError, match="duplicate"):
        ControlSet([[1.0], [1.0]])
    with pytest.raises(ValueError, match="non-empty"):
        ControlSet(np.zeros((0, 1)))
    with pytest.raises(ValueError, match="finite"):
        ControlSet([np.inf])


def test_growth_constraints():
    with pytest.raises(ValueError, match="p must be >= 1"):
        Growth(C_f=1.0, C_sigma_inv=1.0, C_poly=1.0, p=0.5)
    with pytest.raises(ValueError, match="finite and >= 0"):
        Growth(C_f=-1.0, C_sigma_inv=1.0, C_poly=1.0, p=1.0)


def test_box_geometry():
    with pytest.raises(ValueError, match="lo < hi"):
        Box(np.array([1.0]), np.array([1.0]))
    b = Box(np.array([-3.0, -1.0]), np.array([2.0, 5.0]))
    assert b.dim == 2
    assert b.radius == 5.0


def test_spec_rejects_dimension_mismatch():
    spec = build_builtin("bachelier_put")
    with pytest.raises(ValueError, match="domain dimension"):
        ProblemSpec(
            dim=2,
            horizon_T=1.0,
            coefficients=spec.coefficients,
            controls=spec.controls,
            growth=spec.growth,
            domain=spec.domain,
        )


def test_unknown_builtin_and_parameters():
    with pytest.raises(ValueError, match="unknown builtin"):
        build_builtin("nope")
    with pytest.raises(ValueError, match="unknown parameter 'vol'"):
        build_builtin("bachelier_put", {"vol": 0.3})
    with pytest.raises(ValueError, match="missing parameters"):
        build_builtin("custom", {"dim": 1})


def test_controlled_drift_control_grid():
    spec = build_builtin("controlled_drift_abs", {"d": 2, "kappa": 0.5})
    assert spec.controls.k == 9 and spec.controls.ka == 2
    # lexicographic ordering of the cartesian power
    assert np.array_equal(spec.controls.points[0], [-0.5, -0.5])
    assert np.array_equal(spec.controls.points[4], [0.0, 0.0])
    assert np.array_equal(spec.controls.points[-1], [0.5, 0.5])


def test_coefficient_evaluation_shapes():
    spec = build_builtin("controlled_drift_abs", {"d": 2})
    X = np.array([[0.5, -1.0], [2.0, 0.25]])
    sig = spec.sigma(0.0, X)
    assert sig.shape == (2, 2, 2)
    assert np.array_equal(sig[0], np.eye(2))
    drift = spec.f(0.0, X, spec.controls.points[0])
    assert drift.shape == (2, 2)
    assert np.array_equal(drift, np.full((2, 2), -1.0))
    assert np.array_equal(spec.g(X), np.hypot(X[:, 0], X[:, 1]))
    assert np.array_equal(spec.h(0.3, X), np.full(2, -10.0))


def test_time_dependence_flags():
    flat = build_builtin("bachelier_put").coefficients
    assert flat.h_t_free and flat.f_t_free and flat.gamma_t_free
    decaying = build_builtin("decaying_obstacle").coefficients
    assert not decaying.h_t_free
    assert decaying.f_t_free and decaying.gamma_t_free
    assert flat.sigma_constant and decaying.sigma_constant


def test_dominating_generator_closed_form():
    spec = build_builtin(
        "custom",
        {
            "dim": 1,
            "T": 1.0,
            "sigma": ["1"],
            "f": ["2*a1"],
            "gamma": "0",
            "g": "x1*x1",
            "h": "-100",
            "controls": [[-1.0], [1.0]],
            "growth": {"C_f": 2.0, "C_sigma_inv": 1.0, "C_poly": 1.0, "p": 2.0},
            "lo": -5.0,
            "hi": 5.0,
        },
    )
    assert dominating_constant(spec) == 2.0
    # c (1+|x|) |z| + c (1+|x|^p) with c=2, x=3, z=4, p=2
    assert dominating_generator(spec, 0.0, [3.0], [4.0]) == 2.0 * 4.0 * 4.0 + 2.0 * 10.0
    batch = dominating_generator_batch(
        spec, 0.0, np.array([[3.0], [0.0]]), np.array([[4.0], [0.0]])
    )
    assert np.array_equal(batch, [52.0, 2.0])


def test_validation_catches_terminal_barrier_violation():
    spec = build_builtin(
        "custom",
        {
            "dim": 1,
            "T": 1.0,
            "sigma": ["1"],
            "f": ["0"],
            "gamma": "0",
            "g": "0",
            "h": "1",
            "controls": [[0.0]],
            "growth": {"C_f": 0.0, "C_sigma_inv": 1.0, "C_poly": 1.0, "p": 1.0},
            "lo": -2.0,
            "hi": 2.0,
        },
    )
    report = validate(spec, samples=256, seed=0)
    assert not report.passed
    names = {c.name for c in report.failing()}
    assert names == {"terminal_barrier"}


def test_validation_catches_singular_sigma():
    spec = build_builtin(
        "custom",
        {
            "dim": 2,
            "T": 1.0,
            "sigma": ["1", "1", "1", "1"],
            "f": ["0", "0"],
            "gamma": "0",
            "g": "0",
            "h": "-1",
            "controls": [[0.0, 0.0]],
            "growth": {"C_f": 0.0, "C_sigma_inv": 1.0, "C_poly": 1.0, "p": 1.0},
            "lo": -2.0,
            "hi": 2.0,
        },
    )
    report = validate(spec, samples=64, seed=0)
    assert not report.passed
    failing = {c.name for c in report.failing()}
    assert "sigma_inverse_bound" in failing or "sigma_condition_cap" in failing


def test_validation_catches_drift_growth_violation():
    spec = build_builtin(
        "custom",
        {
            "dim": 1,
            "T": 1.0,
            "sigma": ["1"],
            "f": ["x1*x1"],
            "gamma": "0",
            "g": "0",
            "h": "-1",
            "controls": [[0.0]],
            "growth": {"C_f": 1.0, "C_sigma_inv": 1.0, "C_poly": 1.0, "p": 1.0},
            "lo": -9.0,
            "hi": 9.0,
        },
    )
    report = validate(spec, samples=512, seed=0)
    failing = {c.name for c in report.failing()}
    assert "f_linear_growth" in failing


def test_validation_report_is_deterministic():
    spec = build_builtin("decaying_obstacle")
    a = validate(spec, samples=256, seed=3)
    b = validate(spec, samples=256, seed=3)
    assert [(c.name, c.measured) for c in a.checks] == [
        (c.name, c.measured) for c in b.checks
    ]
    assert "validation over 256 samples" in a.render()
