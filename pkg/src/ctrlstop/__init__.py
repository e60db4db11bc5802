"""Finite-horizon stochastic control with discretionary stopping.

Two independent solvers for the value function of mixed control-stopping
problems driven by a finite control set: a monotone explicit
finite-difference scheme for the obstacle HJB equation (``pde``) and a
regression Monte-Carlo scheme for the reflected backward equation (``mc``),
cross-checked by forward simulation of the extracted strategy
(``strategy``) and a numbered acceptance suite (``acceptance``).
"""

from __future__ import annotations

from .expr import EvalError, ExpressionTree, ParseError, parse_expression
from .hamilton import (
    TIE_TOL,
    HamiltonianValue,
    TruncationIndex,
    cutoff,
    hamiltonian,
    sup_hamiltonian,
    sup_hamiltonian_batch,
    truncate_values,
    truncated_sup_hamiltonian,
    unit_direction,
    unit_direction_batch,
)
from .model import (
    Box,
    ControlSet,
    Growth,
    ProblemSpec,
    build_builtin,
    compile_coefficients,
    dominating_constant,
    dominating_generator,
    validate,
)
from .paths import (
    PathBatch,
    TimeGrid,
    attach_controls,
    girsanov_density,
    girsanov_log_batch,
    simulate_controlled,
    simulate_uncontrolled,
)
from .pde import (
    PolicyField,
    SpaceTimeGrid,
    ValueField,
    comparison_check,
    extract_policy,
    ladder,
    make_grid,
    solve,
)
from .mc import BackwardSolveResult, RegressionBasis, skorokhod_residual, solve_rbsde, truncation_ladder_mc
from .strategy import (
    ConstantPolicy,
    PayoffEstimate,
    evaluate,
    martingale_check,
    optimality_gap,
)
from .acceptance import CLOSED_FORM_ATM_PUT, run_all

__version__ = "0.1.0"

__all__ = [
    "ParseError",
    "EvalError",
    "ExpressionTree",
    "parse_expression",
    "Box",
    "ControlSet",
    "Growth",
    "ProblemSpec",
    "build_builtin",
    "compile_coefficients",
    "dominating_constant",
    "dominating_generator",
    "validate",
    "HamiltonianValue",
    "TruncationIndex",
    "TIE_TOL",
    "hamiltonian",
    "sup_hamiltonian",
    "sup_hamiltonian_batch",
    "cutoff",
    "truncate_values",
    "truncated_sup_hamiltonian",
    "unit_direction",
    "unit_direction_batch",
    "TimeGrid",
    "PathBatch",
    "simulate_uncontrolled",
    "simulate_controlled",
    "attach_controls",
    "girsanov_density",
    "girsanov_log_batch",
    "SpaceTimeGrid",
    "ValueField",
    "PolicyField",
    "make_grid",
    "solve",
    "extract_policy",
    "ladder",
    "comparison_check",
    "RegressionBasis",
    "BackwardSolveResult",
    "solve_rbsde",
    "skorokhod_residual",
    "truncation_ladder_mc",
    "ConstantPolicy",
    "PayoffEstimate",
    "evaluate",
    "martingale_check",
    "optimality_gap",
    "CLOSED_FORM_ATM_PUT",
    "run_all",
    "__version__",
]
