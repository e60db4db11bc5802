"""Forward evaluation of feedback strategies and martingale diagnostics.

A strategy is anything with ``control_indices(t, X) -> int array`` and
``stop_at(t, X) -> bool array``; extracted policy fields qualify, and the
wrappers here build challenger variants (constant control, random control,
immediate or suppressed stopping) around them.

The reward of one path stopped at node i is

    sum_{j<i} Gamma(tau_j, X_j, a_j) dt + h(tau_i, X_i)          (i < N)
    sum_{j<N} Gamma(tau_j, X_j, a_j) dt + g(X_N)                 (i = N)

with no running reward accrued on the stopping node itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec
from .paths import TimeGrid, attach_controls, girsanov_log_batch, simulate_controlled, simulate_uncontrolled

__all__ = [
    "Breakdown",
    "PayoffEstimate",
    "ChallengerRow",
    "OptimalityReport",
    "ConstantPolicy",
    "evaluate",
    "default_challengers",
    "optimality_gap",
    "martingale_check",
]


@dataclass(frozen=True)
class Breakdown:
    running: float
    obstacle: float
    terminal: float
    fraction_stopped_early: float


@dataclass(frozen=True)
class PayoffEstimate:
    """Monte-Carlo payoff; ``mean`` is the exact sum of the breakdown parts."""

    mean: float
    stderr: float
    count: int
    breakdown: Breakdown
    q_moment: float | None = None


class ConstantPolicy:
    """Fixed control index, never stops before the horizon."""

    def __init__(self, index: int = 0):
        self.index = int(index)

    def control_indices(self, t, X):
        return np.full(X.shape[0], self.index, dtype=np.int64)

    def stop_at(self, t, X):
        return np.zeros(X.shape[0], dtype=bool)


class _Challenger:
    """Wraps a base policy, overriding control and/or stop behaviour."""

    def __init__(self, base, control_mode="field", stop_mode="field", index=0, k=1, seed=0):
        self.base = base
        self.control_mode = control_mode
        self.stop_mode = stop_mode
        self.index = index
        self.k = k
        self._rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0)))

    def control_indices(self, t, X):
        n = X.shape[0]
        if self.control_mode == "const":
            return np.full(n, self.index, dtype=np.int64)
        if self.control_mode == "random":
            return self._rng.integers(0, self.k, size=n, dtype=np.int64)
        return self.base.control_indices(t, X)

    def stop_at(self, t, X):
        n = X.shape[0]
        if self.stop_mode == "immediate":
            return np.ones(n, dtype=bool)
        if self.stop_mode == "never":
            return np.zeros(n, dtype=bool)
        return self.base.stop_at(t, X)


def evaluate(
    spec: ProblemSpec,
    policy,
    grid: TimeGrid,
    x0,
    count: int,
    seed: int = 0,
) -> PayoffEstimate:
    """Simulate ``count`` controlled paths and average the stopped reward."""
    batch = simulate_controlled(spec, policy, float(grid.t0), x0, grid, count, seed)
    times = grid.nodes
    dt = grid.dt
    N = grid.steps
    points = spec.controls.points

    running = np.zeros(count)
    collected = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    stopped_early = np.zeros(count, dtype=bool)

    for i in range(N):
        t = float(times[i])
        X = batch.states[:, i]
        fire = alive & np.asarray(policy.stop_at(t, X), dtype=bool)
        if fire.any():
            collected[fire] = spec.h(t, X[fire])
            stopped_early[fire] = True
            alive[fire] = False
        if not alive.any():
            break
        idx = batch.controls[:, i]
        for k in np.unique(idx[alive]):
            sel = alive & (idx == k)
            running[sel] += spec.gamma(t, X[sel], points[int(k)]) * dt

    terminal = np.zeros(count)
    if alive.any():
        terminal[alive] = spec.g(batch.states[:, N][alive])

    reward = running + collected + terminal
    mean_run = float(np.mean(running))
    mean_obs = float(np.mean(collected))
    mean_term = float(np.mean(terminal))
    stderr = float(np.std(reward, ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    return PayoffEstimate(
        mean=mean_run + mean_obs + mean_term,
        stderr=stderr,
        count=count,
        breakdown=Breakdown(
            running=mean_run,
            obstacle=mean_obs,
            terminal=mean_term,
            fraction_stopped_early=float(np.mean(stopped_early)),
        ),
    )


def default_challengers(spec: ProblemSpec, policy, seed: int = 0):
    """Named suboptimal variants of an extracted policy."""
    k = spec.controls.k
    rows = []
    for j in range(k):
        label = ",".join(repr(float(v)) for v in spec.controls.points[j])
        rows.append((f"constant control ({label})", _Challenger(policy, "const", "field", index=j)))
    rows.append(("uniform random control", _Challenger(policy, "random", "field", k=k, seed=seed)))
    rows.append(("optimal control, stop immediately", _Challenger(policy, "field", "immediate")))
    rows.append(("optimal control, never stop early", _Challenger(policy, "field", "never")))
    return rows


@dataclass(frozen=True)
class ChallengerRow:
    name: str
    estimate: PayoffEstimate
    gap: float          # challenger mean - optimal mean; should not be significantly > 0
    se_combined: float

    @property
    def ok(self) -> bool:
        return self.gap <= 2.0 * self.se_combined


@dataclass(frozen=True)
class OptimalityReport:
    optimal: PayoffEstimate
    field_value: float
    field_gap: float
    field_budget: float
    rows: tuple[ChallengerRow, ...]

    @property
    def field_ok(self) -> bool:
        return self.field_gap <= self.field_budget

    @property
    def passed(self) -> bool:
        return self.field_ok and all(r.ok for r in self.rows)


def optimality_gap(
    spec: ProblemSpec,
    field,
    policy,
    grid: TimeGrid,
    x0,
    count: int,
    seed: int = 0,
    challengers=None,
    scheme_budget_rel: float = 0.015,
) -> OptimalityReport:
    """Check the extracted policy against the field value and challengers.

    The simulated optimal payoff must match the field value within Monte-Carlo
    noise plus a discretisation budget, and no challenger may beat it by more
    than two combined standard errors.
    """
    optimal = evaluate(spec, policy, grid, x0, count, seed)
    v0 = float(field.at(float(grid.t0), np.asarray(x0, dtype=float)))
    budget = 2.0 * optimal.stderr + scheme_budget_rel * max(0.1, abs(v0))
    if challengers is None:
        challengers = default_challengers(spec, policy, seed=seed)
    rows = []
    for j, (name, ch) in enumerate(challengers):
        est = evaluate(spec, ch, grid, x0, count, seed + 1000 + j)
        se = math.hypot(est.stderr, optimal.stderr)
        rows.append(ChallengerRow(name=name, estimate=est, gap=est.mean - optimal.mean, se_combined=se))
    return OptimalityReport(
        optimal=optimal,
        field_value=v0,
        field_gap=abs(optimal.mean - v0),
        field_budget=budget,
        rows=tuple(rows),
    )


def martingale_check(
    spec: ProblemSpec,
    policy,
    grid: TimeGrid,
    x0,
    count: int,
    seed: int = 0,
    q: float = 1.5,
) -> PayoffEstimate:
    """Mean and q-th moment of the change-of-measure density for a policy.

    Paths are driftless; the policy only labels them with controls.  The
    density mean must sit within Monte-Carlo noise of one.
    """
    batch = simulate_uncontrolled(spec, float(grid.t0), x0, grid, count, seed)
    labelled = attach_controls(batch, policy)
    log_m = girsanov_log_batch(spec, labelled)
    m = np.exp(log_m)
    mean = float(np.mean(m))
    stderr = float(np.std(m, ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    return PayoffEstimate(
        mean=mean,
        stderr=stderr,
        count=count,
        breakdown=Breakdown(running=0.0, obstacle=0.0, terminal=mean, fraction_stopped_early=0.0),
        q_moment=float(np.mean(m**q)),
    )
