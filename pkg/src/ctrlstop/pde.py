"""Monotone explicit finite differences for the obstacle HJB equation.

Backward in time from v(T,.) = g, each step applies the discrete generator
and projects onto the obstacle:

    vtilde = v + dt * [ 1/2 Tr(sigma sigma^T D^2 v) + max_a ( f(t,x,a) . D^a v + gamma(t,x,a) ) ]
    v      = max(vtilde, h(t, .))

First derivatives are upwinded one-sided per drift-component sign, jointly
with the sup over the finite control set, which keeps the scheme monotone
under the recorded CFL bound.  The spatial boundary uses a zero-gradient
(edge replication) extension.  d <= 2.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .hamilton import TruncationIndex, cutoff_batch, sup_hamiltonian_batch, truncate_values
from .model import Box, ProblemSpec, dominating_constant

__all__ = [
    "SpaceTimeGrid",
    "ValueField",
    "PolicyField",
    "LadderReport",
    "make_grid",
    "solve",
    "rerun_projection",
    "extract_policy",
    "ladder",
    "comparison_check",
]

GENERATORS = ("hstar", "dominating")


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on box x [0, T]."""

    box: Box
    nx: tuple[int, ...]
    nt: int
    horizon_T: float

    def __post_init__(self):
        if len(self.nx) != self.box.dim:
            raise ValueError("nx must give one node count per axis")
        if any(n < 3 for n in self.nx):
            raise ValueError("need at least 3 nodes per axis")
        if self.nt < 1:
            raise ValueError("need at least one time step")

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def dt(self) -> float:
        return self.horizon_T / self.nt

    @property
    def dxs(self) -> np.ndarray:
        return (self.box.hi - self.box.lo) / (np.asarray(self.nx) - 1)

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.linspace(self.box.lo[j], self.box.hi[j], self.nx[j]) for j in range(self.dim)
        )

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon_T, self.nt + 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nx

    def nodes(self) -> np.ndarray:
        """All grid nodes, flat [n_nodes, d], C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def core_mask(self, fraction: float = 0.6) -> np.ndarray:
        """Boolean mask over the spatial shape marking the inner core."""
        masks = []
        for j in range(self.dim):
            ax = self.axes[j]
            span = self.box.hi[j] - self.box.lo[j]
            margin = 0.5 * (1.0 - fraction) * span
            masks.append((ax >= self.box.lo[j] + margin) & (ax <= self.box.hi[j] - margin))
        out = masks[0]
        for m in masks[1:]:
            out = np.outer(out, m)
        return out.reshape(self.shape)

    def index_of(self, x) -> tuple[int, ...]:
        """Nearest-node multi-index, clipped to the box."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = []
        for j in range(self.dim):
            i = int(round((x[j] - self.box.lo[j]) / self.dxs[j]))
            idx.append(min(max(i, 0), self.nx[j] - 1))
        return tuple(idx)


@dataclass(frozen=True)
class ValueField:
    grid: SpaceTimeGrid
    values: np.ndarray  # [nt+1, *shape]
    scheme_meta: dict

    def __post_init__(self):
        self.values.setflags(write=False)

    def at(self, t: float, x) -> float:
        it = min(max(int(round(t / self.grid.dt)), 0), self.grid.nt)
        return float(self.values[it][self.grid.index_of(x)])


@dataclass(frozen=True)
class PolicyField:
    grid: SpaceTimeGrid
    control_points: np.ndarray   # [k, ka]
    argmax: np.ndarray           # [nt+1, *shape] control indices
    stop_mask: np.ndarray        # [nt+1, *shape]; final slice all True
    stop_tolerance: float | None  # the eps flag (None = local default)

    def __post_init__(self):
        self.argmax.setflags(write=False)
        self.stop_mask.setflags(write=False)

    def _time_index(self, t: float) -> int:
        return min(max(int(round(t / self.grid.dt)), 0), self.grid.nt)

    def _space_indices(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = []
        for j in range(self.grid.dim):
            i = np.rint((X[:, j] - self.grid.box.lo[j]) / self.grid.dxs[j]).astype(np.int64)
            idx.append(np.clip(i, 0, self.grid.nx[j] - 1))
        return tuple(idx)

    def control_indices(self, t: float, X: np.ndarray) -> np.ndarray:
        """Nearest-node policy lookup (constant extension outside the box)."""
        return self.argmax[self._time_index(t)][self._space_indices(X)]

    def stop_at(self, t: float, X: np.ndarray) -> np.ndarray:
        return self.stop_mask[self._time_index(t)][self._space_indices(X)]


class _Scheme:
    """Precomputed arrays and the single explicit backward step."""

    def __init__(self, spec: ProblemSpec, grid: SpaceTimeGrid, trunc, generator):
        if spec.dim > 2:
            raise ValueError("the finite-difference solver handles d <= 2 only")
        if generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        self.spec = spec
        self.grid = grid
        self.trunc = trunc
        self.generator = generator
        self.shape = grid.shape
        self.d = grid.dim
        self.dxs = grid.dxs
        self.dt = grid.dt
        self.X = grid.nodes()
        self.n = self.X.shape[0]
        coeffs = spec.coefficients

        if trunc is not None:
            self.rho_n = cutoff_batch(trunc.n, self.X).reshape(self.shape)
            self.rho_m = cutoff_batch(trunc.m, self.X).reshape(self.shape)

        self.sigma_const = coeffs.sigma_constant
        if self.sigma_const:
            self._set_diffusion(spec.sigma(0.0, self.X))

        if generator == "dominating":
            c = dominating_constant(spec)
            xn = np.linalg.norm(self.X, axis=1).reshape(self.shape)
            self.phi_drift = c * (1.0 + xn)                      # multiplies |grad v . sigma|
            self.phi_const = c * (1.0 + xn ** spec.growth.p)     # zero-order part

        self.f_hoisted = None
        self.gamma_hoisted = None
        if coeffs.f_t_free:
            self.f_hoisted = [
                spec.f(0.0, self.X, spec.controls.points[k]) for k in range(spec.controls.k)
            ]
        if coeffs.gamma_t_free:
            self.gamma_hoisted = [
                spec.gamma(0.0, self.X, spec.controls.points[k]).reshape(self.shape)
                for k in range(spec.controls.k)
            ]
        self.h_hoisted = spec.h(0.0, self.X).reshape(self.shape) if coeffs.h_t_free else None
        self.cfl_worst = 0.0

    # -- coefficient plumbing --------------------------------------------------

    def _set_diffusion(self, sig):
        """Cache diffusion stencil pieces for the slice covariance sigma sigma^T."""
        A = np.einsum("nij,nkj->nik", sig, sig)
        self.A_diag = [A[:, j, j].reshape(self.shape) for j in range(self.d)]
        self.sigma_diag = [sig[:, j, j].reshape(self.shape) for j in range(self.d)]
        if self.d == 2:
            self.A_cross = A[:, 0, 1].reshape(self.shape)
            off = max(float(np.max(np.abs(sig[:, 0, 1]))), float(np.max(np.abs(sig[:, 1, 0]))))
            self.sigma_off_diag = off
            # monotone cross stencil needs grid-aligned diagonal dominance
            dd = np.minimum(
                self.A_diag[0] / self.dxs[0] ** 2 - np.abs(self.A_cross) / (self.dxs[0] * self.dxs[1]),
                self.A_diag[1] / self.dxs[1] ** 2 - np.abs(self.A_cross) / (self.dxs[0] * self.dxs[1]),
            )
            if float(np.min(dd)) < -1e-12:
                raise ValueError(
                    "diffusion matrix is not diagonally dominant on the grid; "
                    "the cross-derivative stencil would lose monotonicity"
                )
        else:
            self.A_cross = None
            self.sigma_off_diag = 0.0

    def _slice_coeffs(self, t: float):
        if not self.sigma_const:
            self._set_diffusion(self.spec.sigma(t, self.X))
        if self.generator == "dominating" and self.sigma_off_diag > 1e-12:
            raise ValueError("dominating-generator solves require diagonal sigma")

    def _drift(self, t: float, k: int) -> np.ndarray:
        if self.f_hoisted is not None:
            return self.f_hoisted[k]
        return self.spec.f(t, self.X, self.spec.controls.points[k])

    def _gamma(self, t: float, k: int) -> np.ndarray:
        if self.gamma_hoisted is not None:
            return self.gamma_hoisted[k]
        return self.spec.gamma(t, self.X, self.spec.controls.points[k]).reshape(self.shape)

    def h_slice(self, t: float) -> np.ndarray:
        if self.h_hoisted is not None:
            return self.h_hoisted
        return self.spec.h(t, self.X).reshape(self.shape)

    # -- stencil views ----------------------------------------------------------

    def _views(self, W):
        Wp = np.pad(W, 1, mode="edge")
        if self.d == 1:
            up = [Wp[2:]]
            dn = [Wp[:-2]]
        else:
            up = [Wp[2:, 1:-1], Wp[1:-1, 2:]]
            dn = [Wp[:-2, 1:-1], Wp[1:-1, :-2]]
        return Wp, up, dn

    # -- the explicit step -------------------------------------------------------

    def step(self, W: np.ndarray, t: float):
        """One backward step from slice W with coefficients frozen at time t.

        Returns (vtilde, generator_values); the caller projects on the obstacle.
        """
        self._slice_coeffs(t)
        Wp, up, dn = self._views(W)
        dxs = self.dxs

        diff = np.zeros_like(W)
        for j in range(self.d):
            diff = diff + 0.5 * self.A_diag[j] * (up[j] - 2.0 * W + dn[j]) / dxs[j] ** 2
        if self.d == 2 and self.A_cross is not None and np.any(self.A_cross != 0.0):
            al = self.A_cross
            quad = 2.0 * dxs[0] * dxs[1]
            pp, mm = Wp[2:, 2:], Wp[:-2, :-2]
            pm, mp = Wp[2:, :-2], Wp[:-2, 2:]
            ax = up[0] + dn[0] + up[1] + dn[1]
            cross_pos = (2.0 * W + pp + mm - ax) / quad
            cross_neg = (ax - pm - mp - 2.0 * W) / quad
            diff = diff + np.maximum(al, 0.0) * cross_pos + np.minimum(al, 0.0) * cross_neg

        fwd = [(up[j] - W) / dxs[j] for j in range(self.d)]
        bwd = [(dn[j] - W) / dxs[j] for j in range(self.d)]

        outflow = sum(self.A_diag[j] / dxs[j] ** 2 for j in range(self.d))
        if self.d == 2 and self.A_cross is not None:
            outflow = outflow - np.abs(self.A_cross) / (dxs[0] * dxs[1])

        if self.generator == "dominating":
            acc = np.zeros_like(W)
            for j in range(self.d):
                gj = np.maximum(np.maximum(fwd[j], bwd[j]), 0.0)
                acc = acc + (self.sigma_diag[j] * gj) ** 2
            gen = self.phi_drift * np.sqrt(acc) + self.phi_const
            outflow = outflow + self.phi_drift * sum(
                np.abs(self.sigma_diag[j]) / dxs[j] for j in range(self.d)
            )
        else:
            best = np.full(self.shape, -np.inf)
            drift_scale = np.zeros_like(W)
            for k in range(self.spec.controls.k):
                F = self._drift(t, k)
                adv = np.zeros_like(W)
                scale = np.zeros_like(W)
                for j in range(self.d):
                    Fj = F[:, j].reshape(self.shape)
                    adv = adv + np.maximum(Fj, 0.0) * fwd[j] + np.maximum(-Fj, 0.0) * bwd[j]
                    scale = scale + np.abs(Fj) / dxs[j]
                best = np.maximum(best, adv + self._gamma(t, k))
                drift_scale = np.maximum(drift_scale, scale)
            if self.trunc is not None:
                gen = truncate_values(best, self.rho_n, self.rho_m)
            else:
                gen = best
            outflow = outflow + drift_scale

        ratio = self.dt * float(np.max(outflow))
        self.cfl_worst = max(self.cfl_worst, ratio)
        if ratio > 1.0 + 1e-9:
            raise ValueError(
                f"CFL violation: dt * outflow = {ratio:.4f} > 1 at t={t:.6g}; refine nt"
            )

        return W + self.dt * (diff + gen), gen


def _rate_bound(spec: ProblemSpec, box: Box, nx, generator: str) -> float:
    """Conservative max outflow rate used to pick nt."""
    probe = SpaceTimeGrid(box=box, nx=nx, nt=1, horizon_T=spec.horizon_T)
    X = probe.nodes()
    dxs = probe.dxs
    times = (
        [0.0]
        if spec.coefficients.sigma_constant and spec.coefficients.f_t_free
        else [0.0, 0.5 * spec.horizon_T, spec.horizon_T]
    )
    worst = 0.0
    for t in times:
        sig = spec.sigma(t, X)
        A = np.einsum("nij,nkj->nik", sig, sig)
        rate = sum(A[:, j, j] / dxs[j] ** 2 for j in range(spec.dim))
        if generator == "dominating":
            c = dominating_constant(spec)
            xn = np.linalg.norm(X, axis=1)
            for j in range(spec.dim):
                rate = rate + c * (1.0 + xn) * np.abs(sig[:, j, j]) / dxs[j]
        else:
            drift = np.zeros(X.shape[0])
            for k in range(spec.controls.k):
                F = spec.f(t, X, spec.controls.points[k])
                drift = np.maximum(drift, sum(np.abs(F[:, j]) / dxs[j] for j in range(spec.dim)))
            rate = rate + drift
        worst = max(worst, float(np.max(rate)))
    return worst


def make_grid(
    spec: ProblemSpec,
    nx,
    nt: int | None = None,
    cfl: float = 0.9,
    generator: str = "hstar",
    box: Box | None = None,
) -> SpaceTimeGrid:
    """Build a grid; when nt is omitted it is set from the CFL bound."""
    box = box or spec.domain
    nx = (nx,) * box.dim if isinstance(nx, int) else tuple(nx)
    if nt is None:
        rate = _rate_bound(spec, box, nx, generator)
        nt = max(1, math.ceil(spec.horizon_T * rate / cfl))
    return SpaceTimeGrid(box=box, nx=nx, nt=int(nt), horizon_T=spec.horizon_T)


def solve(
    spec: ProblemSpec,
    grid: SpaceTimeGrid,
    trunc: TruncationIndex | None = None,
    generator: str = "hstar",
) -> ValueField:
    """Backward sweep; terminal slice is g exactly, every slice obeys v >= h."""
    if spec.dim != grid.dim:
        raise ValueError("grid dimension does not match the problem")
    sch = _Scheme(spec, grid, trunc, generator)
    nt = grid.nt
    times = grid.times
    values = np.empty((nt + 1, *grid.shape))
    values[nt] = spec.g(sch.X).reshape(grid.shape)
    for i in range(nt - 1, -1, -1):
        vt, _ = sch.step(values[i + 1], float(times[i + 1]))
        values[i] = np.maximum(vt, sch.h_slice(float(times[i])))
    meta = {
        "generator": generator,
        "trunc": None if trunc is None else (trunc.n, trunc.m),
        "cfl_ratio": sch.cfl_worst,
        "upwind": "one-sided per drift sign",
        "boundary": "zero-gradient edge extension",
        "coeff_time": "source slice",
    }
    return ValueField(grid=grid, values=values, scheme_meta=meta)


def rerun_projection(
    spec: ProblemSpec,
    field: ValueField,
    trunc: TruncationIndex | None = None,
    generator: str = "hstar",
):
    """Replay the scheme on a solved field to expose the projection.

    Returns (vtilde [nt, *shape], h [nt+1, *shape]): the pre-projection
    step values and the obstacle slices.  Wherever vtilde < h the stored
    field equals h bit-for-bit, since the sweep is deterministic.
    """
    grid = field.grid
    sch = _Scheme(spec, grid, trunc, generator)
    times = grid.times
    vtilde = np.empty((grid.nt, *grid.shape))
    h_all = np.empty((grid.nt + 1, *grid.shape))
    for i in range(grid.nt):
        vtilde[i], _ = sch.step(field.values[i + 1], float(times[i + 1]))
        h_all[i] = sch.h_slice(float(times[i]))
    h_all[grid.nt] = sch.h_slice(float(times[grid.nt]))
    return vtilde, h_all


def _gradient(W: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Central differences (one-sided at edges), flat [n_nodes, d]."""
    grads = np.gradient(W, *[grid.axes[j] for j in range(grid.dim)], edge_order=1)
    if grid.dim == 1:
        grads = [grads]
    return np.stack([g.ravel() for g in grads], axis=1)


# strict binding margin: obstacle pushes below this are treated as round-off
BINDING_FLOOR = 1e-9


def extract_policy(
    spec: ProblemSpec,
    field: ValueField,
    eps: float | None = None,
    field_trunc: TruncationIndex | None = None,
    field_generator: str = "hstar",
) -> PolicyField:
    """Feedback control and stopping region read off a solved value field.

    The control at a node maximises H(t, x, grad v . sigma, a).  A node joins
    the stopping region when the obstacle actually binds: the pre-projection
    step vtilde falls below h by more than a round-off floor, and the stored
    value sits within ``eps`` of h (eps defaults to 10 dt (1+|generator|),
    the local scale the scheme cannot resolve).  The final slice stops by
    convention.
    """
    grid = field.grid
    sch = _Scheme(spec, grid, field_trunc, field_generator)
    nt = grid.nt
    times = grid.times
    argmax = np.empty((nt + 1, *grid.shape), dtype=np.int16)
    stop = np.zeros((nt + 1, *grid.shape), dtype=bool)

    scale = 1.0 + float(np.max(np.abs(field.values)))
    delta = BINDING_FLOOR * scale

    for i in range(nt + 1):
        t = float(times[i])
        W = field.values[i]
        Z = np.einsum("ni,nij->nj", _gradient(W, grid), spec.sigma(t, sch.X))
        _, arg = sup_hamiltonian_batch(spec, t, sch.X, Z)
        argmax[i] = arg.reshape(grid.shape).astype(np.int16)

    for i in range(nt):
        vt, gen = sch.step(field.values[i + 1], float(times[i + 1]))
        h_i = sch.h_slice(float(times[i]))
        eps_node = eps if eps is not None else 10.0 * grid.dt * (1.0 + np.abs(gen))
        binding = (h_i - vt) > delta
        stop[i] = binding & (field.values[i] - h_i <= eps_node)
    stop[nt] = True

    return PolicyField(
        grid=grid,
        control_points=spec.controls.points,
        argmax=argmax,
        stop_mask=stop,
        stop_tolerance=eps,
    )


@dataclass(frozen=True)
class LadderReport:
    """Truncation-ladder outcome against the untruncated solve."""

    n_list: tuple[int, ...]
    m_list: tuple[int, ...]
    sup_gap_core: dict        # (n, m) -> sup |u_bar - u| on the interior core
    violation_n: float        # worst breach of monotone-in-n ordering
    violation_m: float        # worst breach of antitone-in-m ordering
    exhaustion_gap: float | None  # max |u_bar - u| when cutoffs cover the box

    @property
    def monotone(self) -> bool:
        return self.violation_n <= 1e-10 and self.violation_m <= 1e-10


def ladder(
    spec: ProblemSpec,
    grid: SpaceTimeGrid,
    n_list,
    m_list,
    core_fraction: float = 0.6,
) -> LadderReport:
    """Solve across truncation pairs and check the comparison orderings."""
    n_list = tuple(sorted(int(v) for v in n_list))
    m_list = tuple(sorted(int(v) for v in m_list))
    base = solve(spec, grid)
    core = grid.core_mask(core_fraction)

    fields = {}
    for n in n_list:
        for m in m_list:
            fields[(n, m)] = solve(spec, grid, trunc=TruncationIndex(n=n, m=m)).values

    sup_gap = {
        key: float(np.max(np.abs(vals[:, core] - base.values[:, core])))
        for key, vals in fields.items()
    }

    viol_n = 0.0
    for m in m_list:
        for n1, n2 in itertools.pairwise(n_list):
            viol_n = max(viol_n, float(np.max(fields[(n1, m)] - fields[(n2, m)])))
    viol_m = 0.0
    for n in n_list:
        for m1, m2 in itertools.pairwise(m_list):
            viol_m = max(viol_m, float(np.max(fields[(n, m2)] - fields[(n, m1)])))

    exhaustion = None
    cover = grid.box.radius + 1.0
    big = [(n, m) for (n, m) in fields if n >= cover and m >= cover]
    if big:
        exhaustion = min(float(np.max(np.abs(fields[key] - base.values))) for key in big)

    return LadderReport(
        n_list=n_list,
        m_list=m_list,
        sup_gap_core=sup_gap,
        violation_n=viol_n,
        violation_m=viol_m,
        exhaustion_gap=exhaustion,
    )


def comparison_check(spec: ProblemSpec, grid: SpaceTimeGrid, pairs) -> dict:
    """Solve ordered (g, h) pairs and measure any breach of v1 <= v2.

    ``pairs`` is a sequence of ((g1, h1), (g2, h2)) with g callables X -> [n]
    and h callables (t, X) -> [n], the first pair dominated by the second.
    """
    results = []
    worst = 0.0
    for (g1, h1), (g2, h2) in pairs:
        v = []
        for g_fn, h_fn in ((g1, h1), (g2, h2)):
            coeffs = dc_replace(
                spec.coefficients, g=g_fn, h=h_fn, g_expr=None, h_expr=None,
                h_t_free=False,
            )
            v.append(solve(dc_replace(spec, coefficients=coeffs), grid).values)
        violation = float(np.max(v[0] - v[1]))
        results.append(violation)
        worst = max(worst, violation)
    return {"violations": results, "max_violation": worst, "passed": worst <= 1e-10}
