"""Hamiltonian of the control problem and its truncations.

With z a row vector, H(t,x,z,a) = z . sigma(t,x)^-1 f(t,x,a) + gamma(t,x,a)
and H*(t,x,z) = max over the finite control set.  The two-sided truncation
damps the positive part beyond radius n and the negative part beyond radius m:

    Hbar^{n,m} = H*^+ rho_n(x) - H*^- rho_m(x),
    rho_m(x)   = clip(m + 1 - |x|, 0, 1).

The unit direction ell(z) satisfies ell(z) . z = |z| and |ell_i| <= 1; it is
the measure-change direction used when a bounded generator is linearised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec

__all__ = [
    "HamiltonianValue",
    "TruncationIndex",
    "hamiltonian",
    "sup_hamiltonian",
    "sup_hamiltonian_batch",
    "cutoff",
    "cutoff_batch",
    "truncated_sup_hamiltonian",
    "truncate_values",
    "unit_direction",
    "unit_direction_batch",
    "tail_norms",
    "TIE_TOL",
]

# relative tolerance under which two control values count as tied
TIE_TOL = 1e-12


@dataclass(frozen=True)
class HamiltonianValue:
    value: float
    argmax: np.ndarray  # first maximiser in control-set order
    argmax_index: int
    ties: int           # how many controls achieve the max within TIE_TOL


@dataclass(frozen=True)
class TruncationIndex:
    n: int  # radius beyond which the positive part is cut
    m: int  # radius beyond which the negative part is cut

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("truncation radii must be >= 1")


def _theta(spec: ProblemSpec, t: float, X: np.ndarray, a) -> np.ndarray:
    """sigma^{-1} f, shape [n, d]."""
    sig = spec.sigma(t, X)
    fv = spec.f(t, X, a)
    return np.linalg.solve(sig, fv[..., None])[..., 0]


def hamiltonian(spec: ProblemSpec, t: float, x, z, a) -> float:
    """H(t,x,z,a) for a single point; ``a`` must belong to the control set."""
    spec.controls.index_of(a)  # membership check
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    X = x[None, :]
    sig = spec.sigma(t, X)[0]
    cond = np.linalg.cond(sig)
    if not np.isfinite(cond) or cond > 1e8:
        raise ValueError(f"sigma is singular at (t={t}, x={x}) (cond={cond:.3g})")
    theta = np.linalg.solve(sig, spec.f(t, X, a)[0])
    return float(z @ theta + spec.gamma(t, X, a)[0])


def sup_hamiltonian(spec: ProblemSpec, t: float, x, z) -> HamiltonianValue:
    """H*(t,x,z): maximum of H over the control set, first maximiser kept."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    X = x[None, :]
    vals = np.empty(spec.controls.k)
    for k in range(spec.controls.k):
        a = spec.controls.points[k]
        theta = _theta(spec, t, X, a)[0]
        vals[k] = z @ theta + spec.gamma(t, X, a)[0]
    best = int(np.argmax(vals))
    vmax = float(vals[best])
    tol = TIE_TOL * max(1.0, abs(vmax))
    ties = int(np.sum(vals >= vmax - tol))
    first = int(np.argmax(vals >= vmax - tol))
    return HamiltonianValue(
        value=vmax,
        argmax=spec.controls.points[first].copy(),
        argmax_index=first,
        ties=ties,
    )


def sup_hamiltonian_batch(spec: ProblemSpec, t, X: np.ndarray, Z: np.ndarray):
    """Vectorised H* over rows of (X, Z).

    Returns (values [n], argmax indices [n]); the argmax is the first
    maximiser in control-set enumeration order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = X.shape[0]
    vals = np.empty((spec.controls.k, n))
    for k in range(spec.controls.k):
        a = spec.controls.points[k]
        theta = _theta(spec, t, X, a)
        vals[k] = np.einsum("nd,nd->n", Z, theta) + spec.gamma(t, X, a)
    best = np.max(vals, axis=0)
    # first index achieving the max within the tie tolerance
    tol = TIE_TOL * np.maximum(1.0, np.abs(best))
    arg = np.argmax(vals >= (best - tol)[None, :], axis=0)
    return best, arg


def cutoff(m: float, x) -> float:
    """rho_m(x) = clip(m + 1 - |x|, 0, 1); equals 1 for |x| <= m, 0 beyond m+1."""
    if m < 1:
        raise ValueError("cutoff level must be >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.clip(m + 1.0 - np.linalg.norm(x), 0.0, 1.0))


def cutoff_batch(m: float, X: np.ndarray) -> np.ndarray:
    if m < 1:
        raise ValueError("cutoff level must be >= 1")
    return np.clip(m + 1.0 - np.linalg.norm(np.atleast_2d(X), axis=1), 0.0, 1.0)


def truncate_values(values: np.ndarray, rho_n: np.ndarray, rho_m: np.ndarray) -> np.ndarray:
    """Apply the two-sided damping to raw H* values (vectorised)."""
    pos = np.maximum(values, 0.0)
    neg = np.maximum(-values, 0.0)
    return pos * rho_n - neg * rho_m


def truncated_sup_hamiltonian(spec: ProblemSpec, trunc: TruncationIndex, t: float, x, z) -> float:
    """Hbar^{n,m}(t,x,z); equals H* wherever |x| <= min(n, m)."""
    hv = sup_hamiltonian(spec, t, x, z).value
    x = np.atleast_1d(np.asarray(x, dtype=float))
    rn = cutoff(trunc.n, x)
    rm = cutoff(trunc.m, x)
    return float(max(hv, 0.0) * rn - max(-hv, 0.0) * rm)


def unit_direction(z) -> np.ndarray:
    """Direction ell(z) with ell(z) . z = |z| componentwise-bounded by 1.

    ell_i = (|z_{i:}| - |z_{i+1:}|) / z_i when z_i != 0 and 0 otherwise,
    with |.| the Euclidean norm of the trailing subvector; the last component
    degenerates to sign(z_d).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = z.size
    tails = np.zeros(d + 1)
    for i in range(d - 1, -1, -1):
        tails[i] = np.hypot(z[i], tails[i + 1])
    ell = np.zeros(d)
    nz = z != 0.0
    ell[nz] = (tails[:-1][nz] - tails[1:][nz]) / z[nz]
    return ell


def tail_norms(Z: np.ndarray) -> np.ndarray:
    """Trailing-subvector norms [n, d+1] by a backward hypot cascade.

    Column i holds |Z[:, i:]|; column 0 is the full Euclidean norm and the
    reference against which the direction identity is exact up to a few ulp.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n, d = Z.shape
    tails = np.zeros((n, d + 1))
    for i in range(d - 1, -1, -1):
        tails[:, i] = np.hypot(Z[:, i], tails[:, i + 1])
    return tails


def unit_direction_batch(Z: np.ndarray) -> np.ndarray:
    """Row-wise ``unit_direction``; Z [n, d] -> ell [n, d]."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    tails = tail_norms(Z)
    ell = np.zeros_like(Z)
    nz = Z != 0.0
    diffs = tails[:, :-1] - tails[:, 1:]
    ell[nz] = diffs[nz] / Z[nz]
    return ell
