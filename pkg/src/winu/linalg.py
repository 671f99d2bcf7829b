"""Dense and matrix-free linear algebra kernels.

Dense matrices are plain ``float64`` numpy arrays. Factorizations are
delegated to LAPACK through numpy/scipy; what lives here is the validation,
the error policy and the conjugate-gradient loop used for matrix-free
Newton systems.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonFiniteEncountered,
    NotPositiveDefinite,
    SingularCore,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
CG_REL_TOL = 1e-8
PIVOT_FLOOR = 1e-14


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteEncountered(f"{name} has non-finite entries")
    return a


def _check_square(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")


@dataclass(frozen=True)
class SpdFactorization:
    """Lower Cholesky factor of a symmetric positive definite matrix."""

    source: np.ndarray
    factor: np.ndarray

    @property
    def dimension(self) -> int:
        return self.source.shape[0]


def cholesky_factor(m) -> SpdFactorization:
    """Cholesky-factor a symmetric matrix.

    The input is symmetrized as ``(m + m.T) / 2`` after checking that it is
    symmetric to within ``SYMMETRY_TOL`` entrywise.

    Raises:
        DimensionMismatch: ``m`` is not square or not symmetric.
        NotPositiveDefinite: a non-positive pivot was met.
    """
    a = as_matrix(m)
    _check_square(a, "matrix")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL:
        raise DimensionMismatch(f"matrix is not symmetric (max |m - m.T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    try:
        factor = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            "matrix is not positive definite; add lambda damping"
        ) from exc
    if not np.all(np.isfinite(factor)) or np.any(np.diag(factor) <= 0.0):
        raise NotPositiveDefinite("Cholesky factor has a non-positive or non-finite pivot")
    return SpdFactorization(source=a, factor=factor)


def spd_solve(f: SpdFactorization, b) -> np.ndarray:
    """Solve ``f.source @ x = b``; ``b`` may be a vector or a matrix of columns."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dimension:
        raise DimensionMismatch(
            f"right-hand side has leading dimension {b.shape[0]}, expected {f.dimension}"
        )
    return scipy.linalg.cho_solve((f.factor, True), b, check_finite=False)


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free square operator."""

    dimension: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dimension,):
            raise DimensionMismatch(
                f"operator of dimension {self.dimension} applied to shape {v.shape}"
            )
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.dimension,):
            raise DimensionMismatch(f"operator returned shape {out.shape}")
        return out

    @classmethod
    def from_matrix(cls, m) -> "LinearOperator":
        a = as_matrix(m)
        _check_square(a, "matrix")
        return cls(a.shape[0], lambda v: a @ v)

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        if other.dimension != self.dimension:
            raise DimensionMismatch("operator dimensions differ")
        return LinearOperator(self.dimension, lambda v: self(v) - other(v))


def conjugate_gradient(
    op: LinearOperator | Callable[[np.ndarray], np.ndarray],
    b,
    rel_tol: float = CG_REL_TOL,
    max_iters: int | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[np.ndarray, int]:
    """Solve ``op(x) = b`` for SPD ``op`` by conjugate gradients.

    Iterates until ``||op(x) - b|| / ||b|| <= rel_tol`` on the recursive
    residual, then confirms the criterion on the true residual.

    Args:
        op: symmetric positive definite operator.
        b: right-hand side.
        rel_tol: relative residual tolerance.
        max_iters: iteration budget; defaults to ``10 * dimension``.
        callback: called as ``callback(iteration, rel_residual)``.

    Returns:
        ``(x, iterations)``.

    Raises:
        NoConvergence: budget exhausted; carries the final residual norm.
        NonFiniteEncountered: a NaN/inf appeared (typically an indefinite op).
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise DimensionMismatch("conjugate_gradient expects a vector right-hand side")
    dim = b.shape[0]
    if isinstance(op, LinearOperator) and op.dimension != dim:
        raise DimensionMismatch(f"operator dimension {op.dimension} != rhs length {dim}")
    if max_iters is None:
        max_iters = 10 * dim
    b_norm = np.linalg.norm(b)
    x = np.zeros(dim)
    if b_norm == 0.0:
        return x, 0

    r = b.copy()
    p = r.copy()
    rr = r @ r
    for it in range(1, max_iters + 1):
        ap = op(p)
        pap = p @ ap
        if not np.isfinite(pap) or pap <= 0.0:
            raise NonFiniteEncountered(
                f"CG curvature p.Ap = {pap:.3e} at iteration {it}; operator not SPD"
            )
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        rel = np.sqrt(rr_new) / b_norm
        if callback is not None:
            callback(it, rel)
        if not np.isfinite(rel):
            raise NonFiniteEncountered(f"CG residual became non-finite at iteration {it}")
        if rel <= rel_tol:
            true_rel = np.linalg.norm(op(x) - b) / b_norm
            if true_rel <= rel_tol:
                return x, it
            # recursive residual drifted; restart from the true residual
            r = b - op(x)
            rr_new = r @ r
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new
    final = np.linalg.norm(op(x) - b)
    raise NoConvergence(
        f"CG did not reach rel_tol={rel_tol:g} in {max_iters} iterations "
        f"(relative residual {final / b_norm:.3e})",
        residual=float(final),
        iterations=max_iters,
    )


@dataclass(frozen=True)
class LuFactorization:
    """Partial-pivoted LU of a general square matrix."""

    lu: np.ndarray
    piv: np.ndarray
    anorm: float

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.lu.shape[0]:
            raise DimensionMismatch(
                f"right-hand side has leading dimension {b.shape[0]}, "
                f"expected {self.lu.shape[0]}"
            )
        return scipy.linalg.lu_solve((self.lu, self.piv), b, check_finite=False)

    def condition_estimate(self) -> float:
        """LAPACK 1-norm condition number estimate."""
        if self.lu.shape[0] == 0:
            return 1.0
        rcond, info = scipy.linalg.lapack.dgecon(self.lu, self.anorm, norm="1")
        if info != 0 or rcond == 0.0:
            return float("inf")
        return float(1.0 / rcond)


def lu_factor(m, pivot_floor: float = PIVOT_FLOOR) -> LuFactorization:
    """Factor ``m`` with partial pivoting.

    Raises:
        SingularCore: some pivot has magnitude below ``pivot_floor``.
    """
    a = as_matrix(m)
    _check_square(a, "matrix")
    anorm = float(np.max(np.sum(np.abs(a), axis=0))) if a.size else 0.0
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularCore
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() < pivot_floor:
        smallest = float(pivots.min())
        raise SingularCore(
            f"pivot magnitude {smallest:.3e} below floor {pivot_floor:g}; "
            "forget curvature cancels full curvature (try a larger lambda)",
            pivot=smallest,
        )
    return LuFactorization(lu=lu, piv=piv, anorm=anorm)


def solve_general(m, b, pivot_floor: float = PIVOT_FLOOR) -> np.ndarray:
    """Solve a general (possibly nonsymmetric, indefinite) square system."""
    return lu_factor(m, pivot_floor).solve(b)
