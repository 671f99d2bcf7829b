"""Curvature of the regularized objective and of the forget set.

The Hessian used throughout is the generalized Gauss-Newton matrix

    H = (1/n) sum_i J_i^T B_i J_i + lam I

which is exact for ridge regression. Forget-set terms keep the full-set
``1/n`` normalization so that ``H - H_f`` is the retain curvature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cache
from .errors import DimensionMismatch, DimensionTooLarge, EmptyForgetSet, WrongLossKind
from .linalg import (
    CG_REL_TOL,
    LinearOperator,
    SpdFactorization,
    as_matrix,
    cholesky_factor,
    conjugate_gradient,
    spd_solve,
)
from .models import CROSS_ENTROPY, Linearization, ModelSpec, ggn_diagonal_sum, per_sample_vjp, softmax

DENSE_LIMIT = 20_000
_JAC_CHUNK_ENTRIES = 4_000_000

EXACT_INVERSE = "exact_inverse"
MATRIX_FREE = "matrix_free"
DIAGONAL = "diagonal"


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _ggn_sum_dense(spec: ModelSpec, theta, x) -> np.ndarray:
    """``sum_i J_i^T B_i J_i`` as a dense ``d x d`` matrix."""
    d = spec.num_params
    x = _rows(x)
    if spec.kind == "ridge":
        return x.T @ x
    out = np.zeros((d, d))
    chunk = max(1, _JAC_CHUNK_ENTRIES // (spec.output_dim * d))
    for start in range(0, x.shape[0], chunk):
        xb = x[start : start + chunk]
        lin = Linearization(spec, theta, xb)
        p = lin.probs
        c = spec.output_dim
        # B = diag(p) - p p^T = sum_k p_k r_k r_k^T with r_k = p - e_k; form sqrt(B) J rows
        rows = np.empty((xb.shape[0], c, d))
        for k in range(c):
            r = p.copy()
            r[:, k] -= 1.0
            rows[:, k, :] = np.sqrt(p[:, k : k + 1]) * per_sample_vjp(spec, theta, xb, r)
        flat = rows.reshape(-1, d)
        out += flat.T @ flat
    return out


def full_hessian_exact(spec: ModelSpec, theta, x, lam: float, n: int | None = None) -> np.ndarray:
    """Dense ``(1/n) sum_i J_i^T B_i J_i + lam I`` over the rows of ``x``.

    Raises:
        DimensionTooLarge: ``d`` exceeds the dense materialization guard.
    """
    d = spec.num_params
    if d > DENSE_LIMIT:
        raise DimensionTooLarge(f"d={d} exceeds dense limit {DENSE_LIMIT}; use matrix-free mode")
    x = _rows(x)
    n = x.shape[0] if n is None else n
    h = _ggn_sum_dense(spec, theta, x) / n
    h = 0.5 * (h + h.T)
    h[np.diag_indices(d)] += lam
    return h


def forget_hessian_exact(spec: ModelSpec, theta, x_forget, n: int) -> np.ndarray:
    """Dense ``H_f = (1/n) sum_{j in D_f} J_j^T B_j J_j``."""
    x_forget = _rows(x_forget)
    if x_forget.shape[0] == 0:
        raise EmptyForgetSet("forget set is empty")
    h = _ggn_sum_dense(spec, theta, x_forget) / n
    return 0.5 * (h + h.T)


def ggn_operator(spec: ModelSpec, theta, x, lam: float, n: int | None = None) -> LinearOperator:
    """Matrix-free ``v -> ((1/n) sum J^T B J + lam I) v`` with cached activations."""
    x = _rows(x)
    n = x.shape[0] if n is None else n
    if x.shape[0] == 0:
        return LinearOperator(spec.num_params, lambda v: lam * v)
    lin = Linearization(spec, theta, x)
    return LinearOperator(spec.num_params, lambda v: lin.ggn_sum_product(v) / n + lam * v)


def ggn_vector_product(spec: ModelSpec, theta, x, lam: float, v, n: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.num_params,):
        raise DimensionMismatch(f"vector has shape {v.shape}, expected ({spec.num_params},)")
    return ggn_operator(spec, theta, x, lam, n)(v)


def forget_ggn_operator(spec: ModelSpec, theta, x_forget, n: int) -> LinearOperator:
    x_forget = _rows(x_forget)
    if x_forget.shape[0] == 0:
        raise EmptyForgetSet("forget set is empty")
    lin = Linearization(spec, theta, x_forget)
    return LinearOperator(spec.num_params, lambda v: lin.ggn_sum_product(v) / n)


def forget_ggn_vector_product(spec: ModelSpec, theta, x_forget, v, n: int) -> np.ndarray:
    """``(1/n) sum_{j in D_f} J_j^T B_j J_j v``; note ``1/n``, not ``1/m``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.num_params,):
        raise DimensionMismatch(f"vector has shape {v.shape}, expected ({spec.num_params},)")
    return forget_ggn_operator(spec, theta, x_forget, n)(v)


def retain_operator(spec: ModelSpec, theta, x, forget_indices, lam: float) -> LinearOperator:
    """``H - H_f`` formed by subtracting the forget GGN-VP from the full GGN-VP."""
    x = _rows(x)
    n = x.shape[0]
    full = ggn_operator(spec, theta, x, lam, n)
    forget = forget_ggn_operator(spec, theta, x[np.asarray(forget_indices, dtype=int)], n)
    return full - forget


def diagonal_ggn(
    spec: ModelSpec, theta, x, lam: float, n: int | None = None, basis=None
) -> np.ndarray:
    """Exact diagonal of the GGN plus ``lam``.

    With ``basis`` (``d x k`` orthonormal columns) the diagonal is taken in
    subspace coordinates, ``diag(P^T GGN P) + lam``.
    """
    x = _rows(x)
    n = x.shape[0] if n is None else n
    if basis is None:
        if x.shape[0] == 0:
            return np.full(spec.num_params, float(lam))
        return ggn_diagonal_sum(spec, theta, x) / n + lam
    basis = as_matrix(basis, "basis")
    if basis.shape[0] != spec.num_params:
        raise DimensionMismatch("basis rows must equal the parameter count")
    k = basis.shape[1]
    acc = np.zeros(k)
    if x.shape[0]:
        lin = Linearization(spec, theta, x)
        for col in range(k):
            jp = lin.jvp(basis[:, col])
            if spec.loss == CROSS_ENTROPY:
                p = lin.probs
                bjp = p * jp - p * np.sum(p * jp, axis=1, keepdims=True)
            else:
                bjp = jp
            acc[col] = np.sum(jp * bjp)
    return acc / n + lam


@dataclass(frozen=True)
class CurvatureOracle:
    """Access to ``H^{-1}`` in one of three representations."""

    mode: str
    dimension: int
    payload: SpdFactorization | LinearOperator | np.ndarray
    lam: float | None = None
    rel_tol: float = CG_REL_TOL

    @classmethod
    def exact(cls, hessian) -> "CurvatureOracle":
        f = cholesky_factor(hessian)
        return cls(EXACT_INVERSE, f.dimension, f)

    @classmethod
    def matrix_free(cls, op: LinearOperator, rel_tol: float = CG_REL_TOL) -> "CurvatureOracle":
        return cls(MATRIX_FREE, op.dimension, op, rel_tol=rel_tol)

    @classmethod
    def diagonal(cls, diag, lam: float) -> "CurvatureOracle":
        diag = np.asarray(diag, dtype=np.float64)
        if lam <= 0:
            raise ValueError("lam must be positive for a diagonal proxy")
        if diag.ndim != 1 or np.any(diag < lam * (1 - 1e-12)):
            raise ValueError("diagonal proxy entries must be >= lam")
        return cls(DIAGONAL, diag.shape[0], diag, lam=lam)

    def solve_counted(self, b) -> tuple[np.ndarray, int]:
        """Apply ``H^{-1}`` to a vector or to each column of a matrix.

        Returns the result and the total number of CG iterations (0 for
        direct modes).
        """
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"right-hand side has leading dimension {b.shape[0]}, expected {self.dimension}"
            )
        if self.mode == EXACT_INVERSE:
            return spd_solve(self.payload, b), 0
        if self.mode == DIAGONAL:
            d = self.payload
            return (b / d if b.ndim == 1 else b / d[:, None]), 0
        if b.ndim == 1:
            return conjugate_gradient(self.payload, b, rel_tol=self.rel_tol)
        out = np.empty_like(b)
        total = 0
        for j in range(b.shape[1]):
            out[:, j], it = conjugate_gradient(self.payload, b[:, j], rel_tol=self.rel_tol)
            total += it
        return out, total

    def solve(self, b) -> np.ndarray:
        return self.solve_counted(b)[0]

    def save(self, path, meta: dict | None = None):
        if self.mode == MATRIX_FREE:
            raise ValueError("matrix-free oracles cannot be persisted")
        if self.mode == EXACT_INVERSE:
            arrays = {"hessian": self.payload.source, "factor": self.payload.factor}
        else:
            arrays = {"diagonal": self.payload}
        info = dict(meta or {})
        info.update(mode=self.mode, lam=self.lam)
        return cache.write_cache(path, "curvature", arrays, info)

    @classmethod
    def load(cls, path) -> "CurvatureOracle":
        meta, arrays = cache.read_cache(path, "curvature")
        if meta["mode"] == EXACT_INVERSE:
            f = SpdFactorization(source=arrays["hessian"], factor=arrays["factor"])
            return cls(EXACT_INVERSE, f.dimension, f)
        return cls.diagonal(arrays["diagonal"], meta["lam"])


# ---------------------------------------------------------------------------
# Monte-Carlo forget curvature


@dataclass(frozen=True)
class McGradientBank:
    """Columns ``J_j^T (p_j - e_yhat)``, ordered ``j * S + s``."""

    columns: np.ndarray
    sample_count: int
    forget_size: int
    seed: int
    enumerated: bool = False

    def __post_init__(self):
        if self.columns.ndim != 2 or self.columns.shape[1] != self.forget_size * self.sample_count:
            raise DimensionMismatch("bank must have forget_size * sample_count columns")
        if not np.all(np.isfinite(self.columns)):
            raise ValueError("bank has non-finite columns")

    @property
    def dimension(self) -> int:
        return self.columns.shape[0]

    def project(self, basis) -> "McGradientBank":
        """Bank expressed in subspace coordinates, ``P^T G``."""
        return McGradientBank(
            np.asarray(basis).T @ self.columns,
            self.sample_count,
            self.forget_size,
            self.seed,
            self.enumerated,
        )

    def save(self, path):
        meta = dict(
            sample_count=self.sample_count,
            forget_size=self.forget_size,
            seed=self.seed,
            enumerated=self.enumerated,
        )
        return cache.write_cache(path, "mc_bank", {"columns": self.columns}, meta)

    @classmethod
    def load(cls, path) -> "McGradientBank":
        meta, arrays = cache.read_cache(path, "mc_bank")
        return cls(
            arrays["columns"],
            int(meta["sample_count"]),
            int(meta["forget_size"]),
            int(meta["seed"]),
            bool(meta["enumerated"]),
        )


def _uniform(seed: int, j: int, s: int) -> float:
    # one independent stream per (seed, j, s): reproducible and order-independent
    ss = np.random.SeedSequence(seed, spawn_key=(j, s))
    return float(np.random.Generator(np.random.PCG64(ss)).random())


def sample_pseudo_labels(probs: np.ndarray, samples: int, seed: int) -> np.ndarray:
    """Draw ``yhat[j, s] ~ Categorical(probs[j])`` by inverse-CDF sampling."""
    probs = np.asarray(probs, dtype=np.float64)
    m, c = probs.shape
    cdf = np.cumsum(probs, axis=1)
    out = np.empty((m, samples), dtype=np.int64)
    for j in range(m):
        for s in range(samples):
            out[j, s] = min(int(np.searchsorted(cdf[j], _uniform(seed, j, s), side="right")), c - 1)
    return out


def mc_gradient_bank(spec: ModelSpec, theta, x_forget, samples: int, seed: int) -> McGradientBank:
    """Monte-Carlo pseudo-gradients with labels sampled from the model itself.

    Raises:
        WrongLossKind: the model is not a softmax/cross-entropy model.
    """
    if spec.loss != CROSS_ENTROPY:
        raise WrongLossKind("MC pseudo-gradients require cross-entropy loss")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x_forget = _rows(x_forget)
    m = x_forget.shape[0]
    lin = Linearization(spec, theta, x_forget)
    labels = sample_pseudo_labels(lin.probs, samples, seed)
    resid = np.repeat(lin.probs, samples, axis=0)
    resid[np.arange(m * samples), labels.ravel()] -= 1.0
    cols = per_sample_vjp(spec, theta, np.repeat(x_forget, samples, axis=0), resid)
    return McGradientBank(cols.T.copy(), samples, m, seed)


def enumerated_gradient_bank(spec: ModelSpec, theta, x_forget) -> McGradientBank:
    """Exact-expectation bank: every class ``k`` with weight ``sqrt(c p_k)``.

    With ``sample_count = c`` the usual ``1/(n S)`` normalization yields
    ``(1/n) sum_j sum_k p_jk r_jk r_jk^T`` terms, i.e. the exact forget GGN.
    """
    if spec.loss != CROSS_ENTROPY:
        raise WrongLossKind("enumerated bank requires cross-entropy loss")
    x_forget = _rows(x_forget)
    m, c = x_forget.shape[0], spec.output_dim
    probs = softmax(Linearization(spec, theta, x_forget).outputs)
    resid = np.repeat(probs, c, axis=0)
    resid[np.arange(m * c), np.tile(np.arange(c), m)] -= 1.0
    weights = np.sqrt(c * probs.ravel())
    cols = per_sample_vjp(spec, theta, np.repeat(x_forget, c, axis=0), resid * weights[:, None])
    return McGradientBank(cols.T.copy(), c, m, seed=-1, enumerated=True)


def mc_ggn_estimate(bank: McGradientBank, n: int) -> LinearOperator:
    """``v -> (1/(n S)) G (G^T v)``."""
    if n < bank.forget_size:
        raise ValueError("n must be at least the forget-set size")
    g = bank.columns
    scale = 1.0 / (n * bank.sample_count)
    return LinearOperator(bank.dimension, lambda v: scale * (g @ (g.T @ v)))
