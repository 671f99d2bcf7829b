"""Second-order unlearning updates.

Every method returns an :class:`UnlearnUpdate` holding the parameter delta,
never the updated parameters, so a step-size sweep is just a scalar
multiple of one stored delta.

Methods:

* ``linear_woodbury_update``: exact retraining for ridge regression.
* ``winu_output_space``: Woodbury-scaled Newton step with the ``mc x mc``
  output-space core.
* ``newton_retain_cg``: the same Newton step, ``(H - H_f)^{-1} g_f``, solved
  matrix-free by conjugate gradients (uses the full data).
* ``newton_vanilla``: influence-style step ``H^{-1} g_f`` with no curvature
  correction.
* ``mc_winu``: Monte-Carlo forget curvature with the ``mS x mS`` core,
  optionally with a diagonal ``H`` proxy, a parameter subspace and a step
  size.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import cache
from .curvature import (
    CurvatureOracle,
    McGradientBank,
    mc_gradient_bank,
    retain_operator,
)
from .errors import (
    ConfigError,
    CoreTooLarge,
    DimensionMismatch,
    MissingTargets,
    NotConverged,
    WrongLossKind,
)
from .linalg import CG_REL_TOL, PIVOT_FLOOR, as_matrix, conjugate_gradient, lu_factor
from .models import (
    CROSS_ENTROPY,
    ModelSpec,
    forward,
    output_gradient,
    output_hessian_from_outputs,
    per_sample_jacobian,
    vector_jacobian_product,
)

logger = logging.getLogger(__name__)

LINEAR_WOODBURY = "linear_woodbury"
WINU_OUTPUT_SPACE = "winu_output_space"
NEWTON_RETAIN_CG = "newton_retain_cg"
NEWTON_VANILLA = "newton_vanilla"
MC_WINU = "mc_winu"
METHODS = (LINEAR_WOODBURY, WINU_OUTPUT_SPACE, NEWTON_RETAIN_CG, NEWTON_VANILLA, MC_WINU)

OUTPUT_CORE_LIMIT = 5_000
GRAD_WARN = 1e-5
GRAD_REFUSE = 1e-2


@dataclass(frozen=True)
class SubspaceProjection:
    """Orthonormal basis ``P`` (``d x k``) restricting the update to ``span(P)``."""

    basis: np.ndarray

    def __post_init__(self):
        b = as_matrix(self.basis, "basis")
        if b.shape[1] > b.shape[0]:
            raise ConfigError("subspace dimension exceeds parameter dimension")
        err = np.max(np.abs(b.T @ b - np.eye(b.shape[1]))) if b.size else 0.0
        if err > 1e-10:
            raise ConfigError(f"basis columns are not orthonormal (error {err:.2e})")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def random(cls, d: int, k: int, seed: int) -> "SubspaceProjection":
        """Gaussian matrix orthonormalized by QR, with a sign convention for determinism."""
        rng = np.random.Generator(np.random.Philox(seed))
        q, r = np.linalg.qr(rng.standard_normal((d, k)))
        q *= np.where(np.diag(r) < 0, -1.0, 1.0)
        return cls(q)


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    n: int
    lam: float
    eta: float = 1.0
    mc_samples: int = 1
    seed: int = 0
    subspace: SubspaceProjection | None = None
    core_pivot_floor: float = PIVOT_FLOOR

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.method == MC_WINU and self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")


@dataclass(frozen=True)
class ObjectiveExtension:
    """Alternative unlearning objectives.

    ``forget_maximize`` pushes the forget loss up with weight ``1 + gamma``;
    ``target_output`` additionally pulls forget outputs toward ``targets``.

    By default ``target_output`` reuses the plain WIN-U core and only changes
    the right-hand side, which ignores the curvature ``gamma * H_f`` that the
    target term adds. ``target_curvature=True`` keeps it; the GGN does not
    depend on labels, so the step becomes an exact Newton step on the
    modified objective with the core scaled by ``(1 - gamma)/n``.
    """

    kind: str = "none"
    gamma: float = 0.0
    targets: np.ndarray | None = None
    target_curvature: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "forget_maximize", "target_output"):
            raise ConfigError(f"unknown extension kind {self.kind!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.kind == "target_output" and self.targets is None:
            raise MissingTargets("target_output requires target labels")

    @property
    def curvature_scale(self) -> float:
        """Multiplier on ``H_f`` in the Newton system ``(H - s H_f) delta = g``."""
        if self.kind == "forget_maximize":
            return 1.0 + self.gamma
        if self.kind == "target_output" and self.target_curvature:
            return 1.0 - self.gamma
        return 1.0

    @property
    def gradient_scale(self) -> float:
        """Multiplier on the forget gradient ``g_f``."""
        return 1.0 + self.gamma if self.kind == "forget_maximize" else 1.0


NO_EXTENSION = ObjectiveExtension()


@dataclass(frozen=True)
class Diagnostics:
    method: str
    woodbury_core_size: int = 0
    core_condition_estimate: float = float("nan")
    cg_iterations: int | None = None


@dataclass(frozen=True)
class UnlearnUpdate:
    delta: np.ndarray
    diagnostics: Diagnostics = field(default_factory=lambda: Diagnostics("unknown"))

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("unlearning delta is not finite")

    def scaled(self, eta: float) -> "UnlearnUpdate":
        return replace(self, delta=eta * self.delta)

    def apply(self, theta, eta: float = 1.0) -> np.ndarray:
        return np.asarray(theta, dtype=np.float64) + eta * self.delta

    def save(self, path, meta: dict | None = None):
        d = self.diagnostics
        info = dict(meta or {})
        info.update(
            method=d.method,
            woodbury_core_size=d.woodbury_core_size,
            core_condition_estimate=d.core_condition_estimate,
            cg_iterations=d.cg_iterations,
        )
        return cache.write_cache(path, "unlearn_update", {"delta": self.delta}, info)

    @classmethod
    def load(cls, path) -> "UnlearnUpdate":
        meta, arrays = cache.read_cache(path, "unlearn_update")
        diag = Diagnostics(
            method=meta["method"],
            woodbury_core_size=int(meta["woodbury_core_size"]),
            core_condition_estimate=float(meta["core_condition_estimate"]),
            cg_iterations=meta["cg_iterations"],
        )
        return cls(arrays["delta"], diag)


def check_convergence(grad_norm: float | None, force: bool = False) -> None:
    """Guard against applying a Newton step at a non-stationary point.

    Warns above ``GRAD_WARN``; raises :class:`NotConverged` above
    ``GRAD_REFUSE`` unless ``force``.
    """
    if grad_norm is None:
        return
    if grad_norm > GRAD_REFUSE and not force:
        raise NotConverged(
            f"original model is not converged (|grad L| = {grad_norm:.3e}); "
            "the Newton update may diverge. Pass force=True to proceed.",
            grad_norm=grad_norm,
        )
    if grad_norm > GRAD_WARN:
        warnings.warn(
            f"original model gradient norm {grad_norm:.3e} exceeds {GRAD_WARN:g}",
            RuntimeWarning,
            stacklevel=3,
        )


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def forget_gradient(spec: ModelSpec, theta, x_forget, y_forget, n: int) -> np.ndarray:
    """``g_f = (1/n) sum_{j in D_f} grad loss_j``."""
    x_forget = _rows(x_forget)
    if x_forget.shape[0] == 0:
        return np.zeros(spec.num_params)
    z = forward(spec, theta, x_forget)
    return vector_jacobian_product(spec, theta, x_forget, output_gradient(spec, z, y_forget)) / n


def _extended_forget_gradient(spec, theta, x_forget, y_forget, n, ext: ObjectiveExtension):
    g = forget_gradient(spec, theta, x_forget, y_forget, n)
    if ext.kind == "forget_maximize":
        return ext.gradient_scale * g
    if ext.kind == "target_output":
        targets = np.asarray(ext.targets)
        if targets.shape[0] != _rows(x_forget).shape[0]:
            raise MissingTargets("need exactly one target per forget sample")
        return g - ext.gamma * forget_gradient(spec, theta, x_forget, targets, n)
    return g


# ---------------------------------------------------------------------------


def linear_woodbury_update(
    theta,
    h_inverse: CurvatureOracle,
    x_forget,
    y_forget,
    n: int,
    pivot_floor: float = PIVOT_FLOOR,
) -> UnlearnUpdate:
    """Closed-form ridge retraining delta via the ``m x m`` Woodbury core.

    ``delta = (1/n) H^{-1} X_f^T (I - (1/n) X_f H^{-1} X_f^T)^{-1} (X_f theta - y_f)``
    """
    x_f = _rows(x_forget)
    theta = np.asarray(theta, dtype=np.float64)
    if x_f.shape[1] != theta.shape[0]:
        raise DimensionMismatch("forget features do not match parameter dimension")
    m = x_f.shape[0]
    resid = x_f @ theta - np.asarray(y_forget, dtype=np.float64)
    hinv_xt = h_inverse.solve(x_f.T)
    core = np.eye(m) - (x_f @ hinv_xt) / n
    lu = lu_factor(core, pivot_floor)
    u = lu.solve(resid)
    return UnlearnUpdate(
        (hinv_xt @ u) / n,
        Diagnostics(LINEAR_WOODBURY, m, lu.condition_estimate()),
    )


def winu_output_space(
    spec: ModelSpec,
    theta,
    h_inverse: CurvatureOracle,
    x_forget,
    y_forget,
    n: int,
    extension: ObjectiveExtension = NO_EXTENSION,
    pivot_floor: float = PIVOT_FLOOR,
    grad_norm: float | None = None,
    force: bool = False,
) -> UnlearnUpdate:
    """Woodbury-scaled Newton update in output space.

    Forms the stacked forget Jacobian ``J_f`` (``mc x d``), output gradients
    ``delta_f`` and block-diagonal output Hessian ``B_f``, then

        M = I - (1/n) B_f J_f H^{-1} J_f^T,   M u = delta_f,
        delta = (1/n) H^{-1} J_f^T u.

    ``extension`` swaps in the alternative objectives: ``forget_maximize``
    replaces both ``1/n`` factors by ``(1+gamma)/n``; ``target_output``
    replaces the right-hand side by ``delta_f - gamma * delta_hat_f`` (and,
    with ``target_curvature``, scales the core by ``1 - gamma``).

    Args:
        grad_norm: full-objective gradient norm at ``theta`` if known; see
            :func:`check_convergence`.

    Raises:
        CoreTooLarge: ``m * c`` exceeds ``OUTPUT_CORE_LIMIT``.
        SingularCore: the core has a pivot below ``pivot_floor``.
    """
    check_convergence(grad_norm, force)
    x_f = _rows(x_forget)
    m, c = x_f.shape[0], spec.output_dim
    if m * c > OUTPUT_CORE_LIMIT:
        raise CoreTooLarge(f"output-space core of size {m * c} exceeds {OUTPUT_CORE_LIMIT}")
    if m == 0:
        return UnlearnUpdate(np.zeros(spec.num_params), Diagnostics(WINU_OUTPUT_SPACE, 0, 1.0))
    z = forward(spec, theta, x_f)
    delta_f = output_gradient(spec, z, y_forget)
    if extension.kind == "target_output":
        targets = np.asarray(extension.targets)
        if targets.shape[0] != m:
            raise MissingTargets("need exactly one target per forget sample")
        delta_f = delta_f - extension.gamma * output_gradient(spec, z, targets)
    b_f = output_hessian_from_outputs(spec, z)
    j_f = per_sample_jacobian(spec, theta, x_f).reshape(m * c, spec.num_params)

    hinv_jt, iters = h_inverse.solve_counted(j_f.T)
    k = (j_f @ hinv_jt).reshape(m, c, m * c)
    bk = np.einsum("jab,jbk->jak", b_f, k).reshape(m * c, m * c)
    core = np.eye(m * c) - (extension.curvature_scale / n) * bk
    lu = lu_factor(core, pivot_floor)
    u = lu.solve(delta_f.ravel())
    return UnlearnUpdate(
        (extension.gradient_scale / n) * (hinv_jt @ u),
        Diagnostics(
            WINU_OUTPUT_SPACE,
            m * c,
            lu.condition_estimate(),
            iters if h_inverse.mode == "matrix_free" else None,
        ),
    )


def apply_extension(
    spec: ModelSpec,
    theta,
    h_inverse: CurvatureOracle,
    x_forget,
    y_forget,
    n: int,
    extension: ObjectiveExtension,
    **kwargs,
) -> UnlearnUpdate:
    """Output-space WIN-U update for an alternative objective."""
    return winu_output_space(spec, theta, h_inverse, x_forget, y_forget, n, extension, **kwargs)


def newton_retain_cg(
    spec: ModelSpec,
    theta,
    x,
    y,
    forget_indices,
    lam: float,
    rel_tol: float = CG_REL_TOL,
    max_iters: int | None = None,
    grad_norm: float | None = None,
    force: bool = False,
) -> UnlearnUpdate:
    """Solve ``(H - H_f) delta = g_f`` by CG with matrix-free GGN products.

    ``H - H_f`` is applied as the full-set GGN-VP minus the forget-set
    GGN-VP, both normalized by the full ``n``.
    """
    check_convergence(grad_norm, force)
    x = _rows(x)
    y = np.asarray(y)
    idx = np.asarray(forget_indices, dtype=np.int64)
    n = x.shape[0]
    if idx.size == 0:
        return UnlearnUpdate(np.zeros(spec.num_params), Diagnostics(NEWTON_RETAIN_CG, 0, cg_iterations=0))
    g_f = forget_gradient(spec, theta, x[idx], y[idx], n)
    op = retain_operator(spec, theta, x, idx, lam)
    delta, iters = conjugate_gradient(op, g_f, rel_tol=rel_tol, max_iters=max_iters)
    logger.info("newton_retain_cg: CG converged in %d iterations", iters)
    return UnlearnUpdate(delta, Diagnostics(NEWTON_RETAIN_CG, 0, cg_iterations=iters))


def newton_vanilla(
    spec: ModelSpec,
    theta,
    h_inverse: CurvatureOracle,
    x_forget,
    y_forget,
    n: int,
) -> UnlearnUpdate:
    """Influence-style step ``H^{-1} g_f`` using the full-set curvature."""
    x_f = _rows(x_forget)
    g_f = forget_gradient(spec, theta, x_f, y_forget, n)
    if g_f.shape[0] != h_inverse.dimension:
        raise DimensionMismatch("curvature oracle dimension does not match the model")
    delta, iters = h_inverse.solve_counted(g_f)
    return UnlearnUpdate(
        delta,
        Diagnostics(NEWTON_VANILLA, 0, cg_iterations=iters if h_inverse.mode == "matrix_free" else None),
    )


def mc_winu(
    spec: ModelSpec,
    theta,
    h_proxy: CurvatureOracle,
    x_forget,
    y_forget,
    config: UnlearnConfig,
    extension: ObjectiveExtension = NO_EXTENSION,
    bank: McGradientBank | None = None,
    grad_norm: float | None = None,
    force: bool = False,
) -> UnlearnUpdate:
    """MC-WIN-U: Woodbury step with Monte-Carlo forget curvature.

    With ``G`` the bank of pseudo-gradients (``d x mS``) and ``H`` the
    supplied curvature (exact, matrix-free or diagonal proxy)::

        core  = (1/(nS)) G^T H^{-1} G - I
        core u = G^T H^{-1} g_f
        delta = eta * P (H^{-1} g_f - (1/(nS)) H^{-1} G u)

    When ``config.subspace`` is set, ``g_f`` and ``G`` are projected onto
    the basis ``P`` and ``h_proxy`` must already live in subspace
    coordinates; ``P`` maps the result back to parameter space.

    Args:
        bank: precomputed pseudo-gradient bank (model space); sampled from
            ``config.mc_samples`` and ``config.seed`` when omitted.
    """
    if spec.loss != CROSS_ENTROPY:
        raise WrongLossKind("MC-WIN-U requires a cross-entropy model")
    check_convergence(grad_norm, force)
    x_f = _rows(x_forget)
    n = config.n
    g = _extended_forget_gradient(spec, theta, x_f, y_forget, n, extension)
    if bank is None:
        bank = mc_gradient_bank(spec, theta, x_f, config.mc_samples, config.seed)
    cols = bank.columns
    basis = None
    if config.subspace is not None:
        basis = config.subspace.basis
        g = basis.T @ g
        cols = basis.T @ cols
    if h_proxy.dimension != g.shape[0]:
        raise DimensionMismatch(
            f"curvature proxy has dimension {h_proxy.dimension}, update space has {g.shape[0]}"
        )
    hinv_g, it1 = h_proxy.solve_counted(g)
    hinv_cols, it2 = h_proxy.solve_counted(cols)
    ms = cols.shape[1]
    scale = extension.curvature_scale / (n * bank.sample_count)
    core = scale * (cols.T @ hinv_cols) - np.eye(ms)
    lu = lu_factor(core, config.core_pivot_floor)
    u = lu.solve(cols.T @ hinv_g)
    direction = hinv_g - scale * (hinv_cols @ u)
    if basis is not None:
        direction = basis @ direction
    return UnlearnUpdate(
        config.eta * direction,
        Diagnostics(
            MC_WINU,
            ms,
            lu.condition_estimate(),
            it1 + it2 if h_proxy.mode == "matrix_free" else None,
        ),
    )
