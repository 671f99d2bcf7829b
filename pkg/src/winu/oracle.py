"""Ground-truth references: closed-form ridge solutions and MLP (re)training.

MLP training is full batch in two stages: Adam for a fixed number of
epochs, then L-BFGS refinement until the gradient certificate is met.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import cache
from .data import ForgetSplit
from .errors import ConfigError, EmptyRetainSet, NotConverged
from .linalg import cholesky_factor, spd_solve
from .models import ModelSpec, init_params, objective

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FirstOrderStage:
    learning_rate: float = 0.01
    epochs: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class QuasiNewtonStage:
    max_iterations: int = 300
    grad_tol: float = 1e-6
    # internal L-BFGS stopping tolerance (gradient and relative decrease)
    tol: float = 1e-12
    history: int = 10


@dataclass(frozen=True)
class TrainingRecipe:
    stage1: FirstOrderStage = field(default_factory=FirstOrderStage)
    stage2: QuasiNewtonStage = field(default_factory=QuasiNewtonStage)
    seed: int = 0

    def __post_init__(self):
        if self.stage2.grad_tol <= 0:
            raise ConfigError("grad_tol must be positive")
        if self.stage1.epochs < 0 or self.stage2.max_iterations < 0:
            raise ConfigError("stage budgets must be non-negative")


# ---------------------------------------------------------------------------
# ridge


def ridge_closed_form(x, y, lam: float, n: int | None = None) -> np.ndarray:
    """Minimizer of ``(1/2n) ||y - X theta||^2 + (lam/2) ||theta||^2``."""
    if lam <= 0:
        raise ConfigError("lam must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n is None else n
    h = x.T @ x / n
    h[np.diag_indices_from(h)] += lam
    return spd_solve(cholesky_factor(h), x.T @ np.asarray(y, dtype=np.float64) / n)


def ridge_retrain_closed_form(
    x, y, split: ForgetSplit, lam: float, method: str = "retain"
) -> np.ndarray:
    """Exact ridge retraining optimum on the retain set.

    ``method="retain"`` solves on the retain rows alone with
    ``lam_r = n / (n - m) * lam``; ``method="subtraction"`` solves
    ``(H - H_f) theta = (X^T y - X_f^T y_f) / n``. The two agree.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = split.n, split.m
    if m >= n:
        raise EmptyRetainSet("retain set is empty")
    if method == "retain":
        r = split.retain_indices
        return ridge_closed_form(x[r], y[r], n / (n - m) * lam)
    if method == "subtraction":
        f = split.forget_indices
        h = (x.T @ x - x[f].T @ x[f]) / n
        h[np.diag_indices_from(h)] += lam
        rhs = (x.T @ y - x[f].T @ y[f]) / n
        return spd_solve(cholesky_factor(h), rhs)
    raise ConfigError(f"unknown retrain method {method!r}")


# ---------------------------------------------------------------------------
# MLP


class Adam:
    """Adam with bias correction; state lives on the instance."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _adam_stage(spec, theta, x, y, lam, stage: FirstOrderStage) -> np.ndarray:
    opt = Adam(theta.size, stage.learning_rate, stage.beta1, stage.beta2, stage.eps)
    for epoch in range(stage.epochs):
        f, g = objective(spec, theta, x, y, lam)
        theta = opt.step(theta, g)
        if epoch % 500 == 0:
            logger.info("adam epoch %d: loss %.6f |grad| %.3e", epoch, f, np.linalg.norm(g))
    return theta


def _lbfgs_stage(spec, theta, x, y, lam, stage: QuasiNewtonStage) -> np.ndarray:
    """L-BFGS refinement within ``stage.max_iterations`` total iterations.

    When a run stops on its relative-decrease test above ``grad_tol`` the
    method is restarted from the current point with fresh curvature pairs
    while iteration budget remains.
    """
    budget = stage.max_iterations
    while budget > 0:
        res = scipy.optimize.minimize(
            lambda t: objective(spec, t, x, y, lam),
            theta,
            jac=True,
            method="L-BFGS-B",
            options=dict(
                maxiter=budget,
                maxfun=20 * budget,
                ftol=stage.tol,
                gtol=stage.tol,
                maxcor=stage.history,
                maxls=50,
            ),
        )
        budget -= max(int(res.nit), 1)
        theta = np.asarray(res.x, dtype=np.float64)
        gn = float(np.linalg.norm(res.jac))
        logger.info("l-bfgs: %d iterations, |grad| %.3e, %s", res.nit, gn, res.message)
        if gn <= stage.grad_tol or res.nit == 0:
            break
    return theta


def gradient_norm(spec: ModelSpec, theta, x, y, lam: float) -> float:
    return float(np.linalg.norm(objective(spec, theta, x, y, lam)[1]))


def _certify(spec, theta, x, y, lam, tol, what) -> np.ndarray:
    gn = gradient_norm(spec, theta, x, y, lam)
    logger.info("%s: final |grad| = %.3e", what, gn)
    if gn > tol:
        raise NotConverged(f"{what}: gradient norm {gn:.3e} above {tol:g}", grad_norm=gn)
    return theta


def train_mlp(
    spec: ModelSpec, x, y, lam: float, recipe: TrainingRecipe, init=None
) -> np.ndarray:
    """Minimize ``(1/n) sum loss + (lam/2) ||theta||^2`` over all rows.

    Raises:
        NotConverged: the final gradient norm exceeds ``recipe.stage2.grad_tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    theta = init_params(spec, recipe.seed) if init is None else np.array(init, dtype=np.float64)
    theta = _adam_stage(spec, theta, x, y, lam, recipe.stage1)
    theta = _lbfgs_stage(spec, theta, x, y, lam, recipe.stage2)
    return _certify(spec, theta, x, y, lam, recipe.stage2.grad_tol, "train_mlp")


def retrain_mlp(
    spec: ModelSpec,
    x,
    y,
    split: ForgetSplit,
    lam: float,
    recipe: TrainingRecipe,
    warm_start=None,
) -> np.ndarray:
    """Gold-standard retraining on the retain rows with ``lam_r = n/(n-m) lam``.

    From scratch (recipe seed) the full two-stage recipe runs. With
    ``warm_start`` only the quasi-Newton refinement runs, starting from the
    given parameters, so the result is the retain optimum in that basin.
    """
    n, m = split.n, split.m
    if m >= n:
        raise EmptyRetainSet("retain set is empty")
    r = split.retain_indices
    xr = np.asarray(x, dtype=np.float64)[r]
    yr = np.asarray(y)[r]
    lam_r = n / (n - m) * lam
    if warm_start is None:
        return train_mlp(spec, xr, yr, lam_r, recipe)
    theta = np.array(warm_start, dtype=np.float64)
    if gradient_norm(spec, theta, xr, yr, lam_r) > recipe.stage2.grad_tol:
        theta = _lbfgs_stage(spec, theta, xr, yr, lam_r, recipe.stage2)
    return _certify(spec, theta, xr, yr, lam_r, recipe.stage2.grad_tol, "retrain_mlp(warm)")


def save_params(path, spec: ModelSpec, theta, meta: dict | None = None):
    info = dict(meta or {})
    info["model"] = spec.to_dict()
    return cache.write_cache(path, "params", {"theta": np.asarray(theta)}, info)


def load_params(path) -> tuple[ModelSpec, np.ndarray, dict]:
    meta, arrays = cache.read_cache(path, "params")
    return ModelSpec.from_dict(meta["model"]), arrays["theta"], meta
