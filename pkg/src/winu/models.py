"""Ridge regression and the two-layer tanh/softmax MLP.

All functions accept either a single sample ``x`` of shape ``(input_dim,)``
or a batch of shape ``(batch, input_dim)``; outputs follow the same
convention. Regularization never appears here: per-sample losses and
gradients are the bare data terms.

MLP parameter layout (frozen)::

    theta = [W1 (hidden x input, row-major) | b1 | W2 (output x hidden, row-major) | b2]

with ``h = tanh(W1 x + b1)`` and logits ``z = W2 h + b2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch

RIDGE = "ridge"
MLP = "mlp"
SQUARED = "squared"
CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dim: int
    output_dim: int
    loss: str

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.kind == RIDGE:
            if self.hidden_dim != 0 or self.loss != SQUARED or self.output_dim != 1:
                raise ConfigError("ridge requires hidden_dim=0, loss=squared, output_dim=1")
        elif self.kind == MLP:
            if self.loss != CROSS_ENTROPY or self.output_dim < 2 or self.hidden_dim < 1:
                raise ConfigError(
                    "mlp requires loss=cross_entropy, output_dim>=2, hidden_dim>=1"
                )
        else:
            raise ConfigError(f"unknown model kind {self.kind!r}")

    @classmethod
    def ridge(cls, input_dim: int) -> "ModelSpec":
        return cls(RIDGE, input_dim, 0, 1, SQUARED)

    @classmethod
    def mlp(cls, input_dim: int = 784, hidden_dim: int = 20, output_dim: int = 10) -> "ModelSpec":
        return cls(MLP, input_dim, hidden_dim, output_dim, CROSS_ENTROPY)

    @property
    def num_params(self) -> int:
        if self.kind == RIDGE:
            return self.input_dim
        h, i, o = self.hidden_dim, self.input_dim, self.output_dim
        return h * i + h + o * h + o

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            str(d["kind"]),
            int(d["input_dim"]),
            int(d["hidden_dim"]),
            int(d["output_dim"]),
            str(d["loss"]),
        )


@dataclass(frozen=True)
class _MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise DimensionMismatch(
            f"parameter vector has shape {theta.shape}, expected ({spec.num_params},)"
        )
    return theta


def unpack(spec: ModelSpec, theta) -> _MlpParams:
    """Views of the MLP weight blocks inside ``theta`` (no copies)."""
    theta = _check_theta(spec, theta)
    h, i, o = spec.hidden_dim, spec.input_dim, spec.output_dim
    s1 = h * i
    s2 = s1 + h
    s3 = s2 + o * h
    return _MlpParams(
        w1=theta[:s1].reshape(h, i),
        b1=theta[s1:s2],
        w2=theta[s2:s3].reshape(o, h),
        b2=theta[s3:],
    )


def pack(w1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([np.ravel(w1), np.ravel(b1), np.ravel(w2), np.ravel(b2)])


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; zeros for ridge."""
    if spec.kind == RIDGE:
        return np.zeros(spec.num_params)
    rng = np.random.Generator(np.random.Philox(seed))
    h, i, o = spec.hidden_dim, spec.input_dim, spec.output_dim
    a1 = 1.0 / np.sqrt(i)
    a2 = 1.0 / np.sqrt(h)
    return pack(
        rng.uniform(-a1, a1, (h, i)),
        rng.uniform(-a1, a1, h),
        rng.uniform(-a2, a2, (o, h)),
        rng.uniform(-a2, a2, o),
    )


def _batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f"input has shape {x.shape}, expected (..., {spec.input_dim})"
        )
    return x, single


def _hidden(p: _MlpParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ p.w1.T + p.b1)


def forward(spec: ModelSpec, theta, x) -> np.ndarray:
    """Model output: ``x @ theta`` for ridge, pre-softmax logits for the MLP."""
    xb, single = _batch(spec, x)
    theta = _check_theta(spec, theta)
    if spec.kind == RIDGE:
        out = (xb @ theta)[:, None]
    else:
        p = unpack(spec, theta)
        out = _hidden(p, xb) @ p.w2.T + p.b2
    return out[0] if single else out


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# output-space quantities


def _labels(spec: ModelSpec, y, batch: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (batch,):
        raise DimensionMismatch(f"labels have shape {y.shape}, expected ({batch},)")
    if spec.loss == CROSS_ENTROPY:
        y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= spec.output_dim):
            raise DimensionMismatch("class label out of range")
        return y
    return y.astype(np.float64)


def _outputs(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    return (z[None, :] if single else z), single


def loss_from_outputs(spec: ModelSpec, z: np.ndarray, y) -> np.ndarray:
    """Per-sample loss for outputs ``z`` of shape ``(batch, c)`` (or ``(c,)``)."""
    zb, single = _outputs(z)
    y = _labels(spec, y, zb.shape[0])
    if spec.loss == SQUARED:
        out = 0.5 * (zb[:, 0] - y) ** 2
    else:
        out = -log_softmax(zb)[np.arange(zb.shape[0]), y]
    return out[0] if single else out


def output_gradient(spec: ModelSpec, z: np.ndarray, y) -> np.ndarray:
    """``delta = d loss / d z``: ``z - y`` (squared) or ``p - e_y`` (cross-entropy)."""
    zb, single = _outputs(z)
    y = _labels(spec, y, zb.shape[0])
    if spec.loss == SQUARED:
        g = (zb[:, 0] - y)[:, None]
    else:
        g = softmax(zb)
        g[np.arange(zb.shape[0]), y] -= 1.0
    return g[0] if single else g


def output_hessian_from_outputs(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    """Batch of output Hessians ``B``, shape ``(batch, c, c)``."""
    if spec.loss == SQUARED:
        return np.ones((z.shape[0], 1, 1))
    p = softmax(z)
    return np.einsum("bi,ij->bij", p, np.eye(p.shape[1])) - p[:, :, None] * p[:, None, :]


def apply_output_hessian(spec: ModelSpec, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``B_b @ w_b`` for every sample without forming ``B``."""
    if spec.loss == SQUARED:
        return w
    p = softmax(z)
    return p * w - p * np.sum(p * w, axis=1, keepdims=True)


def output_hessian(spec: ModelSpec, theta, x, y=None) -> np.ndarray:
    """Output-space loss Hessian at ``forward(spec, theta, x)``.

    The labels do not enter for either supported loss; ``y`` is accepted
    for signature symmetry.
    """
    xb, single = _batch(spec, x)
    b = output_hessian_from_outputs(spec, forward(spec, theta, xb))
    return b[0] if single else b


# ---------------------------------------------------------------------------
# parameter-space derivatives


def jacobian_vector_product(spec: ModelSpec, theta, x, v) -> np.ndarray:
    """``J @ v`` per sample (forward mode), shape ``(batch, c)`` or ``(c,)``."""
    xb, single = _batch(spec, x)
    theta = _check_theta(spec, theta)
    v = _check_theta(spec, v)
    if spec.kind == RIDGE:
        out = (xb @ v)[:, None]
    else:
        p = unpack(spec, theta)
        dp = unpack(spec, v)
        h = _hidden(p, xb)
        dh = (1.0 - h * h) * (xb @ dp.w1.T + dp.b1)
        out = dh @ p.w2.T + h @ dp.w2.T + dp.b2
    return out[0] if single else out


def vector_jacobian_product(spec: ModelSpec, theta, x, u) -> np.ndarray:
    """``sum_b J_b^T u_b`` (reverse mode), shape ``(d,)``."""
    xb, single = _batch(spec, x)
    theta = _check_theta(spec, theta)
    u = np.asarray(u, dtype=np.float64)
    if single:
        u = u[None, :]
    if u.shape != (xb.shape[0], spec.output_dim):
        raise DimensionMismatch(
            f"cotangent has shape {u.shape}, expected ({xb.shape[0]}, {spec.output_dim})"
        )
    if spec.kind == RIDGE:
        return xb.T @ u[:, 0]
    p = unpack(spec, theta)
    h = _hidden(p, xb)
    ga = (u @ p.w2) * (1.0 - h * h)
    return pack(ga.T @ xb, ga.sum(axis=0), u.T @ h, u.sum(axis=0))


def per_sample_vjp(spec: ModelSpec, theta, x, u) -> np.ndarray:
    """``J_b^T u_b`` for each sample separately, shape ``(batch, d)``."""
    xb, _ = _batch(spec, x)
    theta = _check_theta(spec, theta)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape != (xb.shape[0], spec.output_dim):
        raise DimensionMismatch(
            f"cotangent has shape {u.shape}, expected ({xb.shape[0]}, {spec.output_dim})"
        )
    if spec.kind == RIDGE:
        return u[:, :1] * xb
    p = unpack(spec, theta)
    h = _hidden(p, xb)
    ga = (u @ p.w2) * (1.0 - h * h)
    nb = xb.shape[0]
    return np.concatenate(
        [
            (ga[:, :, None] * xb[:, None, :]).reshape(nb, -1),
            ga,
            (u[:, :, None] * h[:, None, :]).reshape(nb, -1),
            u,
        ],
        axis=1,
    )


def per_sample_jacobian(spec: ModelSpec, theta, x) -> np.ndarray:
    """Explicit Jacobians, shape ``(batch, c, d)``."""
    xb, _ = _batch(spec, x)
    nb, c = xb.shape[0], spec.output_dim
    jac = np.empty((nb, c, spec.num_params))
    for k in range(c):
        u = np.zeros((nb, c))
        u[:, k] = 1.0
        jac[:, k, :] = per_sample_vjp(spec, theta, xb, u)
    return jac


def per_sample_gradient(spec: ModelSpec, theta, x, y) -> np.ndarray:
    """Gradient of the bare per-sample loss, ``(d,)`` or ``(batch, d)``."""
    xb, single = _batch(spec, x)
    delta = output_gradient(spec, forward(spec, theta, xb), y)
    g = per_sample_vjp(spec, theta, xb, delta)
    return g[0] if single else g


def loss_gradient_sum(spec: ModelSpec, theta, x, y) -> tuple[float, np.ndarray]:
    """Sum of per-sample losses and of their gradients over a batch."""
    xb, _ = _batch(spec, x)
    z = forward(spec, theta, xb)
    loss = float(np.sum(loss_from_outputs(spec, z, y)))
    return loss, vector_jacobian_product(spec, theta, xb, output_gradient(spec, z, y))


def objective(spec: ModelSpec, theta, x, y, lam: float, n: int | None = None):
    """``(1/n) sum loss + lam/2 ||theta||^2`` and its gradient.

    ``n`` defaults to the batch size.
    """
    xb, _ = _batch(spec, x)
    n = xb.shape[0] if n is None else n
    loss, grad = loss_gradient_sum(spec, theta, xb, y)
    theta = np.asarray(theta, dtype=np.float64)
    return loss / n + 0.5 * lam * float(theta @ theta), grad / n + lam * theta


class Linearization:
    """Model linearized at ``theta`` on a fixed batch.

    Caches the hidden activations and outputs so that repeated JVP/VJP
    pairs (as in a GGN-vector product inside CG) cost two matrix products
    each.
    """

    def __init__(self, spec: ModelSpec, theta, x):
        self.spec = spec
        self.theta = _check_theta(spec, theta)
        self.x, _ = _batch(spec, x)
        if spec.kind == RIDGE:
            self.outputs = (self.x @ self.theta)[:, None]
        else:
            self._p = unpack(spec, self.theta)
            self._h = _hidden(self._p, self.x)
            self._dh = 1.0 - self._h * self._h
            self.outputs = self._h @ self._p.w2.T + self._p.b2
            self.probs = softmax(self.outputs)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def jvp(self, v) -> np.ndarray:
        v = _check_theta(self.spec, v)
        if self.spec.kind == RIDGE:
            return (self.x @ v)[:, None]
        dp = unpack(self.spec, v)
        dh = self._dh * (self.x @ dp.w1.T + dp.b1)
        return dh @ self._p.w2.T + self._h @ dp.w2.T + dp.b2

    def vjp(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.batch_size, self.spec.output_dim):
            raise DimensionMismatch(f"cotangent has shape {u.shape}")
        if self.spec.kind == RIDGE:
            return self.x.T @ u[:, 0]
        ga = (u @ self._p.w2) * self._dh
        return pack(ga.T @ self.x, ga.sum(axis=0), u.T @ self._h, u.sum(axis=0))

    def ggn_sum_product(self, v) -> np.ndarray:
        """``sum_b J_b^T B_b J_b v``."""
        jv = self.jvp(v)
        if self.spec.loss == SQUARED:
            return self.vjp(jv)
        p = self.probs
        return self.vjp(p * jv - p * np.sum(p * jv, axis=1, keepdims=True))


def ggn_diagonal_sum(spec: ModelSpec, theta, x) -> np.ndarray:
    """``sum_b diag(J_b^T B_b J_b)`` computed in closed form per weight block."""
    xb, _ = _batch(spec, x)
    theta = _check_theta(spec, theta)
    if spec.kind == RIDGE:
        return np.sum(xb * xb, axis=0)
    p = unpack(spec, theta)
    h = _hidden(p, xb)
    z = h @ p.w2.T + p.b2
    prob = softmax(z)
    b_diag = prob - prob * prob
    # diag(W2 B W2^T) per sample with B = diag(p) - p p^T
    w2p = prob @ p.w2
    q = prob @ (p.w2 * p.w2) - w2p * w2p
    s = q * (1.0 - h * h) ** 2
    return pack(s.T @ (xb * xb), s.sum(axis=0), b_diag.T @ (h * h), b_diag.sum(axis=0))
