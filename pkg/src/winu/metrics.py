"""Evaluation against the retrained reference, and the relearning attack."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, ForgetSplit
from .errors import DimensionMismatch, ZeroReference
from .models import CROSS_ENTROPY, ModelSpec, forward, log_softmax, objective
from .oracle import Adam

PROB_FLOOR = 1e-12
CSV_COLUMNS = ("method", "forget", "retain", "test", "divergence", "distance", "eta", "S", "seed")


@dataclass(frozen=True)
class MetricsReport:
    method_label: str
    forget_perf: float
    retain_perf: float
    test_perf: float
    output_divergence: float
    rel_param_distance: float
    kind: str = "mse"
    forget_test_perf: float | None = None
    eta: float | None = None
    mc_samples: int | None = None
    seed: int | None = None

    def csv_row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            return format(float(v), ".17g")

        return [
            self.method_label,
            fmt(self.forget_perf),
            fmt(self.retain_perf),
            fmt(self.test_perf),
            fmt(self.output_divergence),
            fmt(self.rel_param_distance),
            fmt(self.eta),
            fmt(self.mc_samples),
            fmt(self.seed),
        ]


def mse(spec: ModelSpec, theta, data: Dataset) -> float:
    if data.n == 0:
        return float("nan")
    return float(np.mean((forward(spec, theta, data.features)[:, 0] - data.labels) ** 2))


def accuracy(spec: ModelSpec, theta, data: Dataset) -> float:
    if data.n == 0:
        return float("nan")
    pred = np.argmax(forward(spec, theta, data.features), axis=1)
    return float(np.mean(pred == data.labels))


def output_divergence_regression(spec: ModelSpec, theta_a, theta_b, test: Dataset) -> float:
    """Mean squared gap between the two models' test predictions."""
    if np.shape(theta_a) != np.shape(theta_b):
        raise DimensionMismatch("parameter vectors differ in length")
    fa = forward(spec, theta_a, test.features)
    fb = forward(spec, theta_b, test.features)
    return float(np.mean((fa - fb) ** 2))


def output_divergence_classification(
    spec: ModelSpec, theta_reference, theta_candidate, forget: Dataset
) -> float:
    """Mean ``KL(p_reference || p_candidate)`` over the forget samples."""
    if np.shape(theta_reference) != np.shape(theta_candidate):
        raise DimensionMismatch("parameter vectors differ in length")
    log_floor = np.log(PROB_FLOOR)
    lr = log_softmax(forward(spec, theta_reference, forget.features))
    lc = log_softmax(forward(spec, theta_candidate, forget.features))
    pr = np.exp(lr)
    kl = np.sum(pr * (np.maximum(lr, log_floor) - np.maximum(lc, log_floor)), axis=1)
    return float(np.mean(kl))


def relative_parameter_distance(theta_a, theta_b) -> float:
    """``||a - b|| / ||b||`` with ``b`` the retrained reference."""
    a = np.asarray(theta_a, dtype=np.float64)
    b = np.asarray(theta_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("parameter vectors differ in length")
    denom = np.linalg.norm(b)
    if denom < 1e-300:
        raise ZeroReference("reference parameter vector is zero")
    return float(np.linalg.norm(a - b) / denom)


@dataclass(frozen=True)
class AttackConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0


def relearning_attack(
    spec: ModelSpec,
    theta_unlearned,
    retain: Dataset,
    epochs: int,
    lam: float,
    config: AttackConfig = AttackConfig(),
) -> list[tuple[int, np.ndarray]]:
    """Mini-batch Adam fine-tuning on retain data only, one checkpoint per epoch.

    The budget is fixed; nothing is checked for convergence.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    theta = np.array(theta_unlearned, dtype=np.float64)
    opt = Adam(theta.size, config.learning_rate)
    rng = np.random.Generator(np.random.Philox(config.seed))
    checkpoints = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(retain.n)
        for start in range(0, retain.n, config.batch_size):
            b = order[start : start + config.batch_size]
            _, g = objective(spec, theta, retain.features[b], retain.labels[b], lam)
            theta = opt.step(theta, g)
        checkpoints.append((epoch, theta.copy()))
    return checkpoints


def evaluate(
    spec: ModelSpec,
    theta,
    theta_reference,
    train: Dataset,
    test: Dataset,
    split: ForgetSplit,
    label: str,
    forget_class: int | None = None,
    **extra,
) -> MetricsReport:
    """Table-style metrics of ``theta`` relative to the retrained reference."""
    forget = split.forget(train)
    retain = split.retain(train)
    if spec.loss == CROSS_ENTROPY:
        forget_test = None
        if forget_class is not None:
            forget_test = accuracy(spec, theta, test.subset(np.flatnonzero(test.labels == forget_class)))
        return MetricsReport(
            label,
            accuracy(spec, theta, forget),
            accuracy(spec, theta, retain),
            accuracy(spec, theta, test),
            output_divergence_classification(spec, theta_reference, theta, forget),
            relative_parameter_distance(theta, theta_reference),
            kind="accuracy",
            forget_test_perf=forget_test,
            **extra,
        )
    return MetricsReport(
        label,
        mse(spec, theta, forget),
        mse(spec, theta, retain),
        mse(spec, theta, test),
        output_divergence_regression(spec, theta, theta_reference, test),
        relative_parameter_distance(theta, theta_reference),
        kind="mse",
        **extra,
    )


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def format_table(reports, title: str = "") -> str:
    """Aligned text table: method, forget, retain, test, divergence, distance."""

    def perf(r: MetricsReport, v):
        if v is None or (isinstance(v, float) and np.isnan(v)):
            return "-"
        return f"Acc.: {100 * v:.1f}%" if r.kind == "accuracy" else f"MSE: {v:.3e}"

    header = ["Method", "Forget", "Retain", "Test", "Output Divergence", "Rel. distance"]
    rows = []
    for r in reports:
        rows.append(
            [
                r.method_label,
                perf(r, r.forget_perf),
                perf(r, r.retain_perf),
                perf(r, r.test_perf),
                f"{r.output_divergence:.3e}",
                f"{r.rel_param_distance:.3e}",
            ]
        )
    has_ft = any(r.forget_test_perf is not None for r in reports)
    if has_ft:
        header.append("Forget (test)")
        for row, r in zip(rows, reports):
            row.append(perf(r, r.forget_test_perf))
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return "\n".join(lines) + "\n"
