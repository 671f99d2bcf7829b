"""Scenario orchestration: data, training, references, unlearning, evaluation.

Every expensive artefact (trained parameters, retrain references,
curvature factorizations, unlearning deltas) is keyed by a hash of the
config entries it depends on and stored in the cache directory, so a
repeated forget request against the same trained model does no curvature
work at all.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from .. import curvature as curv
from .. import metrics, oracle, unlearn
from ..data import (
    Dataset,
    ForgetSplit,
    class_forget_split,
    fit_standardizer,
    generate_synthetic_ridge,
    load_mnist,
    subsample,
)
from ..errors import ConfigError, DataError, WinuError
from ..models import CROSS_ENTROPY, ModelSpec, objective
from .config import METHOD_ORDER, ExperimentConfig

logger = logging.getLogger(__name__)

# dense curvature is formed up to this parameter count
DENSE_PARAMS = 3000
PACKAGE_VERSION = "0.1.0"
STAGES = ("data", "train", "retrain", "hessian", "unlearn", "evaluate", "attack", "write")


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    versions: dict
    stage_times: dict = field(default_factory=dict)
    cache_hits: list = field(default_factory=list)
    total_time: float = 0.0
    notes: list = field(default_factory=list)
    # wall time of each cached computation, measured when it actually ran
    compute_times: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(
            config_hash=self.config_hash,
            seed=self.seed,
            versions=self.versions,
            stage_times=self.stage_times,
            cache_hits=self.cache_hits,
            total_time=self.total_time,
            notes=self.notes,
            compute_times=self.compute_times,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _versions() -> dict:
    return dict(
        winu=PACKAGE_VERSION,
        numpy=np.__version__,
        scipy=scipy.__version__,
        python=platform.python_version(),
    )


@dataclass
class Problem:
    spec: ModelSpec
    train: Dataset
    test: Dataset
    split: ForgetSplit
    forget_class: int | None = None

    @property
    def n(self) -> int:
        return self.train.n

    @property
    def linear(self) -> bool:
        return self.spec.kind == "ridge"


@dataclass
class ScenarioResult:
    reports: list
    manifest: RunManifest
    problem: Problem
    theta_star: np.ndarray
    references: dict
    deltas: dict
    attack_reports: list = field(default_factory=list)


@dataclass
class SweepRow:
    label: str
    mc_samples: int | None
    seed: int
    rel_error: float


def _read_csv_dataset(path, split_tag) -> Dataset:
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return Dataset(np.ascontiguousarray(raw[:, :-1]), raw[:, -1], split_tag)


class Pipeline:
    """One scenario run, stage by stage, sharing the timing manifest."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.manifest = RunManifest(cfg.config_hash(), cfg.seed, _versions())
        self.use_cache = bool(cfg["cache"])
        self._start = time.perf_counter()
        self._children = []
        for name in STAGES:
            self.manifest.stage_times[name] = 0.0
        self._hessian = None
        self._mc_proxy = None
        self.problem: Problem | None = None
        self.theta_star = None
        self.grad_norm = None

    # -- bookkeeping -------------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        """Time a stage; time spent in nested stages is charged to them only."""
        t0 = time.perf_counter()
        self._children.append(0.0)
        try:
            yield
        except WinuError as exc:
            if not hasattr(exc, "stage"):
                exc.stage = name
                logger.error("stage %s failed: %s", name, exc)
            raise
        finally:
            elapsed = time.perf_counter() - t0
            nested = self._children.pop()
            self.manifest.stage_times[name] = self.manifest.stage_times.get(name, 0.0) + elapsed - nested
            if self._children:
                self._children[-1] += elapsed

    def finish(self) -> RunManifest:
        self.manifest.total_time = time.perf_counter() - self._start
        return self.manifest

    def _key(self, *prefixes, extra: str = "") -> str:
        base = ("scenario", "seed", "lam", "data", "model")
        return self.cfg.subset_hash(base + prefixes) + extra

    def _cache_path(self, kind: str, key: str) -> Path:
        return self.cfg.cache_dir / f"{kind}-{key}.winu"

    def _cached(self, kind: str, key: str, compute, save, load, label: str | None = None):
        """Load ``kind`` from the cache or compute and store it.

        The compute wall time is kept in a JSON sidecar so that later runs
        can still report it under ``manifest.compute_times[label]``.
        """
        label = label or kind
        path = self._cache_path(kind, key)
        timing = path.with_suffix(".time.json")
        if self.use_cache and path.exists():
            self.manifest.cache_hits.append(kind)
            if timing.exists():
                self.manifest.compute_times[label] = json.loads(timing.read_text())["seconds"]
            return load(path)
        t0 = time.perf_counter()
        value = compute()
        seconds = time.perf_counter() - t0
        self.manifest.compute_times[label] = seconds
        if self.use_cache:
            save(path, value)
            timing.write_text(json.dumps({"seconds": seconds}) + "\n")
        return value

    # -- stages ------------------------------------------------------------

    def build_problem(self) -> Problem:
        cfg = self.cfg
        with self.stage("data"):
            sc = cfg.scenario
            if sc in ("ridge_iid", "ridge_shifted"):
                syn = generate_synthetic_ridge(
                    n=int(cfg["data.n"]),
                    d=int(cfg["data.d"]),
                    forget_fraction=float(cfg["data.forget_fraction"]),
                    noise_var=float(cfg["data.noise_var"]),
                    shift_factor=cfg.shift_factor,
                    seed=cfg.seed,
                    n_test=int(cfg["data.n_test"]),
                )
                self.problem = Problem(ModelSpec.ridge(int(cfg["data.d"])), syn.train, syn.test, syn.split)
            elif sc == "mnist_class_forget":
                data_dir = cfg["data.dir"] or None
                train = load_mnist("train", data_dir)
                test = load_mnist("test", data_dir)
                if not cfg["data.full_scale"]:
                    train = subsample(train, int(cfg["data.subsample"]), cfg.seed)
                std = fit_standardizer(train)
                train, test = std.apply(train), std.apply(test)
                k = int(cfg["data.forget_class"])
                self.problem = Problem(
                    ModelSpec.mlp(train.dim, int(cfg["model.hidden"]), 10),
                    train,
                    test,
                    class_forget_split(train, k),
                    forget_class=k,
                )
            else:
                train = _read_csv_dataset(cfg["data.train_csv"], "train")
                test = _read_csv_dataset(cfg["data.test_csv"], "test") if cfg["data.test_csv"] else train
                if cfg["model.kind"] == "ridge":
                    spec = ModelSpec.ridge(train.dim)
                else:
                    train = Dataset(train.features, train.labels.astype(np.int64), "train")
                    test = Dataset(test.features, test.labels.astype(np.int64), "test")
                    classes = int(max(train.labels.max(), test.labels.max())) + 1
                    spec = ModelSpec.mlp(train.dim, int(cfg["model.hidden"]), max(classes, 2))
                idx = cfg.ints("data.forget_indices")
                self.problem = Problem(spec, train, test, ForgetSplit.from_indices(idx, train.n))
        return self.problem

    def train(self) -> np.ndarray:
        p = self.problem
        cfg = self.cfg

        def compute():
            if p.linear:
                return oracle.ridge_closed_form(p.train.features, p.train.labels, cfg["lam"])
            return oracle.train_mlp(p.spec, p.train.features, p.train.labels, cfg["lam"], self.recipe())

        with self.stage("train"):
            self.theta_star = self._cached(
                "train",
                self._key("train"),
                compute,
                lambda path, th: oracle.save_params(path, p.spec, th),
                lambda path: oracle.load_params(path)[1],
            )
            _, g = objective(p.spec, self.theta_star, p.train.features, p.train.labels, cfg["lam"])
            self.grad_norm = float(np.linalg.norm(g))
        self.manifest.notes.append(f"train gradient norm {self.grad_norm:.3e}")
        return self.theta_star

    def recipe(self) -> oracle.TrainingRecipe:
        cfg = self.cfg
        return oracle.TrainingRecipe(
            oracle.FirstOrderStage(float(cfg["train.learning_rate"]), int(cfg["train.epochs"])),
            oracle.QuasiNewtonStage(
                int(cfg["train.lbfgs_iterations"]),
                float(cfg["train.grad_tol"]),
                float(cfg["train.lbfgs_tol"]),
            ),
            seed=cfg.seed,
        )

    def warm_recipe(self) -> oracle.TrainingRecipe:
        base = self.recipe()
        stage2 = replace(base.stage2, max_iterations=int(self.cfg["retrain.warm_lbfgs_iterations"]))
        return replace(base, stage2=stage2)

    def reference(self, warm: bool = False) -> np.ndarray:
        p = self.problem
        cfg = self.cfg
        kind = "warm_retrain" if warm else "retrain"

        def compute():
            if p.linear:
                return oracle.ridge_retrain_closed_form(p.train.features, p.train.labels, p.split, cfg["lam"])
            return oracle.retrain_mlp(
                p.spec,
                p.train.features,
                p.train.labels,
                p.split,
                cfg["lam"],
                self.warm_recipe() if warm else self.recipe(),
                warm_start=self.theta_star if warm else None,
            )

        with self.stage("retrain"):
            return self._cached(
                kind,
                self._key("train", "retrain") if warm else self._key("train"),
                compute,
                lambda path, th: oracle.save_params(path, p.spec, th),
                lambda path: oracle.load_params(path)[1],
            )

    def _full_curvature(self) -> curv.CurvatureOracle:
        """Full-set ``H``: dense and cached when small, matrix-free otherwise."""
        if self._hessian is not None:
            return self._hessian
        p = self.problem
        lam = self.cfg["lam"]
        with self.stage("hessian"):
            if p.spec.num_params <= DENSE_PARAMS:
                self._hessian = self._cached(
                    "hessian",
                    self._key("train"),
                    lambda: curv.CurvatureOracle.exact(
                        curv.full_hessian_exact(p.spec, self.theta_star, p.train.features, lam)
                    ),
                    lambda path, o: o.save(path),
                    curv.CurvatureOracle.load,
                )
            else:
                op = curv.ggn_operator(p.spec, self.theta_star, p.train.features, lam)
                self._hessian = curv.CurvatureOracle.matrix_free(op, float(self.cfg["unlearn.cg_rel_tol"]))
        return self._hessian

    def subspace(self) -> unlearn.SubspaceProjection | None:
        k = int(self.cfg["unlearn.subspace"])
        if k <= 0:
            return None
        return unlearn.SubspaceProjection.random(self.problem.spec.num_params, k, self.cfg.seed)

    def _mc_curvature(self) -> curv.CurvatureOracle:
        """Curvature used by MC-WIN-U, in subspace coordinates if configured."""
        if self._mc_proxy is not None:
            return self._mc_proxy
        p = self.problem
        lam = self.cfg["lam"]
        sub = self.subspace()
        diagonal = bool(self.cfg["unlearn.diagonal_proxy"])
        if sub is None and not diagonal:
            self._mc_proxy = self._full_curvature()
            return self._mc_proxy

        def compute():
            basis = None if sub is None else sub.basis
            if diagonal:
                return curv.CurvatureOracle.diagonal(
                    curv.diagonal_ggn(p.spec, self.theta_star, p.train.features, lam, basis=basis), lam
                )
            lin = curv.ggn_operator(p.spec, self.theta_star, p.train.features, lam)
            hp = np.column_stack([lin(basis[:, j]) for j in range(basis.shape[1])])
            return curv.CurvatureOracle.exact(basis.T @ hp)

        with self.stage("hessian"):
            self._mc_proxy = self._cached(
                "mc_curvature",
                self._key("train", "unlearn.subspace", "unlearn.diagonal_proxy"),
                compute,
                lambda path, o: o.save(path),
                curv.CurvatureOracle.load,
            )
        return self._mc_proxy

    def extension(self) -> unlearn.ObjectiveExtension:
        kind = self.cfg["extension.kind"]
        if kind == "none":
            return unlearn.NO_EXTENSION
        targets = None
        if kind == "target_output":
            m = self.problem.split.m
            t = self.cfg["extension.target_class"]
            if self.problem.spec.loss == CROSS_ENTROPY:
                targets = np.full(m, int(t), dtype=np.int64)
            else:
                targets = np.full(m, float(t))
        return unlearn.ObjectiveExtension(
            kind,
            float(self.cfg["extension.gamma"]),
            targets,
            bool(self.cfg["extension.target_curvature"]),
        )

    def _compute_delta(self, method: str, mc_samples: int | None = None, mc_seed: int | None = None):
        p = self.problem
        cfg = self.cfg
        th = self.theta_star
        f = p.split.forget(p.train)
        n = p.n
        force = bool(cfg["unlearn.force"])
        ext = self.extension()
        if method == "vanilla_newton":
            return unlearn.newton_vanilla(p.spec, th, self._full_curvature(), f.features, f.labels, n)
        if method == "winu":
            if p.linear and ext.kind == "none":
                return unlearn.linear_woodbury_update(th, self._full_curvature(), f.features, f.labels, n)
            if f.n * p.spec.output_dim <= unlearn.OUTPUT_CORE_LIMIT:
                return unlearn.winu_output_space(
                    p.spec, th, self._full_curvature(), f.features, f.labels, n, ext,
                    grad_norm=self.grad_norm, force=force,
                )
            if ext.kind != "none":
                raise ConfigError("objective extensions need the output-space core; forget set too large")
            # equivalent Newton step on the retain curvature, solved by CG
            self.manifest.notes.append("winu: output-space core too large, solved (H - H_f) delta = g_f by CG")
            return unlearn.newton_retain_cg(
                p.spec, th, p.train.features, p.train.labels, p.split.forget_indices, cfg["lam"],
                rel_tol=float(cfg["unlearn.cg_rel_tol"]),
                max_iters=int(cfg["unlearn.cg_max_iters"]),
                grad_norm=self.grad_norm,
                force=force,
            )
        if method == "mc_winu":
            uc = unlearn.UnlearnConfig(
                unlearn.MC_WINU,
                n=n,
                lam=cfg["lam"],
                eta=1.0,
                mc_samples=int(cfg["unlearn.mc_samples"]) if mc_samples is None else mc_samples,
                seed=int(cfg["unlearn.mc_seed"]) if mc_seed is None else mc_seed,
                subspace=self.subspace(),
            )
            return unlearn.mc_winu(
                p.spec, th, self._mc_curvature(), f.features, f.labels, uc, ext,
                grad_norm=self.grad_norm, force=force,
            )
        raise ConfigError(f"{method!r} is not an unlearning method")

    def delta(self, method: str, **kw) -> unlearn.UnlearnUpdate:
        """Cached delta; any computation (curvature solves included) is charged to "hessian"."""

        def compute():
            with self.stage("hessian"):
                return self._compute_delta(method, **kw)

        with self.stage("unlearn"):
            extra = "-" + "-".join(f"{k}{v}" for k, v in sorted(kw.items())) if kw else ""
            key = self._key("train", "unlearn", "extension", extra=f"-{method}{extra}")
            return self._cached(
                "delta",
                key,
                compute,
                lambda path, u: u.save(path),
                unlearn.UnlearnUpdate.load,
                label=f"delta:{method}{extra}",
            )


def _evaluate(pipe: Pipeline, theta, reference, label, **extra) -> metrics.MetricsReport:
    p = pipe.problem
    return metrics.evaluate(
        p.spec, theta, reference, p.train, p.test, p.split, label,
        forget_class=p.forget_class, **extra,
    )


def _write_outputs(pipe: Pipeline, reports, attack_reports, out_dir, title):
    with pipe.stage("write"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.reports_to_csv(reports, out / "results.csv")
        text = metrics.format_table(reports, title)
        if attack_reports:
            metrics.reports_to_csv(attack_reports, out / "attack.csv")
            text += "\n" + metrics.format_table(attack_reports, "relearning attack")
        (out / "table.txt").write_text(text)


def run_scenario(cfg: ExperimentConfig, write: bool = True) -> ScenarioResult:
    """Train (or load) the model, build references, unlearn, evaluate.

    Rows follow ``METHOD_ORDER``. With ``attack.epochs > 0`` each unlearned
    model (and the retrain reference) is fine-tuned on the retain set and
    evaluated after every epoch.
    """
    pipe = Pipeline(cfg)
    pipe.build_problem()
    theta = pipe.train()
    methods = [m for m in METHOD_ORDER if m in cfg.methods]
    refs = {"retrain": pipe.reference()}
    if "warm_retrain" in methods:
        refs["warm_retrain"] = pipe.reference(warm=True)
    deltas = {m: pipe.delta(m) for m in methods if m in ("vanilla_newton", "winu", "mc_winu")}

    eta = float(cfg["unlearn.eta"])
    reports = []
    with pipe.stage("evaluate"):
        models = {"original": theta}
        for m, d in deltas.items():
            models[m] = d.apply(theta, eta)
        models.update(refs)
        for m in methods:
            extra = dict(seed=cfg.seed)
            if m in deltas:
                extra["eta"] = eta
            if m == "mc_winu":
                extra["mc_samples"] = int(cfg["unlearn.mc_samples"])
            reports.append(_evaluate(pipe, models[m], refs["retrain"], m, **extra))

    attack_reports = []
    epochs = int(cfg["attack.epochs"])
    if epochs > 0:
        p = pipe.problem
        retain = p.split.retain(p.train)
        lam_r = p.n / (p.n - p.split.m) * cfg["lam"]
        acfg = metrics.AttackConfig(
            float(cfg["attack.learning_rate"]), int(cfg["attack.batch_size"]), int(cfg["attack.seed"])
        )
        for m in methods:
            if m == "original":
                continue
            with pipe.stage("attack"):
                ckpts = metrics.relearning_attack(p.spec, models[m], retain, epochs, lam_r, acfg)
            with pipe.stage("evaluate"):
                for ep, th in ckpts:
                    attack_reports.append(
                        _evaluate(pipe, th, refs["retrain"], f"{m}@attack{ep}", seed=cfg.seed)
                    )

    if write:
        _write_outputs(pipe, reports, attack_reports, cfg.output_dir, f"scenario {cfg.scenario}")
    manifest = pipe.finish()
    if write:
        manifest.save(cfg.output_dir / "manifest.json")
    return ScenarioResult(reports, manifest, pipe.problem, theta, refs, deltas, attack_reports)


def sweep_eta(cfg: ExperimentConfig, etas=None, method: str = "winu", write: bool = True):
    """Scale one stored delta by each ``eta``; the delta is computed once.

    Returns the report rows (ordered by ``eta``) and the manifest.
    """
    etas = sorted(cfg.floats("sweep.eta") if etas is None else [float(e) for e in etas])
    if method not in ("winu", "mc_winu", "vanilla_newton"):
        raise ConfigError(f"cannot sweep eta for {method!r}")
    pipe = Pipeline(cfg)
    pipe.build_problem()
    theta = pipe.train()
    ref = pipe.reference()
    update = pipe.delta(method)
    rows = []
    with pipe.stage("evaluate"):
        for eta in etas:
            extra = dict(eta=eta, seed=cfg.seed)
            if method == "mc_winu":
                extra["mc_samples"] = int(cfg["unlearn.mc_samples"])
            rows.append(_evaluate(pipe, update.apply(theta, eta), ref, method, **extra))
    if write:
        _write_outputs(pipe, rows, [], cfg.output_dir, f"eta sweep ({method})")
    manifest = pipe.finish()
    if write:
        manifest.save(cfg.output_dir / "manifest.json")
    return rows, manifest


def sweep_mc_samples(cfg: ExperimentConfig, sample_counts=None, seeds=None, write: bool = True):
    """Relative error of MC-WIN-U deltas against the exact forget curvature.

    The reference is the output-space WIN-U delta when its core fits, and
    otherwise MC-WIN-U with the enumerated bank (the same step, computed in
    the pseudo-gradient basis). The enumerated bank's own error is
    reported as the final row.
    """
    counts = cfg.ints("sweep.mc_samples") if sample_counts is None else [int(s) for s in sample_counts]
    seeds = cfg.ints("sweep.seeds") if seeds is None else [int(s) for s in seeds]
    pipe = Pipeline(cfg)
    p = pipe.build_problem()
    if p.spec.loss != CROSS_ENTROPY:
        raise ConfigError("the S sweep needs a cross-entropy model")
    theta = pipe.train()
    f = p.split.forget(p.train)
    h = pipe._mc_curvature()
    sub = pipe.subspace()
    ext = pipe.extension()
    uc = unlearn.UnlearnConfig(unlearn.MC_WINU, n=p.n, lam=cfg["lam"], subspace=sub)

    with pipe.stage("unlearn"):
        enum_bank = curv.enumerated_gradient_bank(p.spec, theta, f.features)
        enum_delta = unlearn.mc_winu(p.spec, theta, h, f.features, f.labels, uc, ext, bank=enum_bank,
                                     grad_norm=pipe.grad_norm, force=bool(cfg["unlearn.force"])).delta
        exact = None
        if sub is None and f.n * p.spec.output_dim <= unlearn.OUTPUT_CORE_LIMIT:
            exact = unlearn.winu_output_space(p.spec, theta, h, f.features, f.labels, p.n, ext,
                                              grad_norm=pipe.grad_norm, force=bool(cfg["unlearn.force"])).delta
        if exact is None:
            exact = enum_delta
            pipe.manifest.notes.append("S sweep reference: enumerated-bank MC-WIN-U")
        denom = np.linalg.norm(exact)

        rows = []
        for s in sorted(counts):
            for seed in seeds:
                d = pipe.delta("mc_winu", mc_samples=s, mc_seed=seed).delta
                rows.append(SweepRow("mc_winu", s, seed, float(np.linalg.norm(d - exact) / denom)))
        rows.append(SweepRow("enumerated", None, -1, float(np.linalg.norm(enum_delta - exact) / denom)))

    if write:
        with pipe.stage("write"):
            out = cfg.output_dir
            out.mkdir(parents=True, exist_ok=True)
            lines = ["label,S,seed,rel_error"]
            for r in rows:
                s = "" if r.mc_samples is None else str(r.mc_samples)
                lines.append(f"{r.label},{s},{r.seed},{format(r.rel_error, '.17g')}")
            (out / "mc_sweep.csv").write_text("\n".join(lines) + "\n")
    manifest = pipe.finish()
    if write:
        manifest.save(cfg.output_dir / "manifest.json")
    return rows, manifest
