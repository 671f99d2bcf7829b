"""Flat ``section.key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment. Values are parsed as
int, float, bool (``true``/``false``) or text; comma-separated values
become lists. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

SCENARIOS = ("ridge_iid", "ridge_shifted", "mnist_class_forget", "custom")

# Row labels understood by the runner, in the order rows are emitted.
METHOD_ORDER = (
    "original",
    "vanilla_newton",
    "winu",
    "mc_winu",
    "warm_retrain",
    "retrain",
)

DEFAULTS_TEXT = """\
# scenario: ridge_iid | ridge_shifted | mnist_class_forget | custom
scenario = ridge_iid
seed = 0
lam = 0.01
output_dir = results
cache = true
# empty means <output_dir>/cache
cache_dir =

# synthetic ridge
data.n = 2000
data.d = 50
data.forget_fraction = 0.01
data.noise_var = 0.01
# empty means 1 for ridge_iid and 10 for ridge_shifted
data.shift_factor =
data.n_test = 500

# MNIST
data.dir =
data.forget_class = 7
data.subsample = 10000
data.full_scale = false

# custom: CSV files with feature columns followed by a label column
data.train_csv =
data.test_csv =
data.forget_indices =

# custom model: ridge (squared loss) | mlp (tanh hidden layer, cross-entropy)
model.kind = ridge
model.hidden = 20

# rows to produce
unlearn.methods = original,vanilla_newton,winu,retrain
unlearn.eta = 1.0
unlearn.mc_samples = 16
unlearn.mc_seed = 0
# 0 keeps the full parameter space
unlearn.subspace = 0
unlearn.diagonal_proxy = false
unlearn.cg_rel_tol = 1e-8
unlearn.cg_max_iters = 2000
unlearn.force = false

# extension.kind: none | forget_maximize | target_output
extension.kind = none
extension.gamma = 0.0
extension.target_class = 0
# keep the target term's curvature (exact Newton step on the modified objective)
extension.target_curvature = false

train.learning_rate = 0.01
train.epochs = 3000
train.lbfgs_iterations = 300
train.lbfgs_tol = 1e-12
train.grad_tol = 1e-6

# warm-start retraining skips the first stage, so it gets its own quasi-Newton budget
retrain.warm_lbfgs_iterations = 5000

# attack.epochs = 0 disables the relearning attack
attack.epochs = 0
attack.learning_rate = 1e-3
attack.batch_size = 128
attack.seed = 0

sweep.eta = 0,0.25,0.5,0.75,1,1.25,1.5
sweep.mc_samples = 4,16,64,256
sweep.seeds = 0
"""


def _parse_value(text: str):
    text = text.strip()
    if text == "":
        return None
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = _parse_value(value)
    return out


DEFAULTS = parse_config_text(DEFAULTS_TEXT, "<defaults>")


def _as_list(v) -> list:
    if v is None:
        return []
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view over the flat key/value mapping."""

    values: dict

    @classmethod
    def from_mapping(cls, overrides: dict | None = None) -> "ExperimentConfig":
        merged = dict(DEFAULTS)
        for k, v in (overrides or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, extra: dict | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text, str(path))
        values.update(extra or {})
        return cls.from_mapping(values)

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Override using underscores for dots, e.g. ``data__n=100``."""
        updates = {k.replace("__", "."): v for k, v in kw.items()}
        return ExperimentConfig.from_mapping({**self.values, **updates})

    # -- derived views ----------------------------------------------------

    @property
    def scenario(self) -> str:
        return self.values["scenario"]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def methods(self) -> list[str]:
        return [str(m) for m in _as_list(self.values["unlearn.methods"])]

    @property
    def shift_factor(self) -> float:
        v = self.values["data.shift_factor"]
        if v is None:
            return 10.0 if self.scenario == "ridge_shifted" else 1.0
        return float(v)

    @property
    def output_dir(self) -> Path:
        return Path(str(self.values["output_dir"]))

    @property
    def cache_dir(self) -> Path:
        v = self.values["cache_dir"]
        return Path(str(v)) if v else self.output_dir / "cache"

    def floats(self, key) -> list[float]:
        return [float(v) for v in _as_list(self.values[key])]

    def ints(self, key) -> list[int]:
        return [int(v) for v in _as_list(self.values[key])]

    def validate(self) -> None:
        v = self.values
        if v["scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario {v['scenario']!r}")
        if not isinstance(v["lam"], (int, float)) or v["lam"] <= 0:
            raise ConfigError("lam must be a positive number")
        if not isinstance(v["seed"], int):
            raise ConfigError("seed must be an integer")
        methods = self.methods
        if not methods:
            raise ConfigError("unlearn.methods is empty")
        for m in methods:
            if m not in METHOD_ORDER:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHOD_ORDER)}")
        if len(set(methods)) != len(methods):
            raise ConfigError("unlearn.methods lists a method twice")
        linear = self.scenario in ("ridge_iid", "ridge_shifted") or (
            self.scenario == "custom" and v["model.kind"] == "ridge"
        )
        if linear and ("mc_winu" in methods or "warm_retrain" in methods):
            raise ConfigError("mc_winu and warm_retrain need a cross-entropy MLP scenario")
        if linear and int(v["attack.epochs"]) > 0:
            raise ConfigError("the relearning attack is defined for the MLP scenarios")
        if self.scenario == "ridge_iid" and v["data.shift_factor"] not in (None, 1, 1.0):
            raise ConfigError("ridge_iid requires shift_factor 1")
        if self.shift_factor < 1:
            raise ConfigError("data.shift_factor must be >= 1")
        if not 0 < float(v["data.forget_fraction"]) < 1:
            raise ConfigError("data.forget_fraction must lie in (0, 1)")
        for key in ("data.n", "data.d", "data.n_test", "data.subsample", "train.epochs",
                    "retrain.warm_lbfgs_iterations"):
            if int(v[key]) < (0 if key == "train.epochs" else 1):
                raise ConfigError(f"{key} must be positive")
        if float(v["train.grad_tol"]) <= 0:
            raise ConfigError("train.grad_tol must be positive")
        if float(v["unlearn.eta"]) < 0:
            raise ConfigError("unlearn.eta must be >= 0")
        if int(v["unlearn.mc_samples"]) < 1:
            raise ConfigError("unlearn.mc_samples must be >= 1")
        if v["extension.kind"] not in ("none", "forget_maximize", "target_output"):
            raise ConfigError(f"unknown extension kind {v['extension.kind']!r}")
        if float(v["extension.gamma"]) < 0:
            raise ConfigError("extension.gamma must be >= 0")
        if self.scenario == "custom":
            if not v["data.train_csv"]:
                raise ConfigError("custom scenario needs data.train_csv")
            if not _as_list(v["data.forget_indices"]):
                raise ConfigError("custom scenario needs data.forget_indices")
            if v["model.kind"] not in ("ridge", "mlp"):
                raise ConfigError("model.kind must be ridge or mlp")
        if int(v["attack.epochs"]) < 0:
            raise ConfigError("attack.epochs must be >= 0")

    def canonical(self) -> dict:
        """Values with lists and scalars normalized, keyed in sorted order."""
        return {k: self.values[k] for k in sorted(self.values)}

    def config_hash(self) -> str:
        """Stable hash, independent of key order in the source file."""
        blob = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def subset_hash(self, prefixes) -> str:
        """Hash of the keys under ``prefixes`` only, used as cache keys."""
        sel = {
            k: v
            for k, v in self.canonical().items()
            if any(k == p or k.startswith(p + ".") for p in prefixes)
        }
        return hashlib.sha256(json.dumps(sel, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for k, v in self.canonical().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = ""
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"
