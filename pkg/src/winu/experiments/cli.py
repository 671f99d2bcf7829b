"""Command-line entry point: ``winu <subcommand> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 data or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import metrics, oracle
from ..errors import ConfigError, DataError, NumericalError, WinuError
from .config import DEFAULTS_TEXT, ExperimentConfig, parse_config_text
from .runner import Pipeline, run_scenario, sweep_eta, sweep_mc_samples

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DATA = 0, 2, 3, 4


def _load_config(args) -> ExperimentConfig:
    extra = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        extra.update(parse_config_text(item, "--set"))
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.out is not None:
        extra["output_dir"] = args.out
    if args.config:
        return ExperimentConfig.from_file(args.config, extra)
    return ExperimentConfig.from_mapping(extra)


def _prepared(cfg) -> Pipeline:
    pipe = Pipeline(cfg)
    pipe.build_problem()
    pipe.train()
    return pipe


def cmd_train(cfg, args) -> int:
    pipe = _prepared(cfg)
    path = oracle.save_params(cfg.output_dir / "theta.winu", pipe.problem.spec, pipe.theta_star,
                              {"grad_norm": pipe.grad_norm})
    print(f"trained parameters: {path} (gradient norm {pipe.grad_norm:.3e})")
    pipe.finish().save(cfg.output_dir / "manifest.json")
    return EXIT_OK


def cmd_retrain(cfg, args) -> int:
    pipe = _prepared(cfg)
    theta_r = pipe.reference(warm=args.warm)
    name = "warm_retrain.winu" if args.warm else "retrain.winu"
    path = oracle.save_params(cfg.output_dir / name, pipe.problem.spec, theta_r)
    print(f"retrained parameters: {path}")
    pipe.finish().save(cfg.output_dir / "manifest.json")
    return EXIT_OK


def cmd_unlearn(cfg, args) -> int:
    pipe = _prepared(cfg)
    methods = [args.method] if args.method else [m for m in cfg.methods if m in ("vanilla_newton", "winu", "mc_winu")]
    eta = float(cfg["unlearn.eta"])
    summary = {}
    for m in methods:
        upd = pipe.delta(m)
        upd.save(cfg.output_dir / f"delta-{m}.winu")
        oracle.save_params(cfg.output_dir / f"unlearned-{m}.winu", pipe.problem.spec, upd.apply(pipe.theta_star, eta))
        d = upd.diagnostics
        summary[m] = dict(
            solver=d.method,
            core_size=d.woodbury_core_size,
            core_condition=d.core_condition_estimate,
            cg_iterations=d.cg_iterations,
            delta_norm=float(np.linalg.norm(upd.delta)),
        )
        print(f"{m}: solver {d.method}, |delta| {summary[m]['delta_norm']:.6e}")
    (cfg.output_dir / "unlearn.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    pipe.finish().save(cfg.output_dir / "manifest.json")
    return EXIT_OK


def cmd_attack(cfg, args) -> int:
    if int(cfg["attack.epochs"]) == 0:
        cfg = cfg.with_overrides(attack__epochs=args.epochs)
    res = run_scenario(cfg)
    print(metrics.format_table(res.attack_reports, "relearning attack"), end="")
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    if args.kind == "eta":
        rows, _ = sweep_eta(cfg, method=args.method or "winu")
        print(metrics.format_table(rows, "eta sweep"), end="")
    else:
        rows, _ = sweep_mc_samples(cfg)
        for r in rows:
            print(f"{r.label:<12} S={r.mc_samples!s:<6} seed={r.seed:<4} rel_error={r.rel_error:.6e}")
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    res = run_scenario(cfg)
    print(metrics.format_table(res.reports, f"scenario {cfg.scenario}"), end="")
    print(f"results written to {Path(cfg.output_dir) / 'results.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="winu", description="Second-order machine unlearning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "train (or load cached) original parameters")
    p = add("retrain", cmd_retrain, "compute the retraining reference")
    p.add_argument("--warm", action="store_true", help="warm-start from the trained parameters")
    p = add("unlearn", cmd_unlearn, "compute unlearning deltas")
    p.add_argument("--method", choices=("vanilla_newton", "winu", "mc_winu"))
    p = add("attack", cmd_attack, "relearning attack on each unlearned model")
    p.add_argument("--epochs", type=int, default=3)
    p = add("sweep", cmd_sweep, "step-size or sample-count sweep")
    p.add_argument("--kind", choices=("eta", "mc"), default="eta")
    p.add_argument("--method", choices=("vanilla_newton", "winu", "mc_winu"))
    p = add("report", cmd_report, "full scenario table")
    p.add_argument("--show-defaults", action="store_true", help="print the embedded defaults and exit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "show_defaults", False):
        print(DEFAULTS_TEXT, end="")
        return EXIT_OK
    try:
        cfg = _load_config(args)
        return args.func(cfg, args)
    except NumericalError as exc:
        code = EXIT_NUMERICAL
        err = exc
    except (DataError, OSError) as exc:
        code = EXIT_DATA
        err = exc
    except (WinuError, ValueError) as exc:
        code = EXIT_CONFIG
        err = exc
    stage = getattr(err, "stage", None)
    where = f" (stage {stage})" if stage else ""
    print(f"error{where}: {type(err).__name__}: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
