"""Batch front-end: run experiments, verify guarantees, account privacy.

Configuration is a YAML file (nested key/value) merged over defaults, with
command-line flags taking precedence.  Unknown keys anywhere are rejected.
Outputs are byte-deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .estimator import DivergenceError
from .federated import FederatedConfig, run_trusted, run_untrusted
from .privacy import (
    TRUSTED,
    UNTRUSTED,
    NoiseSchedule,
    NoPrivacyError,
    account,
    calibrate,
    rdp_to_dp,
    zero_schedule,
)
from .problems import mnist_problem, synthetic_logistic, synthetic_quadratic
from .verify import SUITES

MNIST_ENV = "DP_MU2_MNIST_DIR"

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; maps to exit code 2."""


DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "run": {
        "mode": UNTRUSTED,
        "problem": {"kind": "quadratic"},
        "M": 1,
        "T": 100,
        "rho": 4.0,
        "eta": None,
        "deltas": [1e-5],
        "n_seeds": 1,
        "workers": 0,
        "record_trace": False,
    },
    "verify": {
        "suites": ["all"],
        "trials": {},
        "inject_bug": False,
    },
    "account": {
        "mode": UNTRUSTED,
        "S": None,
        "T": None,
        "M": 1,
        "rho": None,
        "sigma_sq": None,
        "deltas": [1e-5],
    },
}

PROBLEM_KEYS = {
    "quadratic": {"kind", "dim", "heterogeneity", "noise_level", "radius", "center_norm"},
    "logistic": {"kind", "dim", "heterogeneity", "n_atoms", "feature_radius", "radius"},
    "mnist": {"kind", "dir"},
}


def _check_keys(section: str, mapping: dict, allowed) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown} "
                          f"(allowed: {sorted(allowed)})")


def load_config(path: str | None) -> dict:
    """Defaults merged with the YAML file at ``path`` (file wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    _check_keys("<top level>", data, DEFAULTS)
    for key, value in data.items():
        if key in ("run", "verify", "account"):
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            _check_keys(key, value, DEFAULTS[key])
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def validate_config(cfg: dict, command: str) -> dict:
    """Validate the global settings and the active command's section."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    if command == "run":
        run = cfg["run"]
        if run["mode"] not in (UNTRUSTED, TRUSTED):
            raise ConfigError(f"run.mode must be untrusted or trusted, got {run['mode']!r}")
        problem = run["problem"]
        kind = problem.get("kind")
        if kind not in PROBLEM_KEYS:
            raise ConfigError(f"run.problem.kind must be one of {sorted(PROBLEM_KEYS)}, "
                              f"got {kind!r}")
        _check_keys("run.problem", problem, PROBLEM_KEYS[kind])
        for name in ("M", "T", "n_seeds"):
            if not isinstance(run[name], int) or run[name] < 1:
                raise ConfigError(f"run.{name} must be a positive integer, got {run[name]!r}")
        if run["rho"] is not None and not run["rho"] > 0:
            raise ConfigError(f"run.rho must be positive or null, got {run['rho']!r}")
        if run["rho"] is None and run["eta"] is None:
            raise ConfigError("run.rho: null (no privacy) requires an explicit run.eta")
        if not run["deltas"] or not all(0 < d < 1 for d in run["deltas"]):
            raise ConfigError(f"run.deltas must be a non-empty list within (0, 1), "
                              f"got {run['deltas']!r}")
    elif command == "account":
        acct = cfg["account"]
        if acct["mode"] not in (UNTRUSTED, TRUSTED):
            raise ConfigError(f"account.mode must be untrusted or trusted, "
                              f"got {acct['mode']!r}")
        if not acct["deltas"] or not all(0 < d < 1 for d in acct["deltas"]):
            raise ConfigError(f"account.deltas must be a non-empty list within (0, 1), "
                              f"got {acct['deltas']!r}")
    return cfg


def build_problem(problem_cfg: dict, M: int, T: int, seed: int):
    kind = problem_cfg["kind"]
    if kind == "quadratic":
        return synthetic_quadratic(
            dim=problem_cfg.get("dim", 5),
            M=M,
            T=T,
            heterogeneity=problem_cfg.get("heterogeneity", 0.0),
            noise_level=problem_cfg.get("noise_level", 0.5),
            seed=seed,
            radius=problem_cfg.get("radius", 1.0),
            center_norm=problem_cfg.get("center_norm"),
        )
    if kind == "logistic":
        return synthetic_logistic(
            dim=problem_cfg.get("dim", 5),
            M=M,
            T=T,
            heterogeneity=problem_cfg.get("heterogeneity", 0.0),
            seed=seed,
            n_atoms=problem_cfg.get("n_atoms", 16),
            feature_radius=problem_cfg.get("feature_radius", 2.0),
            radius=problem_cfg.get("radius", 1.0),
        )
    return mnist_problem(*mnist_paths(problem_cfg.get("dir")))


def mnist_paths(data_dir: str | None) -> tuple[str, str, str, str]:
    if data_dir is None:
        data_dir = os.environ.get(MNIST_ENV)
    if not data_dir:
        raise ConfigError(f"MNIST needs run.problem.dir or the {MNIST_ENV} environment variable")
    base = Path(data_dir)
    names = (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    )
    found = []
    for name in names:
        raw, gz = base / name, base / (name + ".gz")
        if raw.exists():
            found.append(str(raw))
        elif gz.exists():
            found.append(str(gz))
        else:
            raise ConfigError(f"missing MNIST file: {raw} (or {gz})")
    return tuple(found)


def _effective_echo(cfg: dict, command: str) -> dict:
    return {
        "seed": cfg["seed"],
        "output_dir": cfg["output_dir"],
        command: copy.deepcopy(cfg[command]),
    }


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def cmd_run(cfg: dict) -> int:
    run = cfg["run"]
    mode, M, T = run["mode"], run["M"], run["T"]
    out_dir = Path(cfg["output_dir"])
    echo = _effective_echo(cfg, "run")
    problem = build_problem(run["problem"], M, T, cfg["seed"])
    runner = run_untrusted if mode == UNTRUSTED else run_trusted

    records = []
    for k in range(run["n_seeds"]):
        seed = cfg["seed"] + k
        fed_cfg = FederatedConfig(
            mode=mode,
            M=M,
            T=T,
            rho=run["rho"],
            noise_schedule=zero_schedule(T, M, mode) if run["rho"] is None else None,
            eta=run["eta"],
            master_seed=seed,
            deltas=tuple(run["deltas"]),
            record_trace=run["record_trace"],
            workers=run["workers"],
            config_echo=echo,
        )
        rec = runner(problem, fed_cfg)
        records.append(rec)
        name = "trace.csv" if run["n_seeds"] == 1 else f"trace_{k:03d}.csv"
        _write_text(out_dir / name, rec.to_csv())

    losses = [r.final_metrics.get("population_loss", r.final_metrics["final_loss"])
              for r in records]
    summary = {"loss": float(np.mean(losses))}
    if "accuracy" in records[0].final_metrics:
        summary["accuracy"] = float(np.mean(
            [r.final_metrics["accuracy"] for r in records]))
    if "final_excess_loss" in records[0].final_metrics:
        summary["excess_loss"] = float(np.mean(
            [r.final_metrics["final_excess_loss"] for r in records]))
    result = {
        "config": echo,
        "mode": mode,
        "eta": records[0].eta,
        "seeds": [r.seed for r in records],
        "per_seed": [r.final_metrics for r in records],
        "final": summary,
        "privacy": records[0].privacy,
    }
    _write_text(out_dir / "result.json",
                json.dumps(result, sort_keys=True, indent=2) + "\n")

    print(f"mode={mode} M={M} T={T} rho={run['rho']} eta={records[0].eta:.6g}")
    print(f"final loss: {summary['loss']:.6f}")
    if "accuracy" in summary:
        print(f"accuracy:   {summary['accuracy']:.4f}")
    if records[0].privacy is not None:
        print(f"rho:        {records[0].privacy['rho']:.6g}")
        for row in records[0].privacy["epsilon_at_delta"]:
            print(f"  (epsilon, delta) = ({row['epsilon']:.4f}, {row['delta']:g})")
    else:
        print("rho:        none (zero-noise run, no privacy guarantee)")
    traces = "trace.csv" if run["n_seeds"] == 1 else f"trace_000..{run['n_seeds'] - 1:03d}.csv"
    print(f"wrote {out_dir}/{traces} and {out_dir}/result.json")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    ver = cfg["verify"]
    names = list(ver["suites"])
    if not names:
        raise ConfigError("verify.suites must name at least one suite")
    if names == ["all"]:
        names = list(SUITES)
    unknown = sorted(set(names) - set(SUITES))
    if unknown:
        raise ConfigError(f"unknown verify suites: {unknown} (available: {sorted(SUITES)})")
    trials = ver["trials"]
    _check_keys("verify.trials", trials, SUITES)

    results = []
    for name in names:
        kwargs = dict(trials.get(name) or {})
        kwargs.setdefault("seed", cfg["seed"])
        if ver["inject_bug"] and name == "decomposition":
            kwargs["perturb"] = 1e-3
        try:
            results.extend(SUITES[name](**kwargs))
        except TypeError as e:
            raise ConfigError(f"bad trial parameters for suite '{name}': {e}") from e

    out_dir = Path(cfg["output_dir"])
    report = [r.as_dict() for r in results]
    _write_text(out_dir / "verify_report.json",
                json.dumps(report, sort_keys=True, indent=2) + "\n")
    all_passed = True
    for r in results:
        print(f"[{r.status.upper():4s}] {r.name}: margin={r.margin:.3g} "
              f"tolerance={r.tolerance:g} trials={r.n_trials}")
        all_passed = all_passed and r.status == "pass"
    print(f"report written to {out_dir / 'verify_report.json'}")
    return EXIT_OK if all_passed else EXIT_CHECKS_FAILED


def cmd_account(cfg: dict) -> int:
    acct = cfg["account"]
    mode, M = acct["mode"], acct["M"]
    S, T = acct["S"], acct["T"]
    rho, sigma_sq = acct["rho"], acct["sigma_sq"]
    if S is None or T is None:
        raise ConfigError("account needs S and T (config account.S / account.T or --S/--T)")
    if (rho is None) == (sigma_sq is None):
        raise ConfigError("account needs exactly one of rho / sigma_sq")
    if rho is not None and rho <= 0:
        raise ConfigError(f"rho={rho} provides no finite privacy guarantee")
    if sigma_sq is not None and sigma_sq <= 0:
        raise ConfigError(f"sigma_sq={sigma_sq} provides no finite privacy guarantee")

    if rho is not None:
        schedule = calibrate(rho, S, T, M, mode)
        sigma_sq = float(schedule.variances.flat[0])
    else:
        shape = (T,) if mode == TRUSTED else (M, T)
        schedule = NoiseSchedule(mode, np.full(shape, float(sigma_sq)))
    rho_out = account(schedule, S, M)
    rho_val = float(np.max(rho_out)) if mode == UNTRUSTED else float(rho_out)

    print(f"mode={mode} S={S:g} T={T} M={M}")
    print(f"rho:      {rho_val:.12g}")
    print(f"sigma^2:  {sigma_sq:.12g} per round"
          + (" per machine" if mode == UNTRUSTED else " at the server"))
    print(f"RDP curve: eps(alpha) = alpha * rho^2 / 2")
    print(f"{'delta':>12s}  {'epsilon':>12s}")
    for d in acct["deltas"]:
        g = rdp_to_dp(rho_val, float(d))
        print(f"{d:>12g}  {g.epsilon:>12.6g}")
    return EXIT_OK


def _apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    section = cfg[args.command] if args.command in ("run", "account") else None
    if section is not None:
        if args.mode is not None:
            section["mode"] = args.mode
        if args.rho is not None:
            section["rho"] = args.rho
            if args.command == "account":
                section["sigma_sq"] = None
        if args.M is not None:
            section["M"] = args.M
        if args.T is not None:
            section["T"] = args.T
        if args.delta:
            section["deltas"] = list(args.delta)
    if args.command == "account":
        acct = cfg["account"]
        if args.S is not None:
            acct["S"] = args.S
        if args.sigma_sq is not None:
            acct["sigma_sq"] = args.sigma_sq
            acct["rho"] = None if args.rho is None else acct["rho"]
    if args.command == "verify" and args.inject_bug:
        cfg["verify"]["inject_bug"] = True
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfed",
        description="Differentially private federated optimization: "
                    "run experiments, verify guarantees, account privacy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("run", "run a federated or single-machine experiment"),
        ("verify", "run empirical verification suites"),
        ("account", "convert between rho, noise variance, and (epsilon, delta)"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", metavar="PATH", help="YAML config file")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--mode", choices=[UNTRUSTED, TRUSTED])
        p.add_argument("--rho", type=float, metavar="R")
        p.add_argument("--M", type=int, metavar="M")
        p.add_argument("--T", type=int, metavar="T")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--delta", type=float, action="append", metavar="D",
                       help="delta for (epsilon, delta) reporting; repeatable")
        if name == "account":
            p.add_argument("--S", type=float, metavar="S",
                           help="increment norm bound S = G + 2LD")
            p.add_argument("--sigma-sq", dest="sigma_sq", type=float, metavar="V")
        if name == "verify":
            p.add_argument("--inject-bug", action="store_true",
                           help=argparse.SUPPRESS)  # detector sanity hook
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_flags(cfg, args)
        cfg = validate_config(cfg, args.command)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
        return cmd_account(cfg)
    except (ConfigError, NoPrivacyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
