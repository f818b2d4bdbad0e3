"""Command-line drivers: ``mean-estimate``, ``ope``, ``opl`` and ``lambda``.

Settings come from an INI file (one section per command, plus an optional
``[common]`` section) and are overridden by flags. Unknown keys are
rejected. Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .data import DEFAULT_PROPENSITY_FLOOR, UniformPolicy, compute_weighted_samples, load_lbf_csv
from .estimators import EstimatorSpec
from .lambda_select import (LambdaSelectConfig, empirical_nu, lambda_adaptive, lambda_data_driven_detail,
                            lambda_noisy_reward)
from .opl import (OplConfig, TrainingDivergence, blob_bandit, deterministic_accuracy, deterministic_ips_value,
                  expected_accuracy, load_checkpoint, make_blobs, save_checkpoint, train_logging_policy,
                  train_policy)
from .rng import RngHandle
from .synthetic import (GaussianScenario, HeavyTailScenario, LomaxScenario, RewardNoiseSpec, run_mean_estimation,
                        run_ope_experiment, tune_specs, variance_reduction_holds)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

ALL_ESTIMATORS = "IPS,SNIPS,IPS_TR,PM,ES,IX,OS,LS,LS_LIN,LSE"


class ConfigError(ValueError):
    pass


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _intlist(v):
    return [int(x) for x in str(v).split(",") if x.strip()]


def _strlist(v):
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _opt_float(v):
    return None if v is None or str(v).strip().lower() in ("", "none") else float(v)


COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, None, "write output to this path instead of stdout"),
    "format": (str, "csv", "csv or json"),
    "threads": (int, os.cpu_count() or 1, "worker threads"),
}

SCHEMAS = {
    "mean-estimate": {
        "trials": (int, 10000, "Monte-Carlo repetitions"),
        "ns": (_intlist, "10,50,100,1000,10000", "comma-separated sample sizes"),
        "lambda": (float, 0.1, "LSE lambda magnitude"),
        "scale": (float, 1.0 / 3.0, "Pareto scale x_m"),
        "shape": (float, 1.5, "Pareto shape"),
    },
    "ope": {
        "scenario": (str, "gaussian", "gaussian, lomax or heavy"),
        "mu1": (float, 0.5, "target mean"),
        "mu2": (float, 1.0, "logging mean"),
        "sigma2": (float, 0.25, "shared variance"),
        "alpha": (float, 1.1, "Gaussian reward growth"),
        "alpha_t": (float, 2.5, "Lomax target shape"),
        "alpha_l": (float, 1.5, "Lomax logging shape"),
        "beta": (float, 2.0, "Lomax reward exponent"),
        "family": (str, "student_t", "heavy-tail family: gev, student_t, frechet, lomax"),
        "shape": (_opt_float, None, "heavy-tail shape (family default if unset)"),
        "n": (int, 1000, "samples per trial"),
        "trials": (int, 10000, "Monte-Carlo trials"),
        "estimators": (_strlist, ALL_ESTIMATORS, "comma-separated estimator kinds"),
        "tune": (_bool, True, "grid-search hyperparameters on an independent seed"),
        "tune_trials": (int, None, "trials for tuning (default: trials)"),
        "lse_lambda": (str, None, "fix the LSE magnitude: a number or 'adaptive'"),
        "noise": (str, "none", "reward noise: none, positive_gaussian, pareto"),
        "noise_param": (_opt_float, None, "noise sigma or Pareto shape"),
        "dump_estimates": (str, None, "write per-trial estimates to this CSV"),
    },
    "opl": {
        "data": (str, None, "LBF CSV to learn from (default: synthetic blobs)"),
        "n_train": (int, 5000, "blob training size"),
        "n_valid": (int, 1000, "blob validation size"),
        "n_test": (int, 1000, "blob test size"),
        "dim": (int, 10, "blob feature dimension"),
        "classes": (int, 4, "blob classes"),
        "separation": (float, 2.0, "blob centre separation"),
        "offset": (float, 5.0, "blob common shift"),
        "logging_fraction": (float, 0.1, "fraction of labels used to fit the logging policy"),
        "logging_tau": (float, 10.0, "logging inverse temperature"),
        "objectives": (_strlist, "LSE:1.0,IPS", "KIND[:param] list"),
        "lr": (float, 1e-3, "learning rate"),
        "batch_size": (int, 128, "mini-batch size"),
        "max_epochs": (int, 300, "epoch cap"),
        "patience": (int, 10, "early-stopping patience"),
        "b": (_opt_float, None, "inverse-Gamma propensity noise parameter"),
        "pf": (_opt_float, None, "reward flip probability"),
        "floor": (float, DEFAULT_PROPENSITY_FLOOR, "propensity floor"),
        "ridge": (float, 1.0, "reward-model ridge (DM/DR/DR_LSE)"),
        "seeds": (_intlist, "0,1,2", "comma-separated run seeds"),
        "log_dir": (str, None, "write per-run training logs here"),
        "checkpoint_dir": (str, None, "write per-run checkpoints here"),
    },
    "lambda": {
        "n": (int, None, "sample size"),
        "epsilon": (float, 1.0, "heavy-tail order"),
        "delta": (float, 0.05, "confidence level"),
        "tv": (float, 0.1, "total-variation proxy for the noisy rule"),
        "nu": (_opt_float, None, "empirical (1+eps)-moment"),
        "data": (str, None, "LBF CSV to estimate nu and n from"),
        "policy": (str, None, "target policy checkpoint (default uniform)"),
        "floor": (float, DEFAULT_PROPENSITY_FLOOR, "propensity floor"),
    },
}

FLAG_ALIASES = {"opl": {"objective": "objectives"}}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lseope", description="LSE off-policy evaluation and learning")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, schema in SCHEMAS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="INI file")
        for key, (_, default, help_) in {**COMMON, **schema}.items():
            flag = "--" + key.replace("_", "-")
            extra = [f"--{a}" for a, t in FLAG_ALIASES.get(cmd, {}).items() if t == key]
            sp.add_argument(flag, *extra, dest=key, default=None, help=f"{help_} (default: {default})")
    return p


def resolve_config(cmd, args) -> dict:
    """Defaults, then the INI file, then flags; values are parsed and typed."""
    schema = {**COMMON, **SCHEMAS[cmd]}
    raw = {k: v[1] for k, v in schema.items()}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cp = configparser.ConfigParser()
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from None
        for section in cp.sections():
            if section not in ("common", cmd):
                if section in SCHEMAS:
                    continue
                raise ConfigError(f"unknown config section [{section}]")
            for key, val in cp.items(section):
                key = key.replace("-", "_")
                if key not in schema:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                raw[key] = val
    for key in schema:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    cfg = {}
    for key, (conv, _, _) in schema.items():
        v = raw[key]
        try:
            cfg[key] = v if v is None or (not isinstance(v, str) and conv is not str) else conv(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def render(command, cfg, columns, rows, meta=None) -> str:
    if cfg["format"] == "json":
        doc = {"command": command, "config": cfg, "columns": columns, "rows": rows, "metadata": meta or {}}
        return json.dumps(_jsonable(doc), indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def emit(text, cfg):
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def info(msg):
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

OPE_COLUMNS = ["scenario", "estimator", "param", "n", "trials", "bias", "variance", "mse"]


def cmd_mean_estimate(cfg):
    t0 = time.perf_counter()
    out = run_mean_estimation(cfg["ns"], cfg["trials"], cfg["lambda"], cfg["seed"],
                              cfg["scale"], cfg["shape"], cfg["threads"])
    rows = [dict(scenario="pareto", estimator=name, param=cfg["lambda"] if name == "LSE" else None,
                 n=n, trials=st.n_trials, bias=st.bias, variance=st.variance, mse=st.mse)
            for name, n, st in out]
    info(f"mean-estimate finished in {time.perf_counter() - t0:.1f}s")
    return OPE_COLUMNS, rows, {"truth": cfg["shape"] * cfg["scale"] / (cfg["shape"] - 1.0),
                               "bias_convention": "mean(estimate) - truth"}


def make_scenario(cfg):
    s = cfg["scenario"]
    if s == "gaussian":
        return GaussianScenario(cfg["mu1"], cfg["mu2"], cfg["sigma2"], cfg["alpha"])
    if s == "lomax":
        return LomaxScenario(cfg["alpha_t"], cfg["alpha_l"], cfg["beta"])
    if s == "heavy":
        return HeavyTailScenario(cfg["family"], cfg["shape"], cfg["mu1"], cfg["mu2"], cfg["sigma2"])
    raise ConfigError(f"unknown scenario {s!r}")


def cmd_ope(cfg):
    scn = make_scenario(cfg)
    noise = RewardNoiseSpec(cfg["noise"], cfg["noise_param"])
    kinds = [k.upper().replace("-", "_") for k in cfg["estimators"]]
    for k in kinds:
        EstimatorSpec(k, 1.0 if k not in ("IPS", "SNIPS") else None)
    n, trials = cfg["n"], cfg["trials"]
    if n < 1 or trials < 2:
        raise ConfigError("need n >= 1 and trials >= 2")
    fixed_lse = None
    if cfg["lse_lambda"] is not None:
        v = cfg["lse_lambda"].strip().lower()
        try:
            fixed_lse = lambda_adaptive(n, 1.0) if v == "adaptive" else float(v)
        except ValueError:
            raise ConfigError("lse_lambda must be a number or 'adaptive'") from None
    t0 = time.perf_counter()
    tune_kinds = [k for k in kinds if not (k == "LSE" and fixed_lse is not None)]
    if cfg["tune"]:
        specs = tune_specs(scn, tune_kinds, n, cfg["tune_trials"] or trials, noise, cfg["seed"], cfg["threads"])
    else:
        specs = [EstimatorSpec(k, None if k in ("IPS", "SNIPS", "IPS_TR", "PM", "ES") else 1.0) for k in tune_kinds]
    by_kind = {s.kind: s for s in specs}
    if fixed_lse is not None:
        by_kind["LSE"] = EstimatorSpec("LSE", fixed_lse)
    specs = [by_kind[k] for k in kinds]
    res = run_ope_experiment(scn, specs, n, trials, noise, cfg["seed"], cfg["threads"],
                             keep_estimates=bool(cfg["dump_estimates"]))
    rows = list(res.rows())
    for r in rows:
        if r["estimator"] in ("IPS", "SNIPS"):
            r["param"] = None
    meta = {"truth": res.truth, "bias_convention": "mean(estimate) - truth",
            "seconds": time.perf_counter() - t0}
    if "LSE" in kinds and "IPS" in kinds:
        meta["variance_reduction_holds"] = variance_reduction_holds(res)
    if cfg["dump_estimates"]:
        with open(cfg["dump_estimates"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial"] + [s.label for s in specs])
            for t in range(trials):
                w.writerow([t] + [repr(float(res.estimates[s][t])) for s in specs])
    info(f"ope finished in {meta['seconds']:.1f}s (truth {res.truth:.6g})")
    return OPE_COLUMNS, rows, meta


def _parse_objective(tok):
    kind, _, param = tok.partition(":")
    return EstimatorSpec(kind.strip(), float(param) if param.strip() else None)


def cmd_opl(cfg):
    objectives = [_parse_objective(t) for t in cfg["objectives"]]
    rows = []
    columns = ["objective", "param", "seed", "logging_accuracy", "logging_argmax_accuracy", "accuracy",
               "best_epoch"]
    for seed in cfg["seeds"]:
        h = RngHandle(seed)
        if cfg["data"]:
            ds = load_lbf_csv(cfg["data"])
            perm = h.substream(0).permutation(ds.n)
            cut = max(1, int(0.8 * ds.n))
            train, valid = ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))
            log_acc = log_argmax = None
        else:
            sp = make_blobs(cfg["n_train"], cfg["n_valid"], cfg["n_test"], cfg["classes"], cfg["dim"],
                            cfg["separation"], cfg["offset"], h.substream(0))
            logging = train_logging_policy(sp.X_train, sp.y_train, cfg["classes"], cfg["logging_fraction"],
                                           cfg["logging_tau"], rng=h.substream(1))
            train = blob_bandit(sp, logging, h.substream(2))
            valid = (sp.X_valid, sp.y_valid)
            log_acc = expected_accuracy(logging, sp.X_test, sp.y_test)
            log_argmax = deterministic_accuracy(logging, sp.X_test, sp.y_test)
        for spec in objectives:
            oc = OplConfig(spec, cfg["lr"], cfg["batch_size"], cfg["max_epochs"], cfg["patience"],
                           cfg["b"], cfg["pf"], cfg["floor"], cfg["ridge"], seed)
            res = train_policy(train, valid, oc)
            if cfg["data"]:
                score = deterministic_ips_value(res.policy, valid, cfg["floor"])
            else:
                score = deterministic_accuracy(res.policy, sp.X_test, sp.y_test)
            rows.append(dict(objective=spec.kind, param=spec.param, seed=seed, logging_accuracy=log_acc,
                             logging_argmax_accuracy=log_argmax, accuracy=score, best_epoch=res.best_epoch))
            tag = f"{spec.kind}_{spec.param:g}_seed{seed}"
            if cfg["log_dir"]:
                os.makedirs(cfg["log_dir"], exist_ok=True)
                res.log.write_csv(os.path.join(cfg["log_dir"], f"log_{tag}.csv"))
            if cfg["checkpoint_dir"]:
                os.makedirs(cfg["checkpoint_dir"], exist_ok=True)
                save_checkpoint(res.policy, os.path.join(cfg["checkpoint_dir"], f"policy_{tag}.txt"))
    for spec in objectives:
        acc = np.array([r["accuracy"] for r in rows if r["objective"] == spec.kind and r["param"] == spec.param])
        rows.append(dict(objective=spec.kind, param=spec.param, seed="mean", accuracy=float(acc.mean())))
        rows.append(dict(objective=spec.kind, param=spec.param, seed="sd",
                         accuracy=float(acc.std(ddof=1)) if acc.size > 1 else 0.0))
    metric = "ips_value_of_argmax_policy_on_holdout" if cfg["data"] else "deterministic_test_accuracy"
    meta = {"metric": metric}
    if not cfg["data"]:
        meta["logging_accuracy"] = "expected accuracy of the stochastic logging policy"
    return columns, rows, meta


def cmd_lambda(cfg):
    eps, n, nu = cfg["epsilon"], cfg["n"], cfg["nu"]
    if cfg["data"]:
        ds = load_lbf_csv(cfg["data"])
        target = load_checkpoint(cfg["policy"]) if cfg["policy"] else UniformPolicy(ds.action_count)
        ws = compute_weighted_samples(ds, target, cfg["floor"])
        n = ds.n if n is None else n
        nu = empirical_nu(ws, eps) if nu is None else nu
    try:
        lcfg = LambdaSelectConfig(eps, cfg["delta"], cfg["tv"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    echo = dict(n=n, epsilon=eps, delta=cfg["delta"], tv=cfg["tv"], nu=nu)
    rows = []
    if n is not None:
        rows.append(dict(rule="adaptive", magnitude=lambda_adaptive(n, eps), flag="", **echo))
    if nu is not None and n is not None:
        if eps == 0:
            info("data-driven rule is undefined at epsilon = 0; fall back to grid search, "
                 "e.g. magnitudes 0.001,0.01,0.1,1,10,100")
            rows.append(dict(rule="data_driven", magnitude=float("nan"), flag="fallback_grid", **echo))
        else:
            ch = lambda_data_driven_detail(lcfg, nu, n)
            rows.append(dict(rule="data_driven", magnitude=ch.magnitude, flag="clamped" if ch.clamped else "",
                             **echo))
    if nu is not None:
        ch = lambda_noisy_reward(lcfg, nu)
        rows.append(dict(rule="noisy", magnitude=ch.magnitude, objective=ch.objective,
                         flag="degenerate" if ch.degenerate else "", **echo))
    if not rows:
        raise ConfigError("lambda needs n, nu or data")
    cols = ["rule", "magnitude", "objective", "flag", "n", "epsilon", "delta", "tv", "nu"]
    return cols, rows, {}


COMMANDS = {"mean-estimate": cmd_mean_estimate, "ope": cmd_ope, "opl": cmd_opl, "lambda": cmd_lambda}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.command, args)
        columns, rows, meta = COMMANDS[args.command](cfg)
        emit(render(args.command, cfg, columns, rows, meta), cfg)
    except (TrainingDivergence, np.linalg.LinAlgError, ArithmeticError) as exc:
        info(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        info(f"error: {exc}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
