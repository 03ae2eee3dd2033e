"""Command-line front end: ``stagger fit | test | simulate``.

Exit codes: 0 success, 2 data or configuration error, 3 numerical failure,
4 first adoption not before the last observed period.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .cox import fit_cox, fit_summary
from .errors import DataError, StaggerError
from .panel import PanelSchema, detrend_covariates, first_adopter, load_panel
from .randtest import WEIGHT_MODES, WeightVector, adopter_weights, decide_randomized, run_test, uniform_weights
from .simlab import McDesign, results_csv, run_monte_carlo
from .stats import STATISTICS, make_statistic

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_BOUNDARY = 4

DEFAULTS = {
    "statistic": "did",
    "weight_mode": "feasible",
    "alpha": 0.05,
    "seed": 0,
    "synth.tol": 1e-10,
    "synth.max_iter": 10_000,
    "cox.tol": 1e-8,
    "cox.max_iter": 100,
    "cox.ridge": 0.0,
    "pl_denominator_at_own_time": False,
    "detrend_covariates": False,
}


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _resolve(args, keys) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    cfg = {k: DEFAULTS[k] for k in keys if k in DEFAULTS}
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        for k, v in loaded.items():
            if k not in DEFAULTS and k not in ("beta", "gamma", "rho", "time_invariant"):
                raise DataError(f"unknown config key {k!r}")
            cfg[k] = v
    flag_map = {
        "statistic": "statistic", "weight_mode": "weight_mode", "alpha": "alpha", "seed": "seed",
        "synth_tol": "synth.tol", "synth_max_iter": "synth.max_iter", "tol": "cox.tol",
        "max_iter": "cox.max_iter", "ridge": "cox.ridge", "beta": "beta", "gamma": "gamma", "rho": "rho",
        "pl_denominator_at_own_time": "pl_denominator_at_own_time",
        "detrend_covariates": "detrend_covariates", "time_invariant": "time_invariant",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None and v is not False:
            cfg[key] = v
    for attr in ("panel", "adoption", "weights_file", "out", "candidates_out"):
        if getattr(args, attr, None) is not None:
            cfg[attr] = str(getattr(args, attr))
    alpha = cfg.get("alpha")
    if alpha is not None and not 0 < float(alpha) < 1:
        raise DataError("alpha must lie in (0, 1)")
    return cfg


def _load(cfg):
    inv = cfg.get("time_invariant") or ()
    if isinstance(inv, str):
        inv = tuple(s for s in inv.split(",") if s)
    panel, adoption = load_panel(cfg["panel"], PanelSchema(time_invariant=tuple(inv)), cfg.get("adoption"))
    if cfg.get("detrend_covariates"):
        panel = detrend_covariates(panel)
    return panel, adoption


def _fit(panel, adoption, cfg):
    return fit_cox(
        panel, adoption,
        tol=float(cfg["cox.tol"]), max_iter=int(cfg["cox.max_iter"]), ridge=float(cfg["cox.ridge"]),
        own_time=bool(cfg["pl_denominator_at_own_time"]),
    )


def cmd_fit(args) -> int:
    cfg = _resolve(args, ["cox.tol", "cox.max_iter", "cox.ridge", "pl_denominator_at_own_time", "detrend_covariates"])
    panel, adoption = _load(cfg)
    try:
        fit = _fit(panel, adoption, cfg)
    except StaggerError as exc:
        record = fit_summary(exc)
        record.update(covariates=list(panel.covariate_names), config=cfg)
        if cfg.get("out"):
            _write_json(cfg["out"], record)
        raise
    record = fit_summary(fit)
    record.update(covariates=list(panel.covariate_names), config=cfg)
    _write_json(cfg.get("out"), record)
    return EXIT_OK


def read_weights_file(path, labels) -> WeightVector:
    df = pd.read_csv(path, dtype={"unit": str}, float_precision="round_trip")
    if set(df.columns) != {"unit", "weight"}:
        raise DataError("weights file needs columns unit,weight")
    if df["unit"].duplicated().any():
        raise DataError("duplicate unit in weights file")
    by_unit = dict(zip(df["unit"], df["weight"].astype(float)))
    missing = [u for u in labels if u not in by_unit]
    if missing or len(by_unit) != len(labels):
        raise DataError("weights file units do not match the panel")
    w = np.array([by_unit[u] for u in labels])
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-6:
        raise DataError(f"weights must be non-negative and sum to 1 (got {w.sum()!r})")
    return WeightVector.normalized(w)


def cmd_test(args) -> int:
    cfg = _resolve(args, list(DEFAULTS))
    mode = cfg["weight_mode"]
    if mode not in WEIGHT_MODES:
        raise DataError(f"unknown weight mode {mode!r}")
    if cfg["statistic"] not in STATISTICS:
        raise DataError(f"unknown statistic {cfg['statistic']!r}")
    panel, adoption = _load(cfg)
    _, t1 = first_adopter(adoption)

    fit_record = None
    if cfg.get("weights_file"):
        weights = read_weights_file(cfg["weights_file"], panel.unit_labels)
        mode = "custom"
    elif mode == "uniform":
        weights = uniform_weights(panel.n)
    elif mode == "feasible":
        fit = _fit(panel, adoption, cfg)
        fit_record = fit_summary(fit)
        weights = adopter_weights(panel, t1, fit.beta_hat)
    elif mode == "infeasible":
        if cfg.get("beta") is None:
            raise DataError("infeasible weights need the true coefficients via --beta")
        beta = _floats(cfg["beta"])
        if len(beta) != panel.d:
            raise DataError(f"--beta has {len(beta)} entries, panel has {panel.d} covariates")
        weights = adopter_weights(panel, t1, beta)
    else:
        raise DataError("custom weight mode needs --weights-file")

    kind = cfg["statistic"]
    params = {}
    if kind == "synth":
        params = {"tol": float(cfg["synth.tol"]), "max_iter": int(cfg["synth.max_iter"])}
    elif kind == "robust_oracle":
        if cfg.get("gamma") is None or cfg.get("rho") is None:
            raise DataError("robust_oracle needs --gamma and --rho")
        params = {"gamma": float(cfg["gamma"]), "rho": float(cfg["rho"])}
    statistic = make_statistic(kind, **params)

    report = run_test(panel, adoption, statistic, weights, float(cfg["alpha"]), mode)
    u = float(np.random.default_rng(int(cfg["seed"])).random())
    report.config = cfg
    record = report.to_dict()
    record["randomized_reject"] = decide_randomized(report, u)
    record["fit"] = fit_record
    _write_json(cfg.get("out"), record)
    if cfg.get("candidates_out"):
        pd.DataFrame(report.candidate_rows(), columns=["unit", "s_value", "weight"]).to_csv(
            cfg["candidates_out"], index=False
        )
    return EXIT_OK


def _floats(v):
    if isinstance(v, str):
        return [float(s) for s in v.split(",") if s.strip()]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(s) for s in v]


def cmd_simulate(args) -> int:
    if not args.design:
        raise DataError("simulate needs --design")
    raw = json.loads(Path(args.design).read_text())
    cells = raw if isinstance(raw, list) else [raw]
    results = []
    manifest = []
    for cell in cells:
        try:
            design = McDesign.from_dict(cell)
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad design: {exc}") from None
        res = run_monte_carlo(design, replications=args.reps, base_seed=args.seed)
        results.append(res)
        manifest.append(
            {
                "design": {k: (list(v) if isinstance(v, tuple) else v) for k, v in res.design.__dict__.items()},
                "t_max": res.design.periods,
                "horizon": res.horizon,
                "time_scale": res.time_scale,
                "rejection_rate": res.rejection_rate,
                "nonrandomized_rate": res.nonrandomized_rate,
                "mc_std_err": res.mc_std_err,
                "evaluated": res.evaluated,
                "excluded_reps": res.excluded_reps,
                "redraws": res.redraws,
            }
        )
    text = results_csv(results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.manifest:
        _write_json(args.manifest, {"version": __version__, "cells": manifest})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagger", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--panel", required=True, help="long-format CSV: unit,time,outcome,x1..xd")
        sp.add_argument("--adoption", help="CSV unit,adoption_time,censored (else read from the panel)")
        sp.add_argument("--time-invariant", dest="time_invariant", help="comma-separated covariates constant over time")
        sp.add_argument("--detrend-covariates", action="store_true", help="remove a common linear trend per covariate")
        sp.add_argument("--pl-denominator-at-own-time", action="store_true",
                        help="evaluate risk-set covariates at each unit's own adoption time (no censoring allowed)")
        sp.add_argument("--tol", type=float, help="Cox gradient tolerance (default 1e-8)")
        sp.add_argument("--max-iter", type=int, help="Cox Newton iterations (default 100)")
        sp.add_argument("--ridge", type=float, help="ridge penalty on |beta|^2 (default 0)")
        sp.add_argument("--config", help="JSON file of configuration keys")
        sp.add_argument("--out", help="output JSON path (stdout if omitted)")

    f = sub.add_parser("fit", help="fit the Cox model for adoption times")
    data_flags(f)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("test", help="run the randomization test")
    data_flags(t)
    t.add_argument("--statistic", choices=sorted(STATISTICS))
    t.add_argument("--weight-mode", dest="weight_mode", choices=WEIGHT_MODES)
    t.add_argument("--weights-file", help="CSV unit,weight for custom weights")
    t.add_argument("--beta", help="true coefficients for infeasible weights, comma-separated")
    t.add_argument("--gamma", type=float, help="covariate slope for robust_oracle")
    t.add_argument("--rho", type=float, help="AR coefficient for robust_oracle")
    t.add_argument("--synth-tol", dest="synth_tol", type=float)
    t.add_argument("--synth-max-iter", dest="synth_max_iter", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int, help="seed for the randomized-test uniform draw")
    t.add_argument("--candidates-out", help="CSV of per-candidate statistics and weights")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="Monte Carlo rejection rates for a design")
    s.add_argument("--design", required=True, help="JSON design (object or list of cells)")
    s.add_argument("--reps", type=int, help="override replications")
    s.add_argument("--seed", type=int, help="override base_seed")
    s.add_argument("--out", help="output CSV (stdout if omitted)")
    s.add_argument("--manifest", help="JSON manifest with resolved designs and horizons")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StaggerError as exc:
        print(f"stagger: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"stagger: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
