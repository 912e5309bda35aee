"""Command-line front end: fit, infer, simulate.

Reports are JSON (fits, inference) or CSV (simulation metrics) and embed
the resolved configuration so a run can be reproduced from its own output.
Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import __version__
from .correlation import WorkingCorrelation
from .data import ColumnSchema, Dataset, ModelIndexSet, load_dataset
from .dscore import infer_all
from .errors import PegError
from .estimator import (
    PenalizedFit,
    ScadPenalty,
    assemble_fit,
    penalized_g_fit,
    sandwich_ci,
    tune_lambda,
)
from .propensity import PropensityModel, fit_propensity
from .simlab import METHODS, SimConfig, run_replications
from .uposi import uposi_infer

CORSTR_ALIASES = {
    "ind": "independent", "independent": "independent",
    "exch": "exchangeable", "exchangeable": "exchangeable",
    "ar1": "ar1",
    "un": "unstructured", "unstructured": "unstructured",
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(args) -> Dataset:
    schema = ColumnSchema.from_json(args.schema) if args.schema else None
    return load_dataset(args.data, schema)


def _interval_rows(intervals, ses=None):
    rows = []
    for i, iv in enumerate(intervals):
        row = {"k": iv.index, "estimate": iv.estimate,
               "lower": iv.lower, "upper": iv.upper}
        if ses is not None:
            row["se"] = ses[i]
        rows.append(row)
    return rows


# ---- fit -----------------------------------------------------------------------


def _cmd_fit(args) -> int:
    corstr = CORSTR_ALIASES[args.corstr]
    d = _load_data(args)
    if args.propensity_cols:
        # the intercept column participates regardless
        cols = ModelIndexSet(
            (0,) + tuple(int(c) for c in args.propensity_cols.split(",")))
    else:
        cols = ModelIndexSet.full(d.k)
    pm = fit_propensity(d, cols)

    tuning = None
    if args.lam == "auto":
        tuned = tune_lambda(d, pm, corstr, a=args.a)
        fit = tuned.best
        tuning = {
            "lambda_star": tuned.lambda_star,
            "grid": tuned.grid,
            "dric": tuned.dric,
        }
        lam = tuned.lambda_star
    else:
        lam = float(args.lam)
        fit = penalized_g_fit(d, pm, corstr, ScadPenalty(lam, args.a))

    ses = [math.sqrt(max(fit.sandwich_cov[d.k + i, d.k + i], 0.0))
           for i in range(len(fit.selected))]
    intervals = sandwich_ci(fit, args.alpha) if fit.converged else []
    payload = {
        "version": __version__,
        "command": "fit",
        "config": {
            "data": args.data, "schema": args.schema, "corstr": args.corstr,
            "lambda": args.lam, "a": args.a, "alpha": args.alpha,
            "seed": args.seed, "propensity_cols": args.propensity_cols,
            "out": args.out,
        },
        "n": d.n, "k": d.k, "n_obs": d.n_obs,
        "propensity": {"beta": pm.beta, "columns": list(pm.columns)},
        "fit": {
            "delta": fit.delta, "psi": fit.psi, "sigma2": fit.sigma2,
            "corr": fit.corr.to_dict(), "lambda": lam, "a": fit.penalty.a,
            "selected": list(fit.selected), "converged": fit.converged,
            "iterations": fit.iterations,
        },
        "tuning": tuning,
        "naive_intervals": _interval_rows(intervals, ses if intervals else None),
    }
    _write_json(args.out, payload)
    return 0


# ---- infer ---------------------------------------------------------------------


def _fit_from_report(report: dict, d: Dataset, pm: PropensityModel) -> PenalizedFit:
    blk = report["fit"]
    corr = WorkingCorrelation.from_dict(blk["corr"])
    penalty = ScadPenalty(float(blk["lambda"]), float(blk["a"]))
    return assemble_fit(
        d, pm,
        delta=np.asarray(blk["delta"], dtype=float),
        psi=np.asarray(blk["psi"], dtype=float),
        sigma2=float(blk["sigma2"]),
        corr=corr,
        penalty=penalty,
        converged=bool(blk["converged"]),
        iterations=int(blk["iterations"]),
    )


def _cmd_infer(args) -> int:
    with open(args.fit) as fh:
        report = json.load(fh)
    d = _load_data(args)
    prop = report["propensity"]
    pm = PropensityModel.from_beta(d, ModelIndexSet(tuple(prop["columns"])),
                                   prop["beta"])
    fit = _fit_from_report(report, d, pm)

    payload = {
        "version": __version__,
        "command": "infer",
        "method": args.method,
        "config": {
            "fit": args.fit, "data": args.data, "schema": args.schema,
            "method": args.method, "alpha": args.alpha, "boot": args.boot,
            "seed": args.seed, "cv_folds": args.cv_folds, "out": args.out,
        },
        "selected": list(fit.selected),
        "alpha": args.alpha,
    }
    if args.method == "naive":
        intervals = sandwich_ci(fit, args.alpha)
        payload["intervals"] = _interval_rows(intervals)
    elif args.method == "uposi":
        rep = uposi_infer(d, fit, pm, r_n=args.boot, alpha=args.alpha,
                          seed=args.seed)
        payload["intervals"] = _interval_rows(rep.intervals)
        payload["uposi"] = {
            "c_g": rep.c_g, "c_w": rep.c_w, "theta_l1": rep.theta_l1,
            "half_lengths": rep.half_lengths, "omega": rep.omega,
            "r_n": rep.r_n, "seed": rep.seed,
        }
    else:
        method = args.method[3:]
        rep = infer_all(d, fit, pm, method=method, alpha=args.alpha,
                        folds=args.cv_folds, seed=args.seed)
        payload["intervals"] = _interval_rows(rep.intervals)
        payload["onestep"] = [
            {
                "k": r.k, "psi_tilde": r.psi_tilde,
                "partial_info": r.partial_info, "sigma_s": r.sigma_s,
                "score_stat": r.score_stat,
                "lambda_w": rep.lambda_w.get(r.k),
            }
            for r in rep.results
        ]
    _write_json(args.out, payload)
    return 0


# ---- simulate ------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    import pandas as pd

    with open(args.config) as fh:
        raw = json.load(fh)
    methods = tuple(args.methods.split(",")) if args.methods else tuple(
        raw.get("methods", ["naive", "uposi", "os-lasso", "os-dantzig"]))
    cfg = SimConfig(
        n=int(raw["n"]),
        k=int(raw["k"]),
        j=int(raw.get("j", 6)),
        tau=float(raw.get("tau", 0.3)),
        sigma2_eps=float(raw.get("sigma2_eps", 1.0)),
        rho=float(raw.get("rho", 0.8)),
        corstr=CORSTR_ALIASES[raw.get("corstr", "exchangeable")],
        reps=args.reps,
        seed=args.seed,
        methods=methods,
        alpha=float(raw.get("alpha", 0.05)),
        boot=int(raw.get("boot", 1000)),
        cv_folds=int(raw.get("cv_folds", 5)),
        workers=args.workers,
    )
    result = run_replications(cfg)

    base = {
        "n": cfg.n, "k": cfg.k, "j": cfg.j, "corstr": cfg.corstr,
        "reps": cfg.reps, "reps_used": result.reps_used,
        "failures": result.failures, "seed": cfg.seed, "alpha": cfg.alpha,
        "boot": cfg.boot, "cv_folds": cfg.cv_folds,
        "methods": ",".join(cfg.methods),
    }
    rows = []
    for name in cfg.methods:
        met = result.method_metrics[name]
        rows.append({
            "method": name,
            **base,
            "avg_ci_length": met["avg_ci_length"],
            "fcr": met["fcr"],
            "power": met["power"],
            **result.selection,
        })
    pd.DataFrame(rows).to_csv(args.out, index=False)

    if args.plot_data:
        detail = []
        for rec in result.records:
            if rec["error"] is not None:
                continue
            for name in cfg.methods:
                met = rec["methods"][name]
                detail.append({
                    "rep": rec["rep"], "method": name,
                    "avg_ci_length": met["avg_ci_length"],
                    "fcr": met["fcr"], "power": met["power"],
                    "n_selected": len(rec["selected"]),
                    "exact": rec["exact"],
                })
        pd.DataFrame(detail).to_csv(args.plot_data, index=False)
    return 0


# ---- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peg",
        description="Penalized G-estimation with valid post-selection inference",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="penalized G-estimation on a CSV dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--schema", default=None, help="JSON column-role mapping")
    p_fit.add_argument("--corstr", choices=sorted(CORSTR_ALIASES), default="exch")
    p_fit.add_argument("--lambda", dest="lam", default="auto",
                       help="'auto' for DRIC tuning, or a numeric value")
    p_fit.add_argument("--a", type=float, default=3.7, help="SCAD shape")
    p_fit.add_argument("--alpha", type=float, default=0.05)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--propensity-cols", default=None,
                       help="comma-separated adjuster indices (default: all)")
    p_fit.add_argument("--out", required=True)

    p_inf = sub.add_parser("infer", help="post-selection inference from a fit report")
    p_inf.add_argument("--method", required=True)
    p_inf.add_argument("--fit", required=True)
    p_inf.add_argument("--data", required=True)
    p_inf.add_argument("--schema", default=None)
    p_inf.add_argument("--boot", type=int, default=1000)
    p_inf.add_argument("--alpha", type=float, default=0.05)
    p_inf.add_argument("--seed", type=int, default=None)
    p_inf.add_argument("--cv-folds", type=int, default=5)
    p_inf.add_argument("--out", required=True)

    p_sim = sub.add_parser("simulate", help="replicated method comparison")
    p_sim.add_argument("--config", required=True, help="JSON scenario file")
    p_sim.add_argument("--reps", type=int, default=50)
    p_sim.add_argument("--methods", default=None,
                       help="comma-separated subset of: " + ", ".join(METHODS))
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--plot-data", default=None,
                       help="optional per-replication CSV for plotting")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "infer":
        if args.method not in METHODS:
            parser.error(
                f"unknown method {args.method!r}; choose from: " + ", ".join(METHODS)
            )
        if args.method == "uposi" and args.seed is None:
            parser.error("--seed is required for --method uposi")
    if args.command == "simulate":
        if args.seed is None:
            parser.error("--seed is required for simulate")
        if args.methods:
            bad = [m for m in args.methods.split(",") if m not in METHODS]
            if bad:
                parser.error(
                    f"unknown method(s) {bad}; choose from: " + ", ".join(METHODS)
                )
    try:
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "infer":
            return _cmd_infer(args)
        return _cmd_simulate(args)
    except (PegError, np.linalg.LinAlgError) as exc:
        print(f"peg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
