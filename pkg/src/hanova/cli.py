"""Command-line interface: ``hanova <command> [options]``.

Every command echoes its resolved configuration to standard error as a
single ``run-config: {...}`` JSON line; saving that JSON to a file and
running ``hanova --config FILE`` repeats the run.

Exit status is 0 on success (warnings go to standard error), 2 on invalid
input and 3 when a fit did not converge and ``--strict`` was given.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import ConvergenceError, HanovaError
from .evaluation import (SimSpec, UnitSimSpec, cross_validate, run_experiment, simulate,
                         simulate_units)
from .model_io import load_model, save_model
from .oracle import DENSE_THRESHOLD, build_basis, dense_posterior_mean
from .preprocess import (aggregate_cells, estimate_unit_variances, load_units, load_variances,
                         save_units, save_variances, unit_shrinkage)
from .solver import INF, ConvergenceOpts, fit_hanova
from .table import load_cells, save_cells
from .variance import empirical_lambdas

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3
SIDECAR_SUFFIX = ".variances"


class UsageError(HanovaError):
    pass


# --- argument helpers ----------------------------------------------------------

def parse_lambdas(text: str) -> list[float]:
    """Comma list of penalties; ``inf`` is the infinite-penalty sentinel."""
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        if tok in ("inf", "infinity"):
            out.append(INF)
            continue
        try:
            v = float(tok)
        except ValueError:
            raise UsageError(f"bad penalty {tok!r}") from None
        if not v >= 0 or math.isinf(v):
            raise UsageError(f"penalties must be non-negative numbers or 'inf', got {tok!r}")
        out.append(v)
    if not out:
        raise UsageError("empty penalty list")
    return out


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None


def _lam_json(values):
    return ["inf" if math.isinf(v) else v for v in values]


def _opts(args) -> ConvergenceOpts:
    return ConvergenceOpts(tol=args.tol, max_sweeps=args.max_sweeps)


def _threads(args) -> int:
    return max(1, args.threads or os.cpu_count() or 1)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _distinct_paths(inputs, outputs) -> None:
    ins = {os.path.abspath(p) for p in inputs if p}
    for p in outputs:
        if p and p != "-" and os.path.abspath(p) in ins:
            raise UsageError(f"output path {p} would overwrite an input")


def _open_out(path):
    if path in (None, "-"):
        return _Stdout()
    return open(path, "w", newline="", encoding="utf-8")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


def _resolve_sigma2(args, table_path) -> float:
    value = args.sigma2
    if value is None:
        sidecar = table_path + SIDECAR_SUFFIX
        if os.path.exists(sidecar):
            return 1.0
        raise UsageError("--sigma2 is required (use 'preprocessed' for tables written by "
                         "'hanova preprocess')")
    if str(value).lower() == "preprocessed":
        return 1.0
    try:
        v = float(value)
    except ValueError:
        raise UsageError(f"bad --sigma2 {value!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise UsageError("--sigma2 must be positive")
    return v


# --- commands ------------------------------------------------------------------

def cmd_fit(args) -> int:
    _distinct_paths([args.cells], [args.out, args.diagnostics, args.fitted])
    table = load_cells(args.cells)
    mode = args.lambda_mode or ("supplied" if args.lambdas else "empirical")
    maxk = args.maxk
    diag = {"mode": mode, "cells": len(table), "factors": list(table.spec.names)}
    if mode == "supplied":
        if not args.lambdas:
            raise UsageError("--lambda is required with --lambda-mode supplied")
        lambdas = parse_lambdas(args.lambdas)
        maxk = maxk or len(lambdas)
        if len(lambdas) != maxk:
            raise UsageError(f"--maxk {maxk} needs {maxk} penalties, got {len(lambdas)}")
        if args.lambda_cap is not None:
            lambdas = [min(v, args.lambda_cap) for v in lambdas]
    else:
        if args.lambdas:
            raise UsageError(f"--lambda cannot be combined with --lambda-mode {mode}")
        maxk = maxk or table.m
        sigma2 = _resolve_sigma2(args, args.cells)
        diag["sigma2"] = sigma2
        emp = empirical_lambdas(table, sigma2, cap=args.lambda_cap)
        diag["variance"] = _variance_report(emp)
        lambdas = emp.lambdas[:maxk]
        if mode == "cv":
            grid = [parse_lambdas(g) for g in args.grid] if args.grid else None
            cv = cross_validate(table, maxk, grid=grid, folds=args.folds, seed=args.seed,
                                base_lambdas=lambdas, opts=_opts(args), workers=_threads(args))
            diag["cv"] = {"base": _lam_json(cv.base), "selected": _lam_json(cv.selected),
                          "one_se": _lam_json(cv.one_se),
                          "grid": [_lam_json(g) for g in cv.grid],
                          "mean_loss": [x.tolist() for x in cv.losses]}
            lambdas = cv.selected
    fit = fit_hanova(table, lambdas, maxk=maxk, opts=_opts(args))
    diag["lambdas"] = _lam_json(fit.lambdas)
    diag["maxk"] = fit.maxk
    diag["grand_mean"] = fit.grand_mean
    diag["orders"] = [{"order": f.order, "lambda": _lam_json([f.lam])[0], "sweeps": f.sweeps,
                       "converged": f.converged, "objective_trace": f.objective_trace}
                      for f in fit.order_fits]
    fitted = fit.fitted()
    diag["fitted"] = [{"cell": list(lab), "y": float(y), "fitted": float(v)}
                      for lab, y, v in zip(table.labels(), table.y, fitted)]
    save_model(fit, args.out)
    if args.diagnostics:
        with _open_out(args.diagnostics) as fh:
            json.dump(diag, fh, indent=1)
            fh.write("\n")
    if args.fitted:
        save_cells(table, args.fitted, y=fitted)
    bad = [f.order for f in fit.order_fits if not f.converged]
    if bad:
        msg = f"order(s) {bad} stopped at the sweep limit without converging"
        if args.strict:
            print(f"error: {msg}", file=sys.stderr)
            return EXIT_NOT_CONVERGED
        _warn(msg)
    return EXIT_OK


def _variance_report(emp) -> dict:
    vc = emp.components
    return {
        "sigma2_effective": vc.sigma2,
        "weight_scale": emp.weight_scale,
        "dims": emp.info.dims,
        "sq_norms": emp.info.sq_norms,
        "components": [{"k": k, "estimate": float(vc.sigmas[k]), "raw": float(vc.raw[k]),
                        "clamped": bool(vc.clamped[k]), "degenerate": bool(vc.degenerate[k])}
                       for k in range(vc.m + 1)],
        "lambdas": _lam_json(emp.lambdas),
    }


def cmd_predict(args) -> int:
    _distinct_paths([args.model, args.query, args.units, args.variances], [args.out])
    try:
        fit = load_model(args.model)
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read model: {exc}") from None
    if args.units:
        return _predict_units(args, fit)
    if not args.query:
        raise UsageError("need a query CSV (or --units)")
    with open(args.query, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"{args.query}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [nm for nm in fit.spec.names if nm not in header]
    if missing:
        raise UsageError(f"query lacks factor columns {missing}")
    cols = [header.index(nm) for nm in fit.spec.names]
    with _open_out(args.out) as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(list(fit.spec.names) + ["prediction", "error"])
        for lineno, rec in enumerate(rows[1:], start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < len(header):
                w.writerow([""] * fit.spec.m + ["", f"line {lineno}: too few fields"])
                continue
            labels = [rec[c] for c in cols]
            try:
                codes = fit.spec.encode(labels)
            except KeyError as exc:
                w.writerow(labels + ["", f"unknown level label {exc}"])
                continue
            value = fit.predict(codes, order=args.order)
            w.writerow(labels + [repr(value), ""])
    return EXIT_OK


def _predict_units(args, fit) -> int:
    if not args.variances:
        raise UsageError("--units needs the --variances sidecar written by preprocess")
    units = load_units(args.units)
    uv = load_variances(args.variances)
    cells = np.empty(len(units))
    err = [""] * len(units)
    for i, row in enumerate(units.codes):
        labels = units.spec.decode(row)
        try:
            cells[i] = fit.predict_labels(labels, order=args.order)
        except HanovaError as exc:
            cells[i] = np.nan
            err[i] = str(exc)
    ok = np.isfinite(cells)
    shrunk = np.full(len(units), np.nan)
    if ok.any():
        shrunk_all = unit_shrinkage(units, uv, np.where(ok, cells, units.y))
        shrunk[ok] = shrunk_all[ok]
    with _open_out(args.out) as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["unit_id", "y", "n_reviews", "cell_estimate", "estimate", "error"])
        for i, uid in enumerate(units.unit_ids):
            w.writerow([uid, repr(float(units.y[i])), int(units.n_reviews[i]),
                        repr(float(cells[i])) if ok[i] else "",
                        repr(float(shrunk[i])) if ok[i] else "", err[i]])
    return EXIT_OK


def cmd_preprocess(args) -> int:
    sidecar = args.variances or args.out + SIDECAR_SUFFIX
    _distinct_paths([args.units, args.reviews], [args.out, sidecar])
    units = load_units(args.units, reviews_path=args.reviews)
    uv = estimate_unit_variances(units, sigma_r2=args.sigma_r2, sigma_u2=args.sigma_u2)
    for note in uv.notes:
        print(f"note: {note}", file=sys.stderr)
    table = aggregate_cells(units, uv)
    save_cells(table, args.out)
    save_variances(uv, sidecar)
    return EXIT_OK


def cmd_lambda(args) -> int:
    _distinct_paths([args.cells], [args.out])
    table = load_cells(args.cells)
    sigma2 = _resolve_sigma2(args, args.cells)
    emp = empirical_lambdas(table, sigma2, cap=args.lambda_cap)
    vc = emp.components
    with _open_out(args.out) as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["k", "dim", "sq_norm", "sigma2_k", "raw", "clamped", "degenerate", "lambda"])
        for k in range(vc.m + 1):
            lam = "" if k == 0 else _lam_json([emp.lambdas[k - 1]])[0]
            dim = emp.info.dims[k - 1] if k > 0 else 1
            q = emp.info.sq_norms[k - 1] if k > 0 else 0.0
            w.writerow([k, dim, repr(q), repr(float(vc.sigmas[k])), repr(float(vc.raw[k])),
                        int(vc.clamped[k]), int(vc.degenerate[k]),
                        lam if isinstance(lam, str) else repr(lam)])
    for k in range(vc.m + 1):
        if vc.clamped[k]:
            _warn(f"sigma_{k}^2 estimate {vc.raw[k]!r} was negative and clamped to 0")
        if vc.degenerate[k]:
            _warn(f"sigma_{k}^2 is not identifiable from this table and was set to 0")
    return EXIT_OK


def cmd_cv(args) -> int:
    _distinct_paths([args.cells], [args.out])
    table = load_cells(args.cells)
    maxk = args.maxk or max(1, table.m - 1)
    grid = [parse_lambdas(g) for g in args.grid] if args.grid else None
    base = parse_lambdas(args.base_lambdas) if args.base_lambdas else None
    sigma2 = None if base is not None else _resolve_sigma2(args, args.cells)
    cv = cross_validate(table, maxk, grid=grid, folds=args.folds, seed=args.seed,
                        base_lambdas=base, sigma2=sigma2, cap=args.lambda_cap,
                        opts=_opts(args), workers=_threads(args))
    with _open_out(args.out) as out:
        w = csv.writer(out, lineterminator="\n")
        K = cv.fold_losses[0].shape[1]
        w.writerow(["order", "lambda", "mean_loss", "se"] + [f"fold{f}" for f in range(K)]
                   + ["selected", "one_se"])
        for k in range(maxk):
            fl = cv.fold_losses[k]
            for j, lam in enumerate(cv.grid[k]):
                se = float(fl[j].std(ddof=1) / math.sqrt(K))
                w.writerow([k + 1, _lam_json([lam])[0], repr(float(cv.losses[k][j])), repr(se)]
                           + [repr(float(v)) for v in fl[j]]
                           + [int(lam == cv.selected[k]), int(lam == cv.one_se[k])])
    print("selected: " + ",".join(str(v) for v in _lam_json(cv.selected)), file=sys.stderr)
    return EXIT_OK


def _sim_spec(args) -> SimSpec:
    return SimSpec(tuple(parse_ints(args.levels)), tuple(parse_floats(args.sigmas)),
                   weights=args.weights, weight_ratio=args.weight_ratio,
                   observation_rate=args.observation_rate,
                   replicates=args.replicates, seed=args.seed, sampler=args.sampler)


def cmd_simulate(args) -> int:
    spec = _sim_spec(args)
    if args.units_out:
        _distinct_paths([], [args.units_out, args.reviews_out, args.truth])
        usim = UnitSimSpec(spec, sigma_u=args.sigma_u, sigma_r=args.sigma_r,
                           max_units=args.max_units, max_reviews=args.max_reviews)
        inst = simulate_units(usim, args.replicate)
        save_units(inst.units, args.units_out, reviews_path=args.reviews_out)
        if args.truth:
            with _open_out(args.truth) as out:
                w = csv.writer(out, lineterminator="\n")
                w.writerow(["unit_id", "true_mean", "cell_mean"])
                for uid, t, c in zip(inst.units.unit_ids, inst.true_unit_means, inst.true_cell_means):
                    w.writerow([uid, repr(float(t)), repr(float(c))])
        return EXIT_OK
    if not args.out:
        raise UsageError("need --out (or --units-out)")
    inst = simulate(spec, args.replicate)
    save_cells(inst.table, args.out)
    if args.truth:
        save_cells(inst.table, args.truth, y=inst.true_mu)
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = _sim_spec(args)
    methods = [m for m in args.methods.split(",") if m.strip()]
    res = run_experiment(spec, methods, cap=args.lambda_cap, opts=_opts(args),
                         workers=_threads(args))
    if args.out:
        res.write_csv(args.out)
    summary = {"summary": res.summary(), "bayes_reference": res.bayes_reference}
    with _open_out(args.summary) as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    return EXIT_OK


def cmd_oracle(args) -> int:
    _distinct_paths([args.cells], [args.out])
    table = load_cells(args.cells)
    sigma2 = _resolve_sigma2(args, args.cells)
    variances = parse_floats(args.components)
    if len(variances) != table.m + 1:
        raise UsageError(f"need {table.m + 1} variance components")
    basis = build_basis(table, max_cells=DENSE_THRESHOLD)
    post = dense_posterior_mean(table, basis, sigma2, variances)
    save_cells(table, args.out, y=post)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

COMMANDS = {
    "fit": cmd_fit, "predict": cmd_predict, "preprocess": cmd_preprocess,
    "lambda": cmd_lambda, "cv": cmd_cv, "simulate": cmd_simulate,
    "experiment": cmd_experiment, "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: available cores)")
    common.add_argument("--tol", type=float, default=1e-8, help="backfitting tolerance")
    common.add_argument("--max-sweeps", type=int, default=500, help="backfitting sweep limit")

    parser = argparse.ArgumentParser(
        prog="hanova", description="Hierarchical penalized ANOVA for sparse multi-way tables.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON run configuration to replay")
    sub = parser.add_subparsers(dest="command", metavar="{fit,predict,preprocess,lambda,cv,simulate,experiment}")

    p = sub.add_parser("fit", parents=[common], help="fit a model to a cell CSV")
    p.add_argument("cells", help="cell CSV (factor columns, y, n)")
    p.add_argument("-o", "--out", required=True, help="model file to write")
    p.add_argument("--diagnostics", help="JSON diagnostics report ('-' for stdout)")
    p.add_argument("--fitted", help="cell CSV of fitted values")
    p.add_argument("--maxk", type=int, help="highest interaction order (default m)")
    p.add_argument("--lambda-mode", choices=("empirical", "supplied", "cv"))
    p.add_argument("--lambda", dest="lambdas", help="comma list of penalties, 'inf' allowed")
    p.add_argument("--lambda-cap", type=float, help="truncate penalties at this value")
    p.add_argument("--sigma2", help="noise variance per unit weight, or 'preprocessed'")
    p.add_argument("--folds", type=int, default=5, help="CV folds (cv mode)")
    p.add_argument("--grid", action="append", help="CV candidates for one order (repeat per order)")
    p.add_argument("--strict", action="store_true", help="exit 3 if any order fails to converge")

    p = sub.add_parser("predict", parents=[common], help="predict cells from a model file")
    p.add_argument("model")
    p.add_argument("query", nargs="?", help="CSV with the factor columns")
    p.add_argument("-o", "--out", default="-")
    p.add_argument("--order", type=int, help="order of the surface to use (default maxk)")
    p.add_argument("--units", help="unit CSV: write shrunken per-unit estimates instead")
    p.add_argument("--variances", help="variances sidecar for --units")

    p = sub.add_parser("preprocess", parents=[common], help="aggregate unit data into cells")
    p.add_argument("units", help="unit CSV (factor columns, unit_id, y, n_reviews)")
    p.add_argument("--reviews", help="raw-review CSV (unit_id, rating)")
    p.add_argument("-o", "--out", required=True, help="cell CSV to write")
    p.add_argument("--variances", help=f"sidecar path (default OUT{SIDECAR_SUFFIX})")
    p.add_argument("--sigma-u2", type=float, help="supply the unit-effect variance")
    p.add_argument("--sigma-r2", type=float, help="supply the single-review variance")

    p = sub.add_parser("lambda", parents=[common], help="estimate variance components and penalties")
    p.add_argument("cells")
    p.add_argument("--sigma2", help="noise variance per unit weight, or 'preprocessed'")
    p.add_argument("--lambda-cap", type=float)
    p.add_argument("-o", "--out", default="-")

    p = sub.add_parser("cv", parents=[common], help="choose penalties by cross-validation")
    p.add_argument("cells")
    p.add_argument("--maxk", type=int, help="order scored on held-out cells (default m-1)")
    p.add_argument("--sigma2", help="noise variance (for the empirical base penalties)")
    p.add_argument("--base-lambdas", help="comma list of base penalties instead of empirical")
    p.add_argument("--grid", action="append", help="candidates for one order (repeat per order)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--lambda-cap", type=float)
    p.add_argument("-o", "--out", default="-")

    def sim_flags(q):
        q.add_argument("--levels", required=True, help="comma list of level counts")
        q.add_argument("--sigmas", required=True,
                       help="standard deviations sigma_0,sigma_1,...,sigma (noise last)")
        q.add_argument("--weights", choices=("equal", "ratio"), default="equal")
        q.add_argument("--weight-ratio", type=float, default=10.0)
        q.add_argument("--observation-rate", type=float, default=1.0)
        q.add_argument("--replicates", type=int, default=200)
        q.add_argument("--sampler", choices=("projection", "margin"), default="projection")

    p = sub.add_parser("simulate", parents=[common], help="draw a table from the random-effects model")
    sim_flags(p)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("-o", "--out", help="cell CSV")
    p.add_argument("--truth", help="true cell means (cell CSV) or unit truths")
    p.add_argument("--units-out", help="write unit data instead of a cell table")
    p.add_argument("--reviews-out", help="raw-review CSV (with --units-out)")
    p.add_argument("--sigma-u", type=float, default=1.0)
    p.add_argument("--sigma-r", type=float, default=2.0)
    p.add_argument("--max-units", type=int, default=5)
    p.add_argument("--max-reviews", type=int, default=20)

    p = sub.add_parser("experiment", parents=[common], help="score methods over simulated replicates")
    sim_flags(p)
    p.add_argument("--methods", default="ols:2,oracle:2,empirical:2",
                   help="comma list of ols:j, oracle:j, empirical:j, bayes")
    p.add_argument("--lambda-cap", type=float, default=5.0)
    p.add_argument("-o", "--out", help="per-replicate results CSV")
    p.add_argument("--summary", default="-", help="JSON summary ('-' for stdout)")

    p = sub.add_parser("oracle", parents=[common])  # dense posterior mean, for checking
    p.add_argument("cells")
    p.add_argument("--sigma2", required=True)
    p.add_argument("--components", required=True, help="variances sigma_0^2..sigma_m^2")
    p.add_argument("-o", "--out", required=True)
    return parser


def _config_from(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "config"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if cfg.get("command") not in COMMANDS:
            print("error: config lacks a valid 'command'", file=sys.stderr)
            return EXIT_INVALID
        args = argparse.Namespace(**cfg, config=None)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    print("run-config: " + json.dumps(_config_from(args), sort_keys=True), file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (HanovaError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
