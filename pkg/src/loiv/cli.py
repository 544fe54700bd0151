"""Command-line front end.

Subcommands: estimate, test, cs, diagnose (all reading the documented CSV
schema) and simulate (reading a key=value design file or the --table1
preset). Reports go to stdout or --out as JSON, CSV, or text. Exit codes:
0 ok, 2 input schema violation, 3 rank-deficient design, 4 infeasible
simulation design, 5 leave-out feasibility failure without --conservative.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .design import Dataset, build_weights
from .errors import (
    InvalidDesign,
    LoivError,
    NearSingularTriple,
    RankDeficient,
    SchemaError,
    TripleSingular,
)
from .inference import first_stage_diagnostics, invert_grid_cs, invert_lm_cs, run_test
from .l3o_variance import l3o_feasible
from .results import ConfidenceSet
from .simulate import (
    DISPLAY_NAMES,
    make_design,
    normalize_procedures,
    run_monte_carlo,
    table1_designs,
)
from .statistics import jive_estimate, k_statistics, tsls_estimate

_FORMATS = ("json", "csv", "text")

_CONFIG_INT_KEYS = {"K", "c", "n_reps", "seed"}
_CONFIG_STR_KEYS = {"family"}
_CONFIG_FLOAT_KEYS = {"e_tfs", "e_tar", "beta", "beta0", "alpha"}


def _fmt(x) -> str:
    """17 significant digits; NaN spelled out for table readability."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    return f"{x:.17g}"


def _emit(text: str, out_path) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {key: _jsonable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(value) for value in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(value) for value in obj.tolist()]
    return obj


def _json_text(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, allow_nan=True) + "\n"


def read_config(path) -> dict:
    """Flat key=value file; blank lines and # comments ignored."""
    config = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in _CONFIG_STR_KEYS:
                config[key] = value
                continue
            try:
                if key in _CONFIG_INT_KEYS:
                    config[key] = int(value)
                else:
                    config[key] = float(value)
            except ValueError:
                raise SchemaError(
                    f"{path}:{lineno}: cannot parse value '{value}' for key '{key}'"
                ) from None
    return config


def _leverage_summary(weights) -> dict:
    lev = weights.hat.leverages
    return {
        "max": float(np.max(lev)),
        "mean": float(np.mean(lev)),
        "count_above_half": int(np.sum(lev > 0.5)),
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_estimate(args) -> str:
    dataset = Dataset.from_csv(args.input)
    weights = build_weights(dataset, args.weights)
    est = jive_estimate(weights, dataset.y, dataset.x)
    tsls = tsls_estimate(dataset)
    stats = k_statistics(weights, dataset.y, dataset.x, 0.0)
    report = {
        "command": "estimate",
        "weights": weights.kind,
        "n": dataset.n,
        "k": dataset.k,
        "l": dataset.l,
        "beta_hat": est.beta,
        "tsls": {"beta": tsls.beta, "se": tsls.se},
        "t_fs": stats.t_fs,
        "leverage": _leverage_summary(weights),
        "first_stage": first_stage_diagnostics(weights, dataset.y, dataset.x),
    }
    if dataset.dropped_z_labels:
        report["dropped_z_labels"] = list(dataset.dropped_z_labels)
    return _json_text(report)


_CLI_TEST_PROCS = ("l3o", "mo", "ms", "cms", "ek", "xt_t", "xt_ar", "tsls")

_RUN_TEST_IDS = {
    "l3o": "lm_l3o", "mo": "lm_mo", "ms": "ar_ms", "cms": "ar_cms",
    "ek": "ek", "xt_t": "xt_t", "xt_ar": "xt_ar",
}


def _cmd_test(args) -> str:
    dataset = Dataset.from_csv(args.input)
    weights = build_weights(dataset, args.weights)
    procs = normalize_procedures(args.procedures)
    unsupported = [p for p in procs if p not in _CLI_TEST_PROCS]
    if unsupported:
        raise LoivError(
            f"procedures {unsupported} need a simulation design (oracle variances) "
            "and are not available on observed data"
        )
    reports = {}
    for proc in procs:
        if proc == "tsls":
            est = tsls_estimate(dataset)
            t = (est.beta - args.beta0) / est.se
            from ._normal import norm_quantile, two_sided_p

            z = norm_quantile(1.0 - args.alpha / 2.0)
            reports[proc] = {
                "procedure": "tsls",
                "beta0": args.beta0,
                "statistic": t,
                "beta_hat": est.beta,
                "se": est.se,
                "critical_value": z,
                "alpha": args.alpha,
                "status": "ok",
                "reject": bool(abs(t) >= z),
                "p_value": two_sided_p(t),
            }
            continue
        rep = run_test(
            weights, dataset.y, dataset.x, args.beta0, _RUN_TEST_IDS[proc],
            alpha=args.alpha, conservative=args.conservative,
        )
        reports[proc] = {
            "procedure": rep.procedure,
            "beta0": rep.beta0,
            "statistic": rep.statistic,
            "variance": rep.variance,
            "critical_value": rep.critical_value,
            "alpha": rep.alpha,
            "status": rep.status,
            "reject": rep.reject,
            "p_value": rep.p_value,
        }
    return _json_text({"command": "test", "weights": weights.kind, "tests": reports})


def _cs_entry(cs: ConfidenceSet) -> dict:
    return {
        "shape": cs.shape,
        "lower": cs.lower,
        "upper": cs.upper,
        "estimate": cs.estimate,
        "length": cs.length if cs.shape != "two_rays" else math.inf,
        "leading_coeff": cs.leading_coeff,
        "discriminant": cs.discriminant,
    }


def _cs_text_row(name: str, cs: ConfidenceSet) -> str:
    if cs.shape == "empty":
        return f"{name:8s} {'∅':>12s} {'∅':>12s} {'':>12s} {0.0:12.4f}"
    lo = "-inf" if cs.lower is None or cs.lower == -math.inf else f"{cs.lower:.4f}"
    hi = "inf" if cs.upper is None or cs.upper == math.inf else f"{cs.upper:.4f}"
    if cs.shape == "whole_line":
        lo, hi = "-inf", "inf"
    est = "" if cs.estimate is None else f"{cs.estimate:.4f}"
    length = "inf" if not math.isfinite(cs.length) else f"{cs.length:.4f}"
    tag = "" if cs.shape == "interval" else f"  [{cs.shape}]"
    return f"{name:8s} {lo:>12s} {hi:>12s} {est:>12s} {length:>12s}{tag}"


def _cmd_cs(args) -> str:
    dataset = Dataset.from_csv(args.input)
    weights = build_weights(dataset, args.weights)
    procs = normalize_procedures(args.procedures) if args.procedures else ("l3o",)
    sets = {}
    for proc in procs:
        if proc == "l3o":
            sets[proc] = invert_lm_cs(weights, dataset.y, dataset.x, alpha=args.alpha,
                                      conservative=args.conservative)
        elif proc in ("ms", "cms"):
            sets[proc] = invert_grid_cs(
                weights, dataset.y, dataset.x, alpha=args.alpha,
                procedure={"ms": "ar_ms", "cms": "ar_cms"}[proc],
                n_points=args.grid, conservative=args.conservative,
            )
        else:
            raise LoivError(f"confidence sets are implemented for l3o, ms, cms; got '{proc}'")
    if args.format == "text":
        lines = [f"{'':8s} {'LB':>12s} {'UB':>12s} {'Estimate':>12s} {'CIlength':>12s}"]
        for proc, cs in sets.items():
            lines.append(_cs_text_row(DISPLAY_NAMES[proc], cs))
        return "\n".join(lines) + "\n"
    report = {
        "command": "cs",
        "weights": weights.kind,
        "alpha": args.alpha,
        "sets": {proc: _cs_entry(cs) for proc, cs in sets.items()},
        "first_stage": first_stage_diagnostics(weights, dataset.y, dataset.x),
    }
    return _json_text(report)


def _cmd_diagnose(args) -> str:
    dataset = Dataset.from_csv(args.input)
    weights = build_weights(dataset, args.weights)
    feas = l3o_feasible(weights, dataset.y, dataset.x)
    report = {
        "command": "diagnose",
        "weights": weights.kind,
        "n": dataset.n,
        "k": dataset.k,
        "l": dataset.l,
        "leverage": _leverage_summary(weights),
        "first_stage": first_stage_diagnostics(weights, dataset.y, dataset.x),
        "l3o_feasible": feas.feasible,
        "n_singular_triples": feas.n_singular_triples,
        "note": feas.note,
    }
    if dataset.dropped_z_labels:
        report["dropped_z_labels"] = list(dataset.dropped_z_labels)
    return _json_text(report)


def _design_from_config(config: dict, args) -> tuple:
    known = set(_CONFIG_INT_KEYS) | set(_CONFIG_STR_KEYS) | set(_CONFIG_FLOAT_KEYS)
    error_params = {}
    for key, value in config.items():
        if key in known:
            continue
        error_params[key] = value  # family-specific; make_design validates names
    for required in ("family", "K", "c"):
        if required not in config:
            raise SchemaError(f"design file is missing required key '{required}'")
    design = make_design(
        family=config["family"],
        k=config["K"],
        c=config["c"],
        e_tfs=config.get("e_tfs", 0.0),
        e_tar=config.get("e_tar", 0.0),
        beta=config.get("beta", 0.0),
        error_params=error_params or None,
        seed=args.seed if args.seed is not None else config.get("seed", 0),
    )
    beta0 = args.beta0 if args.beta0 is not None else config.get("beta0")
    n_reps = args.reps if args.reps is not None else int(config.get("n_reps", 1000))
    return design, beta0, n_reps


def _simulate_rows(results, procs) -> list:
    rows = []
    for res in results:
        p = res.design_params
        for proc in procs:
            cell = res.cells[proc]
            rows.append({
                "family": p["family"], "K": p["K"], "c": p["c"], "beta": p["beta"],
                "e_tfs": p["e_tfs"], "e_tar": p["e_tar"], "beta0": res.beta0,
                "procedure": DISPLAY_NAMES[proc],
                "rejection_rate": cell.rejection_rate,
                "valid_count": cell.n_valid,
                "undefined_count": cell.n_undefined,
            })
    return rows


def _simulate_csv(results, procs) -> str:
    header = ("family,K,c,beta,e_tfs,e_tar,beta0,procedure,"
              "rejection_rate,valid_count,undefined_count")
    lines = [header]
    for row in _simulate_rows(results, procs):
        lines.append(",".join([
            row["family"], str(row["K"]), str(row["c"]), _fmt(row["beta"]),
            _fmt(row["e_tfs"]), _fmt(row["e_tar"]), _fmt(row["beta0"]),
            row["procedure"], _fmt(row["rejection_rate"]),
            str(row["valid_count"]), str(row["undefined_count"]),
        ]))
    return "\n".join(lines) + "\n"


def _simulate_text(results, procs) -> str:
    label_width = max(12, max(len(res.design_label) for res in results) + 2)
    header = "design".ljust(label_width) + "".join(
        f"{DISPLAY_NAMES[p]:>9s}" for p in procs
    )
    lines = [header]
    for res in results:
        cells = []
        for proc in procs:
            rate = res.cells[proc].rejection_rate
            cells.append(f"{'NaN':>9s}" if math.isnan(rate) else f"{rate:>9.3f}")
        lines.append(res.design_label.ljust(label_width) + "".join(cells))
    return "\n".join(lines) + "\n"


def _cmd_simulate(args) -> str:
    procs = normalize_procedures(args.procedures) if args.procedures else ("l3o",)
    if args.table1:
        if args.input:
            raise SchemaError("--table1 does not take a design file")
        designs = table1_designs(seed=args.seed if args.seed is not None else 1)
        beta0 = args.beta0
        n_reps = args.reps if args.reps is not None else 1000
        runs = [(design, beta0, n_reps) for design in designs]
    else:
        if not args.input:
            raise SchemaError("simulate needs a design file or --table1")
        design, beta0, n_reps = _design_from_config(read_config(args.input), args)
        runs = [(design, beta0, n_reps)]
    results = []
    for design, beta0, n_reps in runs:
        results.append(run_monte_carlo(
            design, procedures=procs, n_reps=n_reps, alpha=args.alpha, beta0=beta0,
            n_jobs=args.threads, conservative=args.conservative,
        ))
    fmt = args.format or "csv"
    if fmt == "csv":
        return _simulate_csv(results, procs)
    if fmt == "text":
        return _simulate_text(results, procs)
    report = {
        "command": "simulate",
        "alpha": args.alpha,
        "results": [
            {
                "design": res.design_params,
                "label": res.design_label,
                "beta0": res.beta0,
                "mean_t_fs": res.extras["mean_t_fs"],
                "mean_t_ar_at_beta": res.extras["mean_t_ar_at_beta"],
                "cells": {
                    DISPLAY_NAMES[proc]: {
                        "rejection_rate": res.cells[proc].rejection_rate,
                        "n_reject": res.cells[proc].n_reject,
                        "valid_count": res.cells[proc].n_valid,
                        "undefined_count": res.cells[proc].n_undefined,
                    }
                    for proc in procs
                },
            }
            for res in results
        ],
    }
    return _json_text(report)


# ---------------------------------------------------------------------------
# parser and dispatch


def _add_common_data_flags(sub) -> None:
    sub.add_argument("input", help="input CSV (see README for the schema)")
    sub.add_argument("--weights", choices=("jive", "ujive", "sive"), default="jive")
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--conservative", action="store_true",
                     help="drop near-singular leave-out sets instead of failing")
    sub.add_argument("--out", default=None)
    sub.add_argument("--format", choices=_FORMATS, default="json")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loiv",
        description="Leave-out inference for IV regression with many weak instruments.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_est = subs.add_parser("estimate", help="point estimates and first-stage diagnostics")
    _add_common_data_flags(p_est)

    p_test = subs.add_parser("test", help="hypothesis tests at a fixed coefficient")
    _add_common_data_flags(p_test)
    p_test.add_argument("--beta0", type=float, default=0.0)
    p_test.add_argument("--procedures", default="l3o",
                        help="comma-separated list, e.g. l3o,mo,tsls")

    p_cs = subs.add_parser("cs", help="confidence sets by test inversion")
    _add_common_data_flags(p_cs)
    p_cs.add_argument("--procedures", default="l3o")
    p_cs.add_argument("--grid", type=int, default=401,
                      help="grid points for rival-test inversion")

    p_diag = subs.add_parser("diagnose", help="leverage, strength, and feasibility checks")
    _add_common_data_flags(p_diag)

    p_sim = subs.add_parser("simulate", help="Monte Carlo rejection rates for a design")
    p_sim.add_argument("input", nargs="?", default=None,
                       help="key=value design file (omit with --table1)")
    p_sim.add_argument("--table1", action="store_true",
                       help="run the nine-design headline size table")
    p_sim.add_argument("--procedures", default="l3o")
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--beta0", type=float, default=None)
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.add_argument("--conservative", action="store_true")
    p_sim.add_argument("--out", default=None)
    p_sim.add_argument("--format", choices=_FORMATS, default="csv")
    return parser


_HANDLERS = {
    "estimate": _cmd_estimate,
    "test": _cmd_test,
    "cs": _cmd_cs,
    "diagnose": _cmd_diagnose,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        text = _HANDLERS[args.command](args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RankDeficient as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InvalidDesign as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (NearSingularTriple, TripleSingular) as exc:
        print(f"error: {exc}\nhint: rerun with --conservative to drop the "
              "offending leave-out sets", file=sys.stderr)
        return 5
    except LoivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(text, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
