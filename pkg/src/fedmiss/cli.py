"""Command-line entry point: ``fedmiss simulate | fit | transcript``.

Exit codes: 0 success, 1 usage error (bad flags, unreadable config),
2 runtime error (estimation or protocol failure, failed audit).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .datamodel import (
    EstimatorChoice, MissingnessTarget, ModelSpec, WeightingFormula, as_target, load_site_csv,
)
from .exceptions import FedMissError
from .fedproto import SELECTION_RULES, SuppressionPolicy, Transcript, privacy_audit, replay, run_protocol
from .simharness import SimConfig, emit_results, run_simulation
from .weights import CALIBRATION_VARIANTS

Z_975 = 1.959963984540054


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedmiss", description="Federated complete-case and IPW regression with missing data.")
    sub = p.add_subparsers(dest="command", metavar="{simulate,fit,transcript}", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a JSON config")
    s.add_argument("--config", required=True, help="simulation config (JSON)")
    s.add_argument("--out", required=True, help="results CSV path")
    s.add_argument("--reps", type=int, help="override the number of replications")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--workers", type=int, default=1, help="worker processes (capped by FEDMISS_THREADS)")

    f = sub.add_parser("fit", help="fit a federated model from per-site CSV files")
    f.add_argument("--sites", required=True, help="comma-separated site CSV paths (header y,x,z1..zp)")
    f.add_argument("--model", choices=("linear", "logistic"), default="linear", help="outcome family")
    f.add_argument("--estimator", choices=("cc", "ipw_site", "ipw_calibrated"), default="cc",
                   help="complete-case, site-specific weights or calibrated weights")
    f.add_argument("--transport", choices=("si", "counts"),
                   help="sufficient information (linear) or count aggregation (logistic); "
                        "defaults to the one the model supports")
    f.add_argument("--covariates", help="comma-separated outcome covariates (default: x and every z)")
    f.add_argument("--target", choices=("X", "Y", "YX"), default="X", help="which fields may be missing")
    f.add_argument("--weighting", choices=("main_effects", "pairwise_interactions"), default="main_effects",
                   help="completeness model feature map")
    f.add_argument("--weighting-vars", help="comma-separated completeness model variables "
                                            "(default: the always-observed fields)")
    f.add_argument("--candidates", default="largest_site",
                   help=f"candidate sites for calibration: {' or '.join(SELECTION_RULES)} or a comma-separated "
                        "list of site ids")
    f.add_argument("--calibration", choices=CALIBRATION_VARIANTS, default="projection",
                   help="how calibrated weights combine the candidate models")
    f.add_argument("--T", type=int, default=11, dest="T", help="cell suppression threshold for count rows")
    f.add_argument("--out", help="JSON report path (the report is always printed)")
    f.add_argument("--transcript", help="transcript path (default: next to --out, else ./transcript.ndjson)")

    t = sub.add_parser("transcript", help="inspect a recorded transcript")
    t.add_argument("action", choices=("show", "replay", "audit"))
    t.add_argument("path", help="transcript file (NDJSON)")
    t.add_argument("--T", type=int, dest="T", help="suppression threshold for audit (default: the run's)")
    return p


# ------------------------------------------------------------------- commands


def _simulate(args) -> int:
    try:
        config = SimConfig.from_json_file(args.config)
        if args.reps is not None or args.seed is not None:
            d = config.to_dict()
            if args.reps is not None:
                d["reps"] = args.reps
            if args.seed is not None:
                d["seed"] = args.seed
            config = SimConfig.from_dict(d)
        config.workers = args.workers
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    emit_results(run_simulation(config), args.out)
    print(f"wrote {args.out}")
    return 0


def _fit_inputs(args):
    paths = _csv_list(args.sites)
    if not paths:
        raise UsageError("--sites needs at least one path")
    for path in paths:
        if not os.path.isfile(path):
            raise UsageError(f"no such site file: {path}")
    if args.T < 1:
        raise UsageError("--T must be at least 1")
    transport = args.transport or ("si" if args.model == "linear" else "counts")
    try:
        estimator = EstimatorChoice(args.estimator, transport)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return paths, estimator, as_target(args.target)


def _site_ids(paths: list[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"site{k}" for k in range(len(paths))]


def _fit(args) -> int:
    paths, estimator, target = _fit_inputs(args)
    sites = [load_site_csv(p, target, sid) for p, sid in zip(paths, _site_ids(paths))]
    zs = [f"z{j + 1}" for j in range(sites[0].z_dim)]
    try:
        covariates = tuple(_csv_list(args.covariates)) if args.covariates else tuple(["x"] + zs)
        model = ModelSpec(args.model, covariates)
        estimator.check_model(model)
        weighting = None
        if estimator.is_ipw:
            always = [v for v in ("y", "x") if v not in target.missable] + zs
            variables = tuple(_csv_list(args.weighting_vars)) if args.weighting_vars else tuple(always)
            weighting = WeightingFormula(args.weighting, variables)
            weighting.check_target(target)
        rule = args.candidates if args.candidates in SELECTION_RULES else _csv_list(args.candidates)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fit, var, transcript = run_protocol(sites, model, estimator, weighting, candidates_from=rule,
                                        policy=SuppressionPolicy(args.T), calibration=args.calibration)
    tpath = args.transcript or (str(Path(args.out).with_suffix(".transcript.ndjson")) if args.out
                                else "transcript.ndjson")
    transcript.write(tpath)
    report = fit_report(fit, var, transcript, model)
    report["transcript"] = tpath
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def fit_report(fit, var, transcript: Transcript, model: ModelSpec) -> dict:
    """Estimates, standard errors and Wald intervals as plain JSON values."""
    names = fit.names or model.coefficient_names()
    theta = np.asarray(fit.theta, dtype=float)
    se = np.asarray(var.se_theta, dtype=float)
    lo, hi = theta - Z_975 * se, theta + Z_975 * se
    report = {
        "estimator": fit.estimator.estimator,
        "transport": fit.estimator.transport,
        "coefficients": list(names),
        "theta": theta.tolist(),
        "se": se.tolist(),
        "ci95": np.column_stack([lo, hi]).tolist(),
        "rounds_used": fit.rounds_used,
        "suppression": transcript.suppression_report,
    }
    if fit.sigma is not None:
        report["sigma"] = float(fit.sigma)
    if model.family == "logistic":
        p = model.design_dim
        report["odds_ratios"] = {
            n: {"estimate": float(np.exp(theta[j])), "ci95": [float(np.exp(lo[j])), float(np.exp(hi[j]))]}
            for j, n in enumerate(names[:p]) if j > 0
        }
    return report


def _transcript(args) -> int:
    try:
        tr = Transcript.read(args.path)
    except OSError as exc:
        raise UsageError(f"cannot read {args.path}: {exc}") from None
    if args.action == "show":
        h = tr.header
        print(f"estimator {h['estimator']} / {h['transport']}, regime {h['regime']}, "
              f"{len(h['sites'])} sites, {tr.total_rounds} rounds")
        for m in tr.messages:
            print(f"round {m.round_index}  {m.direction:<11}  {m.sender:<12}  {m.kind:<20}  {len(m.raw)} bytes")
        return 0
    if args.action == "replay":
        fit, var = replay(tr)
        print(json.dumps({"theta": np.asarray(fit.theta, dtype=float).tolist(),
                          "se": np.asarray(var.se_theta, dtype=float).tolist()}, indent=2))
        return 0
    if args.T is not None and args.T < 1:
        raise UsageError("--T must be at least 1")
    audit = privacy_audit(tr, None if args.T is None else SuppressionPolicy(args.T))
    print(json.dumps(audit, indent=2))
    return 0 if audit["passed"] else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"simulate": _simulate, "fit": _fit, "transcript": _transcript}[args.command]
        return handler(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (FedMissError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
