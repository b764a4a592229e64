"""Command-line interface.

Exit codes
----------
0  success
2  invalid input, configuration or usage
3  EM did not converge (outputs are still written, with ``converged: false``)
4  solver failure
5  simulation bounds cannot be calibrated
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import compare_models, fit_summary, select_covariates
from .em import EMConfig, fit_em
from .exceptions import (CalibrationError, DataValidationError, GhostMassOverflowError,
                         SolverError)
from .io import dump_json, read_cohort_csv, write_cohort_csv, write_rows_csv
from .model import Status
from .simulate import (DEFAULT_ALPHA, DEFAULT_BETA, SimConfig, gen_trial, resolve_bounds,
                       run_study, write_study_csv, write_study_json)
from .survfit import kaplan_meier, write_curve_csv

logger = logging.getLogger("curefit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_SOLVER = 4
EXIT_CALIBRATION = 5
SCHEMA_VERSION = 1
SEED_ENV = "CUREFIT_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers
def _resolve_seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _digest(path) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Output directory handling plus the run manifest written next to the data."""

    def __init__(self, args, argv, input_path=None, seeds=None):
        self.args = args
        self.out = args.out
        self.to_stdout = self.out == "-"
        self.manifest = {
            "schema_version": SCHEMA_VERSION,
            "command": args.command,
            "argv": list(argv),
            "config": {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func",) and _plain(v)},
            "input_digest": _digest(input_path),
            "seeds": seeds or {},
            "version": __version__,
            "started": _now(),
        }
        self.files = []
        if not self.to_stdout:
            Path(self.out).mkdir(parents=True, exist_ok=True)

    @contextmanager
    def open(self, name, primary=False):
        if self.to_stdout:
            if primary:
                yield sys.stdout
            else:
                yield open(os.devnull, "w")
            return
        path = Path(self.out) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh
        self.files.append(name)

    def finish(self, **extra):
        if self.to_stdout:
            return
        self.manifest.update(extra)
        self.manifest["outputs"] = list(self.files)
        self.manifest["finished"] = _now()
        with open(Path(self.out) / "manifest.json", "w") as fh:
            dump_json(self.manifest, fh)


def _plain(v):
    return v is None or isinstance(v, (str, int, float, bool, list, tuple))


def _load_config(args):
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    cure = args.cure if args.cure is not None else cfg.get("cure")
    latency = args.latency if args.latency is not None else cfg.get("latency")
    tau = args.tau if args.tau is not None else cfg.get("tau")
    return cure, latency, tau


def _cols(value):
    if value is None:
        return None
    if isinstance(value, str):
        return [c for c in value.split(",") if c]
    return list(value)


def _em_config(args):
    return EMConfig(param_tol=args.param_tol, loglik_tol=args.loglik_tol,
                    max_iter=args.max_iter)


def _design(args, table):
    cure, latency, tau = _load_config(args)
    cure = _cols(cure)
    latency = _cols(latency)
    if cure is None and latency is None:
        cure = latency = table.columns
    cure = cure or []
    latency = latency or []
    return table.to_dataset(cure, latency, tau)


# --------------------------------------------------------------- commands
def cmd_fit(args, argv):
    table = read_cohort_csv(args.input)
    data = _design(args, table)
    fit = fit_em(data, _em_config(args))
    run = _Run(args, argv, args.input, {"seed": _resolve_seed(args.seed)})
    summary = {"schema_version": SCHEMA_VERSION}
    summary.update(fit_summary(fit, data))
    with run.open("fit.json", primary=True) as fh:
        dump_json(summary, fh)
    p = fit.params
    with run.open("baseline.csv") as fh:
        write_rows_csv(fh, ("time", "hazard_jump", "cumulative_hazard"),
                       zip(p.event_times, p.lam, p.cumhaz))
    run.finish(converged=fit.converged)
    if not fit.converged:
        logger.error("EM did not converge in %d iterations", fit.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _parse_truth(text):
    if text is None:
        return DEFAULT_ALPHA, DEFAULT_BETA
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError("--truth expects five comma-separated numbers") from None
    if len(vals) != 5:
        raise UsageError("--truth expects a0,a1,a2,b1,b2")
    return tuple(vals[:3]), tuple(vals[3:])


def cmd_simulate(args, argv):
    seed = _resolve_seed(args.seed)
    alpha, beta = _parse_truth(args.truth)
    if args.table1:
        scenarios = [(n, t, c) for n in (200, 1000) for t in (0.1, 0.2) for c in (0.0, 0.2)]
    else:
        scenarios = [(args.n, args.trunc, args.cens)]
    try:
        cfgs = [SimConfig(n=n, alpha_true=alpha, beta_true=beta, trunc_target=t,
                          cens_target=c, trunc_bound=args.trunc_bound,
                          cens_bound=args.cens_bound, master_seed=seed,
                          n_trials=args.trials)
                for n, t, c in scenarios]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfgs = [resolve_bounds(c) for c in cfgs]
    run = _Run(args, argv, None, {"master_seed": seed})
    summaries = []
    for cfg in cfgs:
        logger.info("scenario %s: a=%.6g b=%.6g", cfg.label, cfg.trunc_bound, cfg.cens_bound)
        if args.emit_data:
            for j in range(1, cfg.n_trials + 1):
                path = Path(args.emit_data) / cfg.label / f"trial_{j:04d}.csv"
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "w", newline="") as fh:
                    write_cohort_csv(fh, gen_trial(cfg, j))
        summaries.append(run_study(cfg, n_jobs=args.jobs, em_cfg=_em_config(args)))
    with run.open("study.csv", primary=True) as fh:
        write_study_csv(fh, summaries)
    with run.open("study.json") as fh:
        write_study_json(fh, summaries)
    run.finish(bounds={c.label: {"a": c.trunc_bound, "b": c.cens_bound} for c in cfgs})
    return EXIT_OK


def _level_name(v):
    return str(int(v)) if float(v).is_integer() else format(v, ".17g")


def cmd_km(args, argv):
    table = read_cohort_csv(args.input)
    if args.exclude_cured:
        table = table.subset(table.status != Status.CURED)
    if table.n == 0:
        raise DataValidationError("no rows left after excluding cured subjects")
    run = _Run(args, argv, args.input)
    event = table.status == Status.EVENT
    if args.by is None:
        groups = [("km.csv", np.ones(table.n, dtype=bool))]
    else:
        if args.by not in table.covariates:
            raise DataValidationError(f"unknown grouping column {args.by!r}")
        col = table.covariates[args.by]
        levels = np.unique(col)
        if levels.size > 20:
            raise DataValidationError(f"grouping column {args.by!r} is not discrete")
        groups = [(f"km_{args.by}_{_level_name(v)}.csv", col == v) for v in levels]
    for name, mask in groups:
        if not event[mask].any():
            raise DataValidationError(f"group {name} has no events")
        curve = kaplan_meier(table.entry[mask], table.time[mask], event[mask])
        with run.open(name, primary=len(groups) == 1) as fh:
            write_curve_csv(fh, curve)
    run.finish()
    return EXIT_OK


def cmd_compare(args, argv):
    table = read_cohort_csv(args.input)
    data = _design(args, table)
    result = compare_models(data, _em_config(args))
    run = _Run(args, argv, args.input)
    with run.open("compare.json", primary=True) as fh:
        dump_json({"schema_version": SCHEMA_VERSION, **result}, fh)
    rows = []
    for model, block in result.items():
        for part in ("logistic", "cox"):
            for r in block.get(part, []):
                rows.append([model, part, r["term"], r["estimate"], r["se"], r["p_value"]])
    with run.open("compare.csv") as fh:
        write_rows_csv(fh, ("model", "part", "term", "estimate", "se", "p_value"), rows)
    run.finish()
    converged = result["cure_model"]["converged"]
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_select(args, argv):
    table = read_cohort_csv(args.input)
    _, _, tau = _load_config(args)
    candidates = _cols(args.candidates) or table.columns
    try:
        res = select_covariates(table, candidates, tau=tau, screen_p=args.screen_p,
                                keep_p=args.keep_p, force=_cols(args.force) or [],
                                em_cfg=_em_config(args))
    except ValueError as exc:
        if isinstance(exc, DataValidationError):
            raise
        raise UsageError(str(exc)) from None
    for w in res.warnings:
        logger.warning(w)
    run = _Run(args, argv, args.input)
    with run.open("select.json", primary=True) as fh:
        dump_json({"schema_version": SCHEMA_VERSION, "selected": res.selected,
                   "trace": res.trace, "warnings": res.warnings,
                   "final_fit": fit_summary(res.fit, res.data)}, fh)
    run.finish()
    return EXIT_OK if res.fit.converged else EXIT_NOT_CONVERGED


# ----------------------------------------------------------------- parser
def _add_common(p, needs_input=True, design=True):
    if needs_input:
        p.add_argument("input", help="cohort CSV (id, entry, time, status, covariates...)")
    p.add_argument("--out", default=".", help="output directory, or - for stdout")
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--param-tol", type=float, default=1e-6)
    p.add_argument("--loglik-tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=500)
    if design:
        p.add_argument("--config", help='JSON file {"cure": [...], "latency": [...], "tau": t}')
        p.add_argument("--cure", help="comma-separated covariates for the cure part")
        p.add_argument("--latency", help="comma-separated covariates for the latency part")
        p.add_argument("--tau", type=float, default=None,
                       help="cure horizon (default: the cured subjects' time)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curefit",
        description="Mixture cure-rate models for left-truncated data with observed cures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the cure model")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    _add_common(p, needs_input=False, design=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--trunc", type=float, default=0.1, help="target truncation fraction")
    p.add_argument("--cens", type=float, default=0.0, help="target censoring fraction")
    p.add_argument("--trunc-bound", type=float, default=None, help="explicit bound a")
    p.add_argument("--cens-bound", type=float, default=None, help="explicit bound b")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--truth", default=None, help="a0,a1,a2,b1,b2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table1", action="store_true",
                   help="all four truncation/censoring scenarios at n=200 and n=1000")
    p.add_argument("--emit-data", default=None, metavar="DIR",
                   help="also write every simulated dataset as CSV under DIR")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("km", help="left-truncated Kaplan-Meier curves")
    _add_common(p, design=False)
    p.add_argument("--by", default=None, help="discrete grouping column")
    p.add_argument("--exclude-cured", action="store_true")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("compare", help="cure model next to naive logistic and Cox fits")
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("select", help="Wald screening and backward selection")
    _add_common(p)
    p.add_argument("--candidates", default=None, help="comma-separated candidate covariates")
    p.add_argument("--force", default=None, help="comma-separated covariates never dropped")
    p.add_argument("--screen-p", type=float, default=0.2)
    p.add_argument("--keep-p", type=float, default=0.1)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (DataValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (SolverError, GhostMassOverflowError) as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
