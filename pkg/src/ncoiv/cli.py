"""Command-line front end: ``ncoiv estimate | simulate | sweep | replay``.

Exit codes: 0 success, 1 usage or input error, 2 numerical/estimation failure.
Every run writes a JSON manifest (``--manifest``, default ``ncoiv-manifest.json``)
holding the command line, resolved configuration, seed, timings and warnings.
``ncoiv replay MANIFEST`` re-executes the recorded command.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import ColumnSchema, EstimateResult, TuningParams, load_dataset
from .errors import EstimationError, NcoivError, SchemaError
from .iv_core import check_regularity, cross_moments, gmm_estimate
from .selection import estimate_with_selection, residual_auxiliary, resolve_tuning
from .simulation import (
    KAPPA1_REFUSAL,
    SCENARIOS,
    SWEEP_PARAMS,
    ScenarioConfig,
    canonical_method,
    default_jobs,
    histogram_rows,
    markdown_table,
    simulate_estimates,
    summarize,
    tuning_sweep,
    write_summary_csv,
)

DEFAULT_SEED = 20200904
SEED_ENV = "NCOIV_SEED"
MODES = ("proposed", "proposed-alasso", "gmm", "residual-aux")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    command: list[str]
    replay_argv: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    exit_code: int | None = None
    python: str = platform.python_version()
    numpy: str = np.__version__

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _float_list(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _add_tuning(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tuning (defaults: small-sample constants for n < 500, large-sample from 500)")
    g.add_argument("--kappa1", type=float, help="ridge constant for screened-out rows (default 10)")
    g.add_argument("--kappa2n", type=float, help="right-hand-side constant (default 0.01, or 0.001 if n >= 500)")
    g.add_argument("--tau", type=float, help="smooth-weight bandwidth (default 0.01, or 0.001 if n >= 500)")
    g.add_argument("--w", type=float, help="validity threshold on |cov(Z_k, M)| (default 0.1)")
    g.add_argument("--lambda", dest="lambda_n", type=float, help="adaptive-LASSO penalty (default 0.1)")
    g.add_argument("--delta", type=float, help="adaptive-weight exponent (default 1)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help=f"base seed (default ${SEED_ENV} or {DEFAULT_SEED})")
    p.add_argument("--manifest", default="ncoiv-manifest.json", help="run manifest path")


def _add_sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="strong-strong",
                   help=f"one of {', '.join(SCENARIOS)} (IV strength, then NCO strength)")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--csv", help="write full-precision summary rows here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ncoiv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"ncoiv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate the treatment effect on a CSV file")
    e.add_argument("data", help="CSV file with a header row")
    e.add_argument("--y-col", required=True)
    e.add_argument("--t-col", required=True)
    e.add_argument("--z-cols", required=True, help="comma-separated instrument candidates")
    e.add_argument("--x-cols", default="", help="comma-separated covariates")
    e.add_argument("--m-col", help="negative control outcome column")
    e.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--mode", choices=MODES, default="proposed")
    e.add_argument("--valid-iv", help="instrument column known to be valid (auxiliary residual route)")
    e.add_argument("--gmm-ridge", type=float, default=0.0)
    e.add_argument("--out", help="write a JSON report here")
    _add_tuning(e)
    _add_common(e)

    s = sub.add_parser("simulate", help="Monte Carlo replications of the simulation design")
    _add_sim(s)
    s.add_argument("--methods", default="proposed,gmm",
                   help="comma-separated: proposed, proposed+alasso, gmm, naive, oracle, residual-aux")
    s.add_argument("--hist", help="write 50-bin histogram counts per method here")
    _add_tuning(s)
    _add_common(s)

    w = sub.add_parser("sweep", help="vary one tuning constant, others fixed")
    _add_sim(w)
    w.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    w.add_argument("--values", required=True, type=_float_list)
    w.add_argument("--method", default="proposed+alasso")
    _add_tuning(w)
    _add_common(w)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest_path")
    return parser


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _tuning(args, n: int) -> TuningParams:
    try:
        return TuningParams.for_sample_size(
            n, kappa1=args.kappa1, kappa2n=args.kappa2n, tau_n=args.tau,
            w_threshold=args.w, lambda_n=args.lambda_n, delta=args.delta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _print_estimate(res: EstimateResult, out) -> None:
    print(f"method: {res.method}   n = {res.n}", file=out)
    print(f"beta_t = {_fmt(res.beta_t)}  (SE {_fmt(res.se_t)})", file=out)
    for name, b, se in zip(("t", *res.x_names), res.beta, res.std_errors):
        print(f"  beta[{name}] = {_fmt(b)}  (SE {_fmt(se)})", file=out)
    if res.gamma.size:
        label = "gamma*" if res.extra.get("penalized") else "gamma"
        print(f"{label}: " + ", ".join(f"{nm}={g:.4g}" for nm, g in zip(res.z_names, res.gamma)), file=out)
    print("selected IVs: " + (", ".join(res.z_names[k] for k in res.selected) or "(none)"), file=out)
    d = res.diagnostics
    if d is not None:
        print(f"C.1 min eigenvalue {d.min_eig_schur:.4g} [{'pass' if d.c1_ok else 'FAIL'}]; "
              f"C.2 norm {d.c2_norm:.4g} [{'pass' if d.c2_ok else 'FAIL'}]", file=out)
        for msg in d.messages:
            print(f"  warning: {msg}", file=out)


def cmd_estimate(args, man: RunManifest) -> int:
    if args.mode == "residual-aux" and not args.valid_iv:
        raise UsageError("--mode residual-aux requires --valid-iv NAME (an instrument known to be valid)")
    if args.mode in ("proposed", "proposed-alasso") and not args.m_col and not args.valid_iv:
        raise UsageError(
            f"--mode {args.mode} needs a negative control outcome: pass --m-col NAME, "
            "or pass --valid-iv NAME to use residuals from a known-valid instrument instead")
    schema = ColumnSchema.from_flags(args.y_col, args.t_col, args.z_cols, args.x_cols,
                                     args.m_col, args.intercept)
    with man.stage("load"):
        data = load_dataset(args.data, schema)
    tuning = resolve_tuning(_tuning(args, data.n), data.n)
    if args.mode == "proposed":
        tuning_used = TuningParams(**{**tuning.to_dict(), "lambda_n": 0.0})
    else:
        tuning_used = tuning
    man.config.update(mode=args.mode, n=data.n, p=data.p, K=data.K, schema=schema.__dict__,
                      tuning=tuning_used.to_dict(), gmm_ridge=args.gmm_ridge)

    with man.stage("estimate"):
        if args.mode == "gmm":
            g = gmm_estimate(data, ridge=args.gmm_ridge)
            res = EstimateResult(
                beta=g.beta, gamma=np.zeros(0), selected=tuple(range(data.K)), covariance=g.cov,
                std_errors=g.std_errors, sigma2_hat=g.sigma2,
                diagnostics=check_regularity(cross_moments(data)), n=data.n, method="gmm",
                z_names=data.z_names, x_names=data.x_names)
        else:
            m = data.m
            if args.mode == "residual-aux" or (m is None and args.valid_iv):
                if args.valid_iv not in data.z_names:
                    raise UsageError(f"--valid-iv {args.valid_iv!r} is not among --z-cols")
                with man.stage("residual_auxiliary"):
                    m = residual_auxiliary(data, data.z_names.index(args.valid_iv))
            res = estimate_with_selection(data, m, tuning_used, penalize=args.mode != "proposed",
                                          method=args.mode)
    _print_estimate(res, sys.stdout)
    if args.out:
        report = res.to_dict()
        report["config"] = man.config
        Path(args.out).write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")
        man.outputs["report"] = str(args.out)
    return 0


def _scenario(args, seed: int) -> ScenarioConfig:
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; valid names: {', '.join(SCENARIOS)}")
    try:
        return ScenarioConfig.from_name(args.scenario, n=args.n, reps=args.reps, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_rows(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        write_summary_csv(rows, fh)


def cmd_simulate(args, man: RunManifest) -> int:
    cfg = _scenario(args, man.seed)
    try:
        methods = [canonical_method(m.strip()) for m in args.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tuning = _tuning(args, cfg.n)
    jobs = args.jobs or default_jobs()
    man.config.update(scenario=cfg.__dict__, methods=methods, tuning=tuning.to_dict(), jobs=jobs)
    with man.stage("simulate"):
        out = simulate_estimates(cfg, methods, tuning, jobs)
    rows = [] if cfg.reps == 0 else [summarize(m, out.estimates[:, j], cfg.beta_t_true)
                                     for j, m in enumerate(out.methods)]
    for msg, count in sorted(out.warnings.items()):
        man.warnings.append(f"{msg} (x{count})")
    for r in rows:
        if r.n_failed:
            man.warnings.append(f"{r.method}: {r.n_failed} of {cfg.reps} replications failed"
                                + (" (over 5%, flagged)" if r.flagged else ""))
    print(f"scenario {args.scenario}, n={cfg.n}, reps={cfg.reps}, seed={cfg.seed}")
    print(markdown_table(rows))
    if args.csv:
        _write_rows(args.csv, rows)
        man.outputs["csv"] = args.csv
    if args.hist:
        with open(args.hist, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "bin_left", "bin_right", "count"],
                               lineterminator="\n")
            w.writeheader()
            for row in histogram_rows(out):
                w.writerow({**row, "bin_left": repr(row["bin_left"]), "bin_right": repr(row["bin_right"])})
        man.outputs["hist"] = args.hist
    return 0


def cmd_sweep(args, man: RunManifest) -> int:
    if args.param == "kappa1":
        raise UsageError(KAPPA1_REFUSAL)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown --param {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    cfg = _scenario(args, man.seed)
    try:
        method = canonical_method(args.method)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = _tuning(args, cfg.n)
    jobs = args.jobs or default_jobs()
    man.config.update(scenario=cfg.__dict__, method=method, param=args.param, values=args.values,
                      base_tuning=base.to_dict(), jobs=jobs)
    if cfg.reps == 0:
        rows = []
    else:
        with man.stage("sweep"):
            rows = tuning_sweep(cfg, args.param, args.values, base, method, jobs)
    for r in rows:
        if r.n_failed:
            man.warnings.append(f"{args.param}={r.grid_value:g}: {r.n_failed} of {cfg.reps} "
                                "replications failed" + (" (over 5%, flagged)" if r.flagged else ""))
    print(f"sweep {args.param} over {args.values}, scenario {args.scenario}, n={cfg.n}, reps={cfg.reps}")
    print(markdown_table(rows))
    if args.csv:
        _write_rows(args.csv, rows)
        man.outputs["csv"] = args.csv
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "sweep": cmd_sweep}


def _replay(path: str) -> int:
    try:
        man = json.loads(Path(path).read_text())
        argv = man["replay_argv"]
    except (OSError, ValueError, KeyError) as exc:
        print(f"ncoiv: cannot read manifest {path}: {exc}", file=sys.stderr)
        return 1
    return main(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ncoiv: error: {exc}", file=sys.stderr)
        return 1
    if args.command == "replay":
        return _replay(args.manifest_path)

    man = RunManifest(command=["ncoiv", *argv])
    code = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            man.seed = _resolve_seed(args)
            man.replay_argv = [a for a in argv] + ([] if args.seed is not None else ["--seed", str(man.seed)])
            code = COMMANDS[args.command](args, man)
        except UsageError as exc:
            print(f"ncoiv: error: {exc}", file=sys.stderr)
            code = 1
        except SchemaError as exc:
            print(f"ncoiv: input error: {exc}", file=sys.stderr)
            code = 1
        except (EstimationError, np.linalg.LinAlgError) as exc:
            print(f"ncoiv: estimation failed: {exc}", file=sys.stderr)
            code = 2
        except NcoivError as exc:
            print(f"ncoiv: error: {exc}", file=sys.stderr)
            code = 2
    for w in caught:
        msg = f"{w.category.__name__}: {w.message}"
        man.warnings.append(msg)
        print(f"ncoiv: warning: {msg}", file=sys.stderr)
    man.exit_code = code
    if args.manifest:
        man.write(args.manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
