"""Command line entry point: ``weakcv <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 oracle budget exceeded.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import bench
from .estimator import estimate_smc, estimate_with_cv, rmse_against_reference
from .models import MODEL_NAMES, QuadratureError, get_model
from .oracle import DEFAULT_MAX_LEAVES, BudgetExceededError, zero_variance_check
from .regression import RegressionConfig, RegressionTable, basis_from_name, quadratic_plus_f_basis, train
from .rng import derive_seed
from .schemes import Grid, normalize_scheme, simulate_paths, write_paths_csv
from .terms import enumerate_terms

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4

log = logging.getLogger("weakcv")


class ConfigError(ValueError):
    pass


def _common(p):
    p.add_argument("--model", default="example5d", choices=MODEL_NAMES)
    p.add_argument("--scheme", default="order2", choices=["euler", "order2"])
    p.add_argument("--json-config", metavar="PATH", help="JSON object whose keys override flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--threads", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="weakcv", description="Control variates for weak SDE schemes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate paths and dump them as CSV")
    _common(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--n-paths", type=int, default=10)

    p = sub.add_parser("train", help="fit regression coefficients and save the table as JSON")
    _common(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--n-train", type=int, default=16384)
    p.add_argument("--terms", choices=["truncated", "full"], default="truncated")
    p.add_argument("--keep-v", action="store_true", help="keep V terms even when they vanish identically")
    p.add_argument("--truncation", default=None, help="'auto' or a positive clamp level")
    p.add_argument("--ridge", type=float, default=0.0)

    p = sub.add_parser("estimate", help="plain or control variate estimate, JSON report")
    _common(p)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--n-test", type=int, default=100000)
    p.add_argument("--table", metavar="PATH", help="coefficient table from 'train'; omit for plain Monte Carlo")

    p = sub.add_parser("oracle-check", help="pathwise zero-variance check with the exact oracle table")
    _common(p)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--max-leaves", type=int, default=DEFAULT_MAX_LEAVES)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("benchmark", help="RMSE versus time sweep, CSV rows")
    _common(p)
    p.add_argument("--methods", default="smc,trcv", help="comma list of smc, rcv_full, trcv")
    p.add_argument("--eps-list", default="0.25,0.125,0.0625", help="comma list of accuracies")
    p.add_argument("--kappa", type=float, default=1.2)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--q-mode", choices=["theorem", "fixed"], default="fixed")
    p.add_argument("--q", type=int, default=22)

    p = sub.add_parser("slope", help="fit log(time) against log(RMSE) from a benchmark CSV")
    _common(p)
    p.add_argument("--csv", required=True, metavar="PATH")
    p.add_argument("--method", default="trcv")
    return parser


def _apply_json_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.json_config:
        return args
    try:
        with open(args.json_config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read --json-config: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("--json-config must hold a JSON object")
    known = vars(args)
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown key {key!r} in --json-config")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    # explicit flags still win over the JSON file
    return parser.parse_args(argv)


def _emit(doc, out):
    text = json.dumps(doc, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _grid(model, steps):
    if steps < 1:
        raise ConfigError("--steps must be >= 1")
    return Grid.for_model(model, steps)


def cmd_simulate(args, model, functional):
    grid = _grid(model, args.steps)
    batch = simulate_paths(model, args.scheme, grid, args.n_paths, derive_seed(args.seed, "test"), threads=args.threads)
    if args.out:
        write_paths_csv(batch, args.out)
    _emit({"n_paths": len(batch), "steps": grid.steps, "mean_f": float(np.mean(functional(batch.terminal)))}, None)


def _truncation(value):
    if value is None or value == "auto":
        return value
    try:
        level = float(value)
    except ValueError:
        raise ConfigError(f"--truncation must be 'auto' or a number, got {value!r}") from None
    return level


def cmd_train(args, model, functional):
    grid = _grid(model, args.steps)
    scheme = normalize_scheme(args.scheme)
    drop_v = not args.keep_v and model.lsigma_diagonal
    terms = enumerate_terms(scheme, model.dim_noise, truncated=args.terms == "truncated", drop_v=drop_v)
    config = RegressionConfig(quadratic_plus_f_basis(model.dim_state, functional), args.ridge, True, _truncation(args.truncation))
    table = train(model, functional, scheme, grid, terms, args.n_train, args.seed, config, threads=args.threads)
    out = args.out or "table.json"
    table.save(out)
    _emit({"table": out, "terms": len(terms), "Q": config.basis.size, "J": grid.steps, "N": args.n_train}, None)


def cmd_estimate(args, model, functional):
    grid = _grid(model, args.steps)
    scheme = normalize_scheme(args.scheme)
    if args.table:
        with open(args.table) as fh:
            doc = json.load(fh)
        table = RegressionTable.from_dict(doc, basis_from_name(doc["basis"], model.dim_state, functional))
        if table.steps != grid.steps:
            raise ConfigError(f"table covers J={table.steps}, --steps is {grid.steps}")
        report = estimate_with_cv(model, functional, scheme, grid, table, args.n_test, args.seed, args.threads)
    else:
        report = estimate_smc(model, functional, scheme, grid, args.n_test, args.seed, args.threads)
    if model.reference_expectation is not None:
        rmse_against_reference(report, model.reference_expectation)
    report.extra["reference_source"] = model.reference_source
    _emit(report.to_dict(), args.out)


def cmd_oracle_check(args, model, functional):
    rep = zero_variance_check(model, functional, args.scheme, _grid(model, args.steps), args.max_leaves)
    doc = dict(vars(rep), passed=rep.passed(args.tol))
    _emit(doc, args.out)
    return EXIT_OK if doc["passed"] else EXIT_NUMERICAL


def _float_list(text):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None
    if not vals:
        raise ConfigError("empty list")
    return vals


def cmd_benchmark(args, model, functional):
    methods = [m.strip() for m in str(args.methods).split(",") if m.strip()]
    rows = bench.run_benchmark(
        model,
        functional,
        methods,
        args.scheme,
        _float_list(args.eps_list),
        args.kappa,
        args.reps,
        args.seed,
        args.out,
        args.q_mode,
        args.q,
        args.threads,
    )
    if not args.out:
        bench.write_rows(rows, sys.stdout)


def cmd_slope(args, model, functional):
    fit = bench.fit_complexity_slope(args.csv, args.method)
    _emit(vars(fit), args.out)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "oracle-check": cmd_oracle_check,
    "benchmark": cmd_benchmark,
    "slope": cmd_slope,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_json_config(parser, argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        model, functional = get_model(args.model)
        code = COMMANDS[args.command](args, model, functional)
        return EXIT_OK if code is None else code
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (np.linalg.LinAlgError, QuadratureError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
