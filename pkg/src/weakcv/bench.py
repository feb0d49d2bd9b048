"""Parameter schedules, RMSE-versus-time sweeps and complexity slopes."""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .estimator import estimate_smc, estimate_with_cv, loglog_slope
from .regression import RegressionConfig, polynomial_basis, quadratic_plus_f_basis, train
from .rng import derive_seed
from .schemes import ORDER2, Grid, normalize_scheme
from .terms import enumerate_terms

__all__ = [
    "METHODS",
    "CSV_HEADER",
    "Schedule",
    "schedule_for",
    "smc_schedule_for",
    "BenchRow",
    "method_terms",
    "run_benchmark",
    "write_rows",
    "read_rows",
    "SlopeFit",
    "fit_complexity_slope",
]

METHODS = ("smc", "rcv_full", "trcv")
CSV_HEADER = ["method", "scheme", "epsilon", "J", "Q", "N", "N0", "seed", "estimate", "rmse", "wall_time_s", "repetitions"]
DEFAULT_FACTOR = 512
SRCV_FACTOR = 2048  # training factor of the stratified variant; kept for reference, unused


@dataclass(frozen=True)
class Schedule:
    epsilon: float
    kappa: float
    J: int
    N: int
    N0: int
    Q: int
    q_mode: str
    factors: tuple = (DEFAULT_FACTOR, DEFAULT_FACTOR)


def _check_eps_kappa(epsilon, kappa):
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not kappa > 1:
        raise ValueError(
            f"kappa must exceed 1 (got {kappa}): the complexity-optimal orders are not optimal if kappa <= 1"
        )


def schedule_for(epsilon, kappa=1.2, q_mode="fixed", q=22, factors=(DEFAULT_FACTOR, DEFAULT_FACTOR)):
    """J, N, N0 and Q for the control variate methods at accuracy ``epsilon``.

    J = ceil(eps^-1/2), N = c_N ceil(eps^-5/4),
    N0 = c_N0 ceil(eps^-(5 kappa + 10)/(4 kappa + 4)); Q is either fixed or
    ceil(eps^-5/(4 kappa + 4)).
    """
    _check_eps_kappa(epsilon, kappa)
    c_n, c_n0 = factors
    J = math.ceil(epsilon**-0.5)
    N = c_n * math.ceil(epsilon**-1.25)
    N0 = c_n0 * math.ceil(epsilon ** (-(5 * kappa + 10) / (4 * kappa + 4)))
    if q_mode == "theorem":
        Q = math.ceil(epsilon ** (-5 / (4 * kappa + 4)))
    elif q_mode == "fixed":
        if int(q) < 1:
            raise ValueError("fixed Q must be positive")
        Q = int(q)
    else:
        raise ValueError(f"q_mode must be 'theorem' or 'fixed', got {q_mode!r}")
    return Schedule(epsilon, kappa, J, N, N0, Q, q_mode, tuple(factors))


def smc_schedule_for(epsilon, scheme, factor=DEFAULT_FACTOR):
    """Plain Monte Carlo: J ~ eps^{-1/order}, N0 = factor * ceil(eps^-2)."""
    scheme = normalize_scheme(scheme)
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    J = math.ceil(epsilon**-0.5) if scheme == ORDER2 else math.ceil(1.0 / epsilon)
    return Schedule(epsilon, float("nan"), J, 0, factor * math.ceil(epsilon**-2), 0, "none", (0, factor))


@dataclass
class BenchRow:
    method: str
    scheme: str
    epsilon: float
    J: int
    Q: int
    N: int
    N0: int
    seed: int
    estimate: float
    rmse: float
    wall_time_s: float
    repetitions: int
    var_per_path: float = float("nan")
    rmse_spread: float = float("nan")


def method_terms(method, scheme, model):
    """Term set of a control variate method; V terms are dropped when they
    vanish identically (L^k sigma^{rl} = 0 for k != l)."""
    drop_v = scheme == ORDER2 and model.lsigma_diagonal
    if method == "rcv_full":
        return enumerate_terms(scheme, model.dim_noise, truncated=False, drop_v=drop_v)
    if method == "trcv":
        return enumerate_terms(scheme, model.dim_noise, truncated=True, drop_v=drop_v)
    raise ValueError(f"method {method!r} has no term set")


def _basis_for(schedule, model, functional):
    if schedule.q_mode == "fixed":
        base = quadratic_plus_f_basis(model.dim_state, functional)
        if schedule.Q != base.size:
            raise ValueError(
                f"fixed Q={schedule.Q} does not match the quadratic+f basis size {base.size} in d={model.dim_state}"
            )
        return base
    # graded monomials plus f, cut to exactly Q functions
    Q = max(schedule.Q, 2)
    deg = 0
    while math.comb(model.dim_state + deg, deg) + 1 < Q:
        deg += 1
    return polynomial_basis(model.dim_state, deg, functional, size=Q)


def run_benchmark(
    model,
    functional,
    methods,
    scheme,
    epsilon_list,
    kappa=1.2,
    repetitions=20,
    master_seed=0,
    out_path=None,
    q_mode="fixed",
    q=22,
    threads=1,
    reference=None,
):
    """RMSE and total wall time per (method, epsilon) over independent repetitions.

    RMSE of one run is sqrt(bias^2 + Var/N0), estimated from all repetitions:
    the bias from the mean estimate, the variance pooled over every testing
    path. ``rmse_spread`` keeps the plain sqrt(mean (estimate - reference)^2),
    which estimates the same number with far more noise. Wall time sums
    training and testing over all repetitions. Rows are appended to
    ``out_path`` when given.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("at least one method is required")
    for meth in methods:
        if meth not in METHODS:
            raise ValueError(f"unknown method {meth!r}; choose from {', '.join(METHODS)}")
    if repetitions < 2:
        raise ValueError("repetitions must be >= 2")
    if reference is None:
        reference = model.reference_expectation
    if reference is None:
        raise ValueError(f"model {model.name!r} has no reference value; RMSE needs one")
    scheme = normalize_scheme(scheme)
    rows = []
    for meth in methods:
        for eps in epsilon_list:
            if meth == "smc":
                sched = smc_schedule_for(eps, scheme)
            else:
                sched = schedule_for(eps, kappa, q_mode, q)
                basis = _basis_for(sched, model, functional)
                terms = method_terms(meth, scheme, model)
                config = RegressionConfig(basis)
            grid = Grid.for_model(model, sched.J)
            estimates, variances, total = [], [], 0.0
            for rep in range(repetitions):
                seed = derive_seed(master_seed, f"{meth}:{eps!r}:{rep}")
                t0 = time.perf_counter()
                if meth == "smc":
                    report = estimate_smc(model, functional, scheme, grid, sched.N0, seed, threads)
                else:
                    try:
                        table = train(model, functional, scheme, grid, terms, sched.N, seed, config, threads)
                    except np.linalg.LinAlgError as exc:
                        exc.args = (f"{meth} at eps={eps}, repetition {rep}: {exc}",)
                        raise
                    report = estimate_with_cv(model, functional, scheme, grid, table, sched.N0, seed, threads)
                total += time.perf_counter() - t0
                estimates.append(report.estimate)
                variances.append(report.var_per_path)
            est = np.asarray(estimates)
            rows.append(
                BenchRow(
                    meth,
                    scheme,
                    float(eps),
                    sched.J,
                    sched.Q,
                    sched.N,
                    sched.N0,
                    int(master_seed),
                    float(est.mean()),
                    math.hypot(est.mean() - reference, math.sqrt(np.mean(variances) / sched.N0)),
                    total,
                    repetitions,
                    float(np.mean(variances)),
                    float(np.sqrt(np.mean((est - reference) ** 2))),
                )
            )
    if out_path is not None:
        write_rows(rows, out_path, append=True)
    return rows


_CASTS = {"method": str, "scheme": str, "epsilon": float, "J": int, "Q": int, "N": int, "N0": int, "seed": int,
          "estimate": float, "rmse": float, "wall_time_s": float, "repetitions": int}


def _write(fh, rows, header):
    w = csv.writer(fh)
    if header:
        w.writerow(CSV_HEADER)
    for row in rows:
        d = asdict(row)
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in CSV_HEADER])


def write_rows(rows, path, append=False):
    """Write rows under the fixed CSV header; floats use repr for exact round trips.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write(path, rows, True)
        return
    fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="") as fh:
        _write(fh, rows, fresh)


def read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [BenchRow(**{k: _CASTS[k](v) for k, v in rec.items()}) for rec in reader]


@dataclass
class SlopeFit:
    method: str
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_points: int


def fit_complexity_slope(source, method):
    """OLS of log(wall time) on log(RMSE) for one method.

    ``source`` is a CSV path or a list of :class:`BenchRow`.
    """
    rows = read_rows(source) if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__") else list(source)
    pts = [(r.rmse, r.wall_time_s) for r in rows if r.method == method]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 rows for method {method!r}, found {len(pts)}")
    rmse, wall = zip(*pts)
    slope, intercept, (lo, hi) = loglog_slope(rmse, wall)
    return SlopeFit(method, slope, intercept, lo, hi, len(pts))
