"""Testing phase: plain and control-variate Monte Carlo estimators."""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .rng import derive_seed
from .schemes import Grid, normalize_scheme, simulate_paths
from .terms import evaluate_cv

__all__ = [
    "EstimatorReport",
    "estimate_smc",
    "estimate_with_cv",
    "rmse_against_reference",
    "payoff_samples",
    "BiasPoint",
    "BiasStudy",
    "weak_bias_study",
    "loglog_slope",
]

_EVAL_CHUNK = 32768


@dataclass
class EstimatorReport:
    estimate: float
    var_per_path: float
    n_paths: int
    std_error: float
    bias: Optional[float] = None
    rmse: Optional[float] = None
    wall_time_s: float = 0.0
    method: str = "smc"
    scheme: str = ""
    J: int = 0
    Q: Optional[int] = None
    N: Optional[int] = None
    N0: Optional[int] = None
    seed: Optional[int] = None
    provenance: str = "none"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def payoff_samples(model, functional, scheme, grid, n_paths, seed, table=None, threads=1, chunk=_EVAL_CHUNK):
    """f(X_T) - M per testing path, simulated chunk by chunk.

    Paths are keyed by id, so the values do not depend on ``chunk``.
    """
    test_seed = derive_seed(seed, "test")
    out = np.empty(n_paths)
    for start in range(0, n_paths, chunk):
        n = min(chunk, n_paths - start)
        batch = simulate_paths(model, scheme, grid, n, test_seed, path_offset=start, threads=threads)
        vals = np.asarray(functional(batch.terminal), dtype=float)
        if table is not None:
            vals = vals - evaluate_cv(batch, table)
        out[start : start + n] = vals
    return out


def _report(samples, method, scheme, grid, seed, elapsed, **kw):
    n = samples.size
    var = float(np.var(samples, ddof=1))
    return EstimatorReport(
        estimate=float(np.mean(samples)),
        var_per_path=var,
        n_paths=n,
        std_error=math.sqrt(var / n),
        wall_time_s=elapsed,
        method=method,
        scheme=scheme,
        J=grid.steps,
        N0=n,
        seed=seed,
        **kw,
    )


def estimate_smc(model, functional, scheme, grid, n_paths, seed, threads=1):
    """Plain Monte Carlo average of f(X_T) over ``n_paths`` testing paths."""
    if n_paths < 2:
        raise ValueError("need at least two testing paths for a variance estimate")
    scheme = normalize_scheme(scheme)
    t0 = time.perf_counter()
    samples = payoff_samples(model, functional, scheme, grid, n_paths, seed, threads=threads)
    return _report(samples, "smc", scheme, grid, seed, time.perf_counter() - t0)


def estimate_with_cv(model, functional, scheme, grid, table, n_paths, seed, threads=1, method="cv"):
    """Average of f(X_T) - M over fresh testing paths.

    Testing paths come from the "test" key domain of ``seed``, which is
    disjoint from the training domain used by :func:`regression.train`.
    """
    if n_paths < 2:
        raise ValueError("need at least two testing paths for a variance estimate")
    scheme = normalize_scheme(scheme)
    if table.scheme != scheme:
        raise ValueError(f"table is for {table.scheme!r}, estimator runs {scheme!r}")
    t0 = time.perf_counter()
    samples = payoff_samples(model, functional, scheme, grid, n_paths, seed, table=table, threads=threads)
    elapsed = time.perf_counter() - t0
    meta = getattr(table, "metadata", {})
    basis = getattr(table, "basis", None)
    return _report(
        samples,
        method,
        scheme,
        grid,
        seed,
        elapsed,
        Q=None if basis is None else basis.size,
        N=meta.get("N"),
        provenance=table.provenance,
    )


def rmse_against_reference(report, reference):
    """Fill bias and rmse = sqrt(bias^2 + std_error^2)."""
    if not np.isfinite(reference):
        raise ValueError("reference must be finite")
    report.bias = report.estimate - reference
    report.rmse = math.hypot(report.bias, report.std_error)
    report.extra["reference"] = reference
    return report


def loglog_slope(x, y, level=0.95):
    """OLS of log y on log x: (slope, intercept, (lo, hi)) for the slope."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 2:
        raise ValueError("need at least two points")
    res = stats.linregress(lx, ly)
    if lx.size > 2:
        t = stats.t.ppf(0.5 + level / 2, lx.size - 2)
        ci = (res.slope - t * res.stderr, res.slope + t * res.stderr)
    else:
        ci = (float("nan"), float("nan"))
    return float(res.slope), float(res.intercept), ci


@dataclass
class BiasPoint:
    J: int
    delta: float
    bias: float
    std_error: float

    @property
    def ci(self):
        return (self.bias - 1.96 * self.std_error, self.bias + 1.96 * self.std_error)


@dataclass
class BiasStudy:
    scheme: str
    points: list
    slope: float
    intercept: float
    slope_ci: tuple
    reference: float

    @property
    def excludes_zero(self):
        lo, hi = self.slope_ci
        return lo > 0 or hi < 0


def weak_bias_study(
    model, functional, scheme, J_list, n_paths, seed, reference=None, tables=None, threads=1, mean_func=None
):
    """Bias of E f(X_{Delta,T}) against ``reference`` for each J, and its log-log slope.

    ``tables`` optionally maps J to a control variate table; the control
    variate leaves the mean unchanged and only shrinks the error bars.
    ``mean_func(J)`` replaces Monte Carlo by an exact discretised mean
    (zero standard error), e.g. :func:`oracle.factorized_mean`.
    """
    scheme = normalize_scheme(scheme)
    if reference is None:
        reference = model.reference_expectation
    if reference is None:
        raise ValueError("weak bias study needs a reference value")
    points = []
    for J in J_list:
        grid = Grid.for_model(model, J)
        if mean_func is not None:
            points.append(BiasPoint(J, grid.delta, mean_func(J) - reference, 0.0))
            continue
        table = None if tables is None else tables.get(J)
        if table is None:
            rep = estimate_smc(model, functional, scheme, grid, n_paths, seed, threads)
        else:
            rep = estimate_with_cv(model, functional, scheme, grid, table, n_paths, seed, threads)
        points.append(BiasPoint(J, grid.delta, rep.estimate - reference, rep.std_error))
    slope, intercept, ci = loglog_slope([p.delta for p in points], [abs(p.bias) for p in points])
    return BiasStudy(scheme, points, slope, intercept, ci, reference)
