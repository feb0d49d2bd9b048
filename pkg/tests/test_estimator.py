import json
import math

import numpy as np
import pytest

from weakcv.estimator import (
    EstimatorReport,
    estimate_smc,
    estimate_with_cv,
    loglog_slope,
    payoff_samples,
    rmse_against_reference,
    weak_bias_study,
)
from weakcv.models import TrigPolynomial, constant_model, example5d_functional, example5d_model, get_model
from weakcv.oracle import build_oracle_table
from weakcv.regression import RegressionConfig, quadratic_plus_f_basis, train
from weakcv.schemes import EULER, ORDER2, Grid
from weakcv.terms import ZeroTable, enumerate_terms

EX = example5d_model()
F5 = example5d_functional()


def test_constant_payoff():
    rep = estimate_smc(EX, lambda x: np.full(len(x), 2.5), ORDER2, Grid(3), 100, 0)
    assert rep.estimate == 2.5 and rep.var_per_path == 0.0 and rep.std_error == 0.0


def test_zero_table_equals_smc():
    g = Grid(4)
    terms = enumerate_terms(ORDER2, 5, truncated=True)
    a = estimate_smc(EX, F5, ORDER2, g, 5000, 7)
    b = estimate_with_cv(EX, F5, ORDER2, g, ZeroTable(ORDER2, 4, terms), 5000, 7)
    assert a.estimate == b.estimate and a.var_per_path == b.var_per_path
    assert b.provenance == "zero"


def test_same_seed_same_report():
    g = Grid(2)
    a = estimate_smc(EX, F5, EULER, g, 3000, 1)
    b = estimate_smc(EX, F5, EULER, g, 3000, 1)
    assert (a.estimate, a.var_per_path) == (b.estimate, b.var_per_path)


def test_samples_do_not_depend_on_chunking():
    g = Grid(3)
    a = payoff_samples(EX, F5, ORDER2, g, 1000, 4, chunk=1000)
    b = payoff_samples(EX, F5, ORDER2, g, 1000, 4, chunk=77, threads=2)
    np.testing.assert_array_equal(a, b)


def test_rmse_identities():
    rep = EstimatorReport(estimate=1.0003, var_per_path=0.0, n_paths=10, std_error=4e-4)
    rmse_against_reference(rep, 1.0)
    assert rep.rmse == pytest.approx(5e-4, rel=1e-9)
    rep = EstimatorReport(estimate=1.0, var_per_path=0.0, n_paths=10, std_error=4e-4)
    assert rmse_against_reference(rep, 1.0).rmse == 4e-4
    rep = EstimatorReport(estimate=1.5, var_per_path=0.0, n_paths=10, std_error=0.0)
    assert rmse_against_reference(rep, 1.0).rmse == 0.5
    with pytest.raises(ValueError):
        rmse_against_reference(rep, float("nan"))


def test_report_json_fields():
    rep = estimate_smc(EX, F5, ORDER2, Grid(2), 100, 0)
    doc = json.loads(rep.to_json())
    for key in ("estimate", "var_per_path", "n_paths", "std_error", "bias", "rmse", "wall_time_s", "method", "J", "seed"):
        assert key in doc
    assert EstimatorReport.from_dict(doc) == rep


def test_oracle_cv_has_zero_variance():
    model, f = get_model("toy1d")
    g = Grid(2)
    table = build_oracle_table(model, f, EULER, g, enumerate_terms(EULER, 1))
    rep = estimate_with_cv(model, f, EULER, g, table, 500, 3)
    assert rep.var_per_path < 1e-25


def test_linear_payoff_has_no_bias():
    model = constant_model([0.2, -0.1], [[1.0, 0.0], [0.3, 0.5]])
    f = lambda x: x[:, 0] + 2 * x[:, 1]
    exact = 0.2 - 0.2
    for scheme in (EULER, ORDER2):
        rep = estimate_smc(model, f, scheme, Grid(4), 50_000, 2)
        assert abs(rep.estimate - exact) < 4 * rep.std_error


def test_scheme_mismatch():
    with pytest.raises(ValueError):
        estimate_with_cv(EX, F5, EULER, Grid(2), ZeroTable(ORDER2, 2, []), 10, 0)
    with pytest.raises(ValueError):
        estimate_smc(EX, F5, EULER, Grid(2), 1, 0)


def test_trained_cv_is_unbiased_paired():
    model, f = get_model("toy2d")
    g = Grid(4)
    terms = enumerate_terms(ORDER2, 1)
    table = train(model, f, ORDER2, g, terms, 2000, 5, RegressionConfig(quadratic_plus_f_basis(2, f)))
    plain = payoff_samples(model, f, ORDER2, g, 20000, 5)
    cv = payoff_samples(model, f, ORDER2, g, 20000, 5, table=table)
    diff = plain - cv
    assert abs(diff.mean()) < 4 * diff.std(ddof=1) / math.sqrt(diff.size)
    assert cv.var() < plain.var()


def test_loglog_slope_exact():
    x = np.array([1.0, 0.5, 0.25, 0.125])
    s, c, (lo, hi) = loglog_slope(x, 3 * x**2)
    assert s == pytest.approx(2.0, abs=1e-12) and c == pytest.approx(math.log(3), abs=1e-12)
    assert lo == pytest.approx(2.0, abs=1e-9) and hi == pytest.approx(2.0, abs=1e-9)


def test_bias_study_with_exact_means():
    # constant coefficients, cos payoff: E cos(X_T) under Euler is cos(mu) cos(sigma sqrt(Delta))^J
    model = constant_model([0.0], [[1.0]], x0=[0.0], name="bm")
    f = TrigPolynomial([[1.0]], [1.0], [0.0])
    ref = math.exp(-0.5)
    study = weak_bias_study(
        model, f, EULER, [8, 16, 32, 64], 0, 0, reference=ref, mean_func=lambda J: math.cos(J**-0.5) ** J
    )
    assert study.slope == pytest.approx(1.0, abs=0.05)
    assert study.excludes_zero
