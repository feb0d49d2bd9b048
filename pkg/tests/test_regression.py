import json
import math

import numpy as np
import pytest

from weakcv.models import constant_model, example5d_functional, example5d_model, get_model
from weakcv.regression import (
    BasisSet,
    RegressionConfig,
    RegressionTable,
    SingularRegressionError,
    auto_truncation_levels,
    basis_from_name,
    compute_responses,
    delta_power,
    fit_step,
    fit_table,
    polynomial_basis,
    quadratic_plus_f_basis,
    train,
    truncate_estimate,
)
from weakcv.schemes import EULER, ORDER2, Grid, simulate_paths
from weakcv.terms import TermIndex, enumerate_terms, evaluate_cv


def test_basis_sizes():
    f5 = example5d_functional()
    b = quadratic_plus_f_basis(5, f5)
    assert b.size == 22 == math.comb(7, 5) + 1
    psi = b(np.zeros((1, 5)))[0]
    assert psi[0] == 1.0 and np.all(psi[1:-1] == 0) and psi[-1] == 1.0
    _, f1 = get_model("toy1d")
    b1 = quadratic_plus_f_basis(1, f1)
    x = np.array([[0.7]])
    np.testing.assert_allclose(b1(x)[0], [1.0, 0.7, 0.49, f1(x)[0]])


def test_basis_names_round_trip():
    f = example5d_functional()
    for b in (quadratic_plus_f_basis(5, f), polynomial_basis(5, 3, f, size=30), polynomial_basis(2, 2)):
        again = basis_from_name(b.name, b.dim, f)
        assert (again.name, again.size) == (b.name, b.size)
        x = np.random.default_rng(0).normal(size=(3, b.dim))
        np.testing.assert_array_equal(again(x), b(x))
    with pytest.raises(ValueError):
        basis_from_name("splines", 2, f)


def test_responses():
    model = constant_model([0.0], [[1.0]], x0=[0.0])
    b = simulate_paths(model, EULER, Grid(1), 64, 0)
    term = [TermIndex(EULER, s=(0,))]
    assert np.all(compute_responses(b, lambda x: np.zeros(len(x)), 1, term) == 0)
    r = compute_responses(b, lambda x: x[:, 0], 1, term)[:, 0]
    # both branches give sqrt(Delta): (+1)(+1) and (-1)(-1)
    np.testing.assert_allclose(r, 1.0, atol=1e-15)
    b4 = simulate_paths(model, EULER, Grid(4), 64, 0)
    r4 = compute_responses(b4, lambda x: x[:, 0], 1, term)[:, 0]
    np.testing.assert_allclose(r4, b4.terminal[:, 0] * b4.xi[:, 0, 0])


def test_exact_span_fit():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 2))
    basis = polynomial_basis(2, 2)
    truth = rng.normal(size=(3, basis.size))
    cfg = RegressionConfig(basis, standardize=False)
    y = basis(x) @ truth.T
    alphas, info = fit_step(x, y, cfg, step=1)
    resid = y - basis(x) @ alphas.T
    assert np.sum(resid**2) <= 1e-10 * np.sum(y**2)
    assert not info["ridge_fallback"]
    zero, _ = fit_step(x, np.zeros((200, 2)), cfg)
    assert np.all(zero == 0)


def test_standardisation_does_not_change_fit():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 5.0, size=(300, 2))
    basis = polynomial_basis(2, 2)
    y = (basis(x) @ rng.normal(size=basis.size))[:, None]
    a1, _ = fit_step(x, y, RegressionConfig(basis))
    shift, scale = x.mean(0), x.std(0)
    pred = basis(x, (x - shift) / scale) @ a1.T
    np.testing.assert_allclose(pred, y, rtol=1e-8, atol=1e-8)


def _duplicated_basis(d):
    base = polynomial_basis(d, 1)
    return BasisSet("dup", base.size + 1, lambda x, z: np.column_stack([base(x, z), base(x, z)[:, :1]]), d)


def test_degenerate_basis_raises_without_fallback():
    model, f = get_model("toy2d")
    basis = _duplicated_basis(2)
    cfg = RegressionConfig(basis, ridge_fallback=False)
    terms = enumerate_terms(EULER, 1)
    with pytest.raises(SingularRegressionError) as err:
        train(model, f, EULER, Grid(2), terms, basis.size, 0, cfg)
    assert err.value.step == 2
    assert "j=2" in str(err.value)
    assert isinstance(err.value, np.linalg.LinAlgError)


def test_ridge_fallback_fires_and_logs(caplog):
    model, f = get_model("toy2d")
    cfg = RegressionConfig(_duplicated_basis(2))
    table = train(model, f, EULER, Grid(2), enumerate_terms(EULER, 1), 500, 0, cfg)
    assert table.metadata["steps"][1]["ridge_fallback"]
    assert table.metadata["steps"][0]["constant_design"]
    assert any("singular" in rec.message for rec in caplog.records)
    assert np.all(np.isfinite(table.alphas))


def test_truncation_clamp():
    t1 = TermIndex(ORDER2, u1=(0,), orders=(1,))
    t2 = TermIndex(ORDER2, u1=(0,), orders=(2,), u2=((0, 1),))
    assert t2.weight_class == 2
    assert delta_power(t2, 0.25) == pytest.approx(0.25**1.5)
    assert truncate_estimate(0.1, t1, 0.25, 1.0) == 0.1
    bound_term = TermIndex(EULER, s=(0,))
    delta = 4.0  # sqrt(Delta) = 2, so level 1 gives bound 2
    assert truncate_estimate(5.0, bound_term, delta, 1.0) == 2.0
    assert truncate_estimate(-5.0, bound_term, delta, 1.0) == -2.0
    with pytest.raises(ValueError):
        truncate_estimate(1.0, t1, 0.25, 0.0)


def test_table_applies_clamp():
    model, f = get_model("toy2d")
    terms = enumerate_terms(ORDER2, 1)
    cfg = RegressionConfig(quadratic_plus_f_basis(2, f), truncation=1e-6)
    table = train(model, f, ORDER2, Grid(3), terms, 400, 1, cfg)
    x = simulate_paths(model, ORDER2, Grid(3), 50, 9).states[:, 1]
    a = table.coefficients(2, x)
    assert np.all(np.abs(a) <= table.bounds + 1e-300)
    auto = train(model, f, ORDER2, Grid(3), terms, 400, 1, RegressionConfig(cfg.basis, truncation="auto"))
    assert auto.bounds.shape == (len(terms),) and np.all(auto.bounds > 0)


def test_auto_levels_pool_weight_classes():
    terms = [TermIndex(EULER, s=(0,)), TermIndex(EULER, s=(1,)), TermIndex(EULER, s=(0, 1))]
    resp = [np.array([[1.0, -3.0, 0.5]]), np.array([[2.0, 0.0, -0.25]])]
    b = auto_truncation_levels(resp, terms, 0.25)
    np.testing.assert_allclose(b, [6.0, 6.0, 1.0])


def test_training_is_deterministic():
    model, f = example5d_model(), example5d_functional()
    terms = enumerate_terms(ORDER2, 5, truncated=True, drop_v=True)
    cfg = RegressionConfig(quadratic_plus_f_basis(5, f))
    a = train(model, f, ORDER2, Grid(3), terms, 2000, 42, cfg)
    b = train(model, f, ORDER2, Grid(3), terms, 2000, 42, cfg)
    assert np.array_equal(a.alphas, b.alphas)
    c = train(model, f, ORDER2, Grid(3), terms, 2000, 43, cfg)
    assert not np.array_equal(a.alphas, c.alphas)


def test_json_round_trip(tmp_path):
    model, f = example5d_model(), example5d_functional()
    terms = enumerate_terms(ORDER2, 5, truncated=True)
    cfg = RegressionConfig(quadratic_plus_f_basis(5, f), truncation="auto")
    table = train(model, f, ORDER2, Grid(2), terms, 1000, 3, cfg)
    p = tmp_path / "t.json"
    table.save(p)
    doc = json.loads(p.read_text())
    assert doc["format_version"] == 1 and doc["Q"] == 22 and len(doc["terms"]) == 30
    back = RegressionTable.load(p, basis_from_name(doc["basis"], 5, f))
    b = simulate_paths(model, ORDER2, Grid(2), 100, 8)
    np.testing.assert_array_equal(evaluate_cv(b, back), evaluate_cv(b, table))
    with pytest.raises(ValueError):
        RegressionTable.from_dict(doc, polynomial_basis(5, 2))


def test_fit_table_recovers_exact_linear_coefficients():
    # constant coefficients and linear payoff: a_j = sigma sqrt(Delta) for every j;
    # the fit only sees sampling noise of order 1/sqrt(N)
    model = constant_model([0.1], [[0.7]], x0=[0.0])
    f = lambda x: x[:, 0]
    g = Grid(4)
    paths = simulate_paths(model, EULER, g, 4096, 5)
    table = fit_table(paths, f, enumerate_terms(EULER, 1), RegressionConfig(polynomial_basis(1, 1)))
    for j in range(1, 5):
        np.testing.assert_allclose(table.coefficients(j, paths.states[:, j - 1]), 0.7 * 0.5, atol=0.1)
    test = simulate_paths(model, EULER, g, 4096, 6)
    resid = f(test.terminal) - evaluate_cv(test, table)
    assert resid.var() < 0.01 * f(test.terminal).var()
