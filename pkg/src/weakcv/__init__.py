"""Regression-based and truncated control variates for weak SDE schemes."""

from .api import ControlVariateRegressor, check_paths
from .bench import fit_complexity_slope, run_benchmark, schedule_for
from .estimator import EstimatorReport, estimate_smc, estimate_with_cv, rmse_against_reference, weak_bias_study
from .models import (
    SdeModel,
    TrigPolynomial,
    example5d_functional,
    example5d_model,
    get_model,
    reference_expectation_by_quadrature,
)
from .oracle import build_oracle_table, exact_coefficient, exact_q, factorized_mean
from .regression import RegressionConfig, RegressionTable, quadratic_plus_f_basis, train
from .schemes import Grid, PathBatch, simulate_paths
from .terms import TermIndex, enumerate_terms, evaluate_cv, hermite

__version__ = "0.1.0"
