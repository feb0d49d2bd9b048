"""scikit-learn style wrapper around the regression control variate.

The estimator consumes a :class:`~weakcv.schemes.PathBatch` rather than a
feature matrix: ``fit`` trains coefficient functions on training paths,
``predict`` returns the control variate M per path and ``transform`` the
corrected payoff f(X_T) - M.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .regression import RegressionConfig, fit_table, quadratic_plus_f_basis
from .schemes import EULER, ORDER2, PathBatch
from .terms import enumerate_terms, evaluate_cv

__all__ = ["check_paths", "ControlVariateRegressor"]


def check_paths(paths, scheme=None, steps=None, dim_state=None):
    """Validate a path batch and return it unchanged."""
    if not isinstance(paths, PathBatch):
        raise TypeError(f"expected a PathBatch, got {type(paths).__name__}")
    n, J1, d = paths.states.shape
    if n < 1:
        raise ValueError("empty path batch")
    if paths.xi.shape[:2] != (n, J1 - 1):
        raise ValueError(f"increments have shape {paths.xi.shape}, states {paths.states.shape}")
    if paths.scheme == ORDER2 and (paths.v is None or paths.v.shape[:2] != (n, J1 - 1)):
        raise ValueError("second order paths need V increments for every step")
    if paths.scheme not in (EULER, ORDER2):
        raise ValueError(f"unknown scheme {paths.scheme!r}")
    if not np.all(np.isfinite(paths.states)):
        raise ValueError("path states contain NaN or infinity")
    if scheme is not None and paths.scheme != scheme:
        raise ValueError(f"paths use {paths.scheme!r}, expected {scheme!r}")
    if steps is not None and J1 - 1 != steps:
        raise ValueError(f"paths have {J1 - 1} steps, expected {steps}")
    if dim_state is not None and d != dim_state:
        raise ValueError(f"paths have state dimension {d}, expected {dim_state}")
    return paths


class ControlVariateRegressor(TransformerMixin, BaseEstimator):
    """Regression-based control variate fitted on training paths.

    Parameters
    ----------
    functional : callable
        Payoff f, mapping states (n, d) to (n,).
    terms : {"truncated", "full"} or list of TermIndex
    drop_v : bool
        Remove terms that carry a V factor.
    basis : BasisSet or None
        Defaults to quadratic monomials plus f.
    ridge, ridge_fallback, truncation, standardize
        Passed to :class:`~weakcv.regression.RegressionConfig`.
    """

    def __init__(
        self,
        functional=None,
        terms="truncated",
        drop_v=False,
        basis=None,
        ridge=0.0,
        ridge_fallback=True,
        truncation=None,
        standardize=True,
    ):
        self.functional = functional
        self.terms = terms
        self.drop_v = drop_v
        self.basis = basis
        self.ridge = ridge
        self.ridge_fallback = ridge_fallback
        self.truncation = truncation
        self.standardize = standardize

    def _resolve_terms(self, scheme, m):
        if isinstance(self.terms, str):
            if self.terms not in ("truncated", "full"):
                raise ValueError(f"terms must be 'truncated', 'full' or a list, got {self.terms!r}")
            return enumerate_terms(scheme, m, truncated=self.terms == "truncated", drop_v=self.drop_v)
        return list(self.terms)

    def fit(self, X, y=None):
        """Fit on training paths ``X``; ``y`` is ignored (responses come from f)."""
        if self.functional is None:
            raise ValueError("a payoff functional is required")
        paths = check_paths(X)
        d = paths.states.shape[2]
        basis = self.basis if self.basis is not None else quadratic_plus_f_basis(d, self.functional)
        config = RegressionConfig(basis, self.ridge, self.ridge_fallback, self.truncation, self.standardize)
        self.terms_ = self._resolve_terms(paths.scheme, paths.dim_noise)
        self.table_ = fit_table(paths, self.functional, self.terms_, config)
        self.n_features_in_ = d
        self.scheme_ = paths.scheme
        self.n_steps_ = paths.grid.steps
        return self

    def _checked(self, X):
        check_is_fitted(self, "table_")
        return check_paths(X, self.scheme_, self.n_steps_, self.n_features_in_)

    def predict(self, X):
        """Control variate M for every path."""
        return evaluate_cv(self._checked(X), self.table_)

    def transform(self, X):
        """Corrected payoff f(X_T) - M for every path."""
        paths = self._checked(X)
        return np.asarray(self.functional(paths.terminal), dtype=float) - evaluate_cv(paths, self.table_)

    def score(self, X, y=None):
        """Fraction of payoff variance removed: 1 - Var(f - M) / Var(f)."""
        paths = self._checked(X)
        f = np.asarray(self.functional(paths.terminal), dtype=float)
        base = np.var(f, ddof=1)
        if base == 0:
            return 1.0
        return 1.0 - np.var(f - evaluate_cv(paths, self.table_), ddof=1) / base
