"""Least-squares estimation of control variate coefficients.

One Gram matrix is assembled and factorised per time step and then reused
for the right-hand sides of all terms, so a step costs
O(N Q^2 + T N Q + T Q^2) for T terms.
"""

import json
import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Union

import numpy as np
from scipy import linalg

from .rng import derive_seed
from .schemes import EULER, PathBatch, normalize_scheme, simulate_paths
from .terms import CoefficientTable, TermIndex, factor_matrix

__all__ = [
    "SingularRegressionError",
    "BasisSet",
    "polynomial_basis",
    "quadratic_plus_f_basis",
    "RegressionConfig",
    "RegressionTable",
    "compute_responses",
    "fit_step",
    "delta_power",
    "truncate_estimate",
    "auto_truncation_levels",
    "train",
    "fit_table",
    "basis_from_name",
    "TABLE_FORMAT_VERSION",
]

logger = logging.getLogger(__name__)

TABLE_FORMAT_VERSION = 1
_CHUNK = 16384


class SingularRegressionError(np.linalg.LinAlgError):
    def __init__(self, step, condition):
        self.step = step
        self.condition = condition
        super().__init__(f"Gram matrix at step j={step} is numerically singular (condition estimate {condition:.3e})")


@dataclass(frozen=True)
class BasisSet:
    """Q real functions of the state; ``evaluator`` maps (n, d) to (n, Q).

    ``evaluator(x, z)`` receives the raw states ``x`` and their standardised
    version ``z``; polynomial parts use ``z`` and payoff parts use ``x``.
    """

    name: str
    size: int
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("a basis needs at least one function")

    def __call__(self, x, z=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.evaluator(x, x if z is None else z)


def _monomial_exponents(d, degree):
    exps = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = [0] * d
            for i in combo:
                e[i] += 1
            exps.append(tuple(e))
    return exps


def polynomial_basis(d, degree, functional=None, name=None, size=None):
    """All monomials of total degree <= ``degree``, optionally plus f.

    ``size`` keeps only the first monomials in graded order so that the
    basis (f included) has exactly ``size`` functions.
    """
    exps = _monomial_exponents(d, degree)
    if size is not None:
        keep = size - (1 if functional is not None else 0)
        if not 1 <= keep <= len(exps):
            raise ValueError(f"cannot build a basis of size {size} from degree-{degree} monomials")
        exps = exps[:keep]
    extra = 1 if functional is not None else 0

    def evaluate(x, z):
        out = np.empty((x.shape[0], len(exps) + extra))
        for q, e in enumerate(exps):
            col = np.ones(x.shape[0])
            for i, p in enumerate(e):
                for _ in range(p):
                    col = col * z[:, i]
            out[:, q] = col
        if functional is not None:
            out[:, -1] = functional(x)
        return out

    if name is None:
        name = f"poly{degree}" + ("" if size is None else f"[{size}]") + ("+f" if functional is not None else "")
    return BasisSet(name, len(exps) + extra, evaluate, d)


def quadratic_plus_f_basis(d, functional):
    """Monomials of degree <= 2 plus the payoff: Q = C(d + 2, d) + 1."""
    return polynomial_basis(d, 2, functional, name="quadratic+f")


def basis_from_name(name, d, functional):
    """Rebuild a basis from its stored name ("quadratic+f", "poly2", "poly3[30]+f", ...)."""
    if name == "quadratic+f":
        return quadratic_plus_f_basis(d, functional)
    body = name[len("poly"):] if name.startswith("poly") else None
    if body is None:
        raise ValueError(f"unknown basis name {name!r}")
    with_f = body.endswith("+f")
    body = body[:-2] if with_f else body
    size = None
    if body.endswith("]"):
        body, _, sz = body[:-1].partition("[")
        size = int(sz)
    return polynomial_basis(d, int(body), functional if with_f else None, size=size)


def delta_power(term, delta):
    """Delta raised to the proven decay exponent of ``term``'s coefficient.

    Second order terms use Delta^{min(w, 3/2)}; Euler terms use
    sqrt(Delta) for r = 1 and Delta for r >= 2.
    """
    w = term.weight_class
    cap = 1.0 if term.scheme == EULER else 1.5
    return delta ** min(w, cap)


def truncate_estimate(value, term, delta, level):
    """Clamp ``value`` to [-level * Delta_w, level * Delta_w]."""
    if level <= 0:
        raise ValueError("truncation level must be positive")
    bound = level * delta_power(term, delta)
    return np.clip(value, -bound, bound)


@dataclass
class RegressionConfig:
    basis: BasisSet
    ridge: float = 0.0
    ridge_fallback: bool = True
    truncation: Union[None, float, str] = None
    standardize: bool = True

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.truncation is not None and self.truncation != "auto" and not self.truncation > 0:
            raise ValueError("truncation must be None, 'auto' or a positive level")


def compute_responses(batch, functional, j, terms, payoff=None):
    """f(X_T) times each term's step-j factor, shape (n, len(terms))."""
    if payoff is None:
        payoff = functional(batch.terminal)
    xi, v = batch.increments_at(j)
    return np.asarray(payoff, dtype=float)[:, None] * factor_matrix(terms, xi, v)


def _standardizer(x, enabled):
    d = x.shape[1]
    if not enabled:
        return np.zeros(d), np.ones(d)
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return shift, scale


def fit_step(states, responses, config, step=None, shift=None, scale=None):
    """Regress responses (n, T) on the basis at ``states`` (n, d).

    Returns ``(alphas, info)`` with ``alphas`` of shape (T, Q).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[:, None]
    n = states.shape[0]
    if n < 1:
        raise ValueError("need at least one training path")
    if shift is None:
        shift, scale = _standardizer(states, config.standardize)
    basis = config.basis
    Q = basis.size
    info = {"ridge": float(config.ridge), "ridge_fallback": False, "constant_design": False}

    if np.all(states == states[0]):
        # Every path sits at the same state (e.g. X_0 = x0): the fit is
        # pinned only at that point, so use the minimum-norm solution.
        psi0 = basis(states[:1], (states[:1] - shift) / scale)[0]
        norm2 = psi0 @ psi0
        if norm2 == 0:
            raise SingularRegressionError(step, np.inf)
        alphas = np.outer(responses.mean(axis=0), psi0) / norm2
        info.update(constant_design=True, condition=1.0)
        return alphas, info

    gram = np.zeros((Q, Q))
    rhs = np.zeros((Q, responses.shape[1]))
    for i in range(0, n, _CHUNK):
        xc = states[i : i + _CHUNK]
        psi = basis(xc, (xc - shift) / scale)
        gram += psi.T @ psi
        rhs += psi.T @ responses[i : i + _CHUNK]
    gram /= n
    rhs /= n
    asym = np.abs(gram - gram.T).max()
    assert asym <= 1e-12 * max(1.0, np.abs(gram).max()), f"Gram matrix asymmetric by {asym}"
    gram = 0.5 * (gram + gram.T)

    eig = np.linalg.eigvalsh(gram)
    cond = eig[-1] / eig[0] if eig[0] > 0 else np.inf
    info["condition"] = float(cond)
    lam = config.ridge
    singular = not (eig[0] > Q * np.finfo(float).eps * eig[-1])
    if lam == 0 and singular:
        if not config.ridge_fallback:
            raise SingularRegressionError(step, cond)
        lam = 1e-10 * np.trace(gram) / Q
        info.update(ridge=float(lam), ridge_fallback=True)
        logger.warning("step %s: singular Gram matrix (cond %.3e), retrying with ridge %.3e", step, cond, lam)
    system = gram + lam * np.eye(Q)
    try:
        factor = linalg.cho_factor(system, lower=True, check_finite=True)
    except linalg.LinAlgError:
        if not config.ridge_fallback or info["ridge_fallback"]:
            raise SingularRegressionError(step, cond) from None
        lam = 1e-10 * np.trace(gram) / Q
        info.update(ridge=float(lam), ridge_fallback=True)
        logger.warning("step %s: Cholesky failed, retrying with ridge %.3e", step, lam)
        try:
            factor = linalg.cho_factor(gram + lam * np.eye(Q), lower=True)
        except linalg.LinAlgError:
            raise SingularRegressionError(step, cond) from None
    alphas = linalg.cho_solve(factor, rhs).T
    return alphas, info


class RegressionTable(CoefficientTable):
    """Coefficients a_{j,term}(x) = sum_q alpha_{j,term,q} psi_q(x).

    ``bounds`` (one clamp level per term, or ``None``) applies the
    truncation operator at evaluation time.
    """

    provenance = "regression"

    def __init__(self, scheme, steps, terms, basis, alphas, shift, scale, delta, bounds=None, metadata=None):
        super().__init__(scheme, steps, terms)
        self.basis = basis
        self.alphas = np.asarray(alphas, dtype=float)
        self.shift = np.asarray(shift, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.delta = float(delta)
        self.bounds = None if bounds is None else np.asarray(bounds, dtype=float)
        self.metadata = dict(metadata or {})
        expected = (self.steps, len(self.terms), basis.size)
        if self.alphas.shape != expected:
            raise ValueError(f"alphas have shape {self.alphas.shape}, expected {expected}")

    def coefficients(self, j, x):
        self._check_step(j)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        psi = self.basis(x, (x - self.shift[j - 1]) / self.scale[j - 1])
        a = psi @ self.alphas[j - 1].T
        if self.bounds is not None:
            a = np.clip(a, -self.bounds, self.bounds)
        return a

    # -- serialisation -----------------------------------------------------

    def to_dict(self):
        return {
            "format_version": TABLE_FORMAT_VERSION,
            "scheme": self.scheme,
            "m": self.metadata.get("m"),
            "J": self.steps,
            "Q": self.basis.size,
            "basis": self.basis.name,
            "delta": self.delta,
            "terms": [t.key for t in self.terms],
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "bounds": None if self.bounds is None else self.bounds.tolist(),
            "weights": {
                str(j): {t.key: self.alphas[j - 1, k].tolist() for k, t in enumerate(self.terms)}
                for j in range(1, self.steps + 1)
            },
            "metadata": self.metadata,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, doc, basis):
        if doc.get("format_version") != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported table format {doc.get('format_version')!r}")
        if basis.name != doc["basis"] or basis.size != doc["Q"]:
            raise ValueError(f"table was fitted with basis {doc['basis']!r} (Q={doc['Q']}), got {basis.name!r}")
        terms = [TermIndex.from_key(k) for k in doc["terms"]]
        J = doc["J"]
        alphas = np.array([[doc["weights"][str(j)][t.key] for t in terms] for j in range(1, J + 1)])
        return cls(
            normalize_scheme(doc["scheme"]),
            J,
            terms,
            basis,
            alphas.reshape(J, len(terms), basis.size),
            doc["shift"],
            doc["scale"],
            doc["delta"],
            doc["bounds"],
            doc.get("metadata"),
        )

    @classmethod
    def load(cls, path, basis):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), basis)


def auto_truncation_levels(responses_by_step, terms, delta):
    """Clamp bounds per term: 2 max|response| / Delta_w, pooled per weight class.

    Returns the bound level * Delta_w for each term.
    """
    peak = {}
    for resp in responses_by_step:
        for k, term in enumerate(terms):
            w = term.weight_class
            peak[w] = max(peak.get(w, 0.0), float(np.abs(resp[:, k]).max(initial=0.0)))
    bounds = []
    for term in terms:
        dw = delta_power(term, delta)
        level = 2.0 * peak[term.weight_class] / dw
        bounds.append(level * dw if level > 0 else np.finfo(float).tiny)
    return np.array(bounds)


def fit_table(paths, functional, terms, config, metadata=None):
    """Fit a :class:`RegressionTable` on already simulated training paths."""
    if not isinstance(paths, PathBatch):
        raise TypeError("training paths must be a PathBatch")
    terms = list(terms)
    J = paths.grid.steps
    delta = paths.grid.delta
    payoff = functional(paths.terminal)
    d = paths.states.shape[2]
    alphas = np.zeros((J, len(terms), config.basis.size))
    shifts = np.zeros((J, d))
    scales = np.ones((J, d))
    diagnostics = []
    responses = []
    for j in range(1, J + 1):
        x = paths.states[:, j - 1]
        shifts[j - 1], scales[j - 1] = _standardizer(x, config.standardize)
        resp = compute_responses(paths, functional, j, terms, payoff=payoff)
        alphas[j - 1], info = fit_step(x, resp, config, step=j, shift=shifts[j - 1], scale=scales[j - 1])
        diagnostics.append(info)
        if config.truncation == "auto":
            responses.append(resp)
    bounds = None
    if config.truncation == "auto":
        bounds = auto_truncation_levels(responses, terms, delta)
    elif config.truncation is not None:
        bounds = np.array([config.truncation * delta_power(t, delta) for t in terms])
    meta = {
        "N": len(paths),
        "m": paths.dim_noise,
        "seed": paths.seed,
        "basis": config.basis.name,
        "truncation": config.truncation,
        "steps": diagnostics,
    }
    meta.update(metadata or {})
    return RegressionTable(paths.scheme, J, terms, config.basis, alphas, shifts, scales, delta, bounds, meta)


def train(model, functional, scheme, grid, terms, n_paths, seed, config, threads=1):
    """Simulate ``n_paths`` training paths and fit every step.

    Training paths use the "train" key domain of ``seed`` so they never
    coincide with testing paths drawn from the same master seed.
    """
    if n_paths < 1:
        raise ValueError("need at least one training path")
    paths = simulate_paths(model, scheme, grid, n_paths, derive_seed(seed, "train"), threads=threads)
    return fit_table(paths, functional, terms, config, metadata={"master_seed": seed, "model": model.name})
