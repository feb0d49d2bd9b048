"""Exact conditional expectations by enumerating the discrete increment tree.

For small (m, J) the law of the discretised path is a finite tree, so
q_j(x) = E[f(X_T) | X_j = x] and every coefficient function a_{j,term}(x)
can be computed exactly (up to floating point) by backward recursion over
step outcomes. These values are the ground truth for the zero-variance and
regression tests.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import product

import numpy as np

from .schemes import (
    EULER,
    ORDER2,
    SQRT3,
    EulerIncrement,
    Grid,
    PathBatch,
    SecondOrderIncrement,
    normalize_scheme,
    step,
)
from .terms import CoefficientTable, enumerate_terms, evaluate_cv, factor_matrix

__all__ = [
    "DEFAULT_MAX_LEAVES",
    "BudgetExceededError",
    "OutcomeWeight",
    "step_outcomes",
    "outcome_arrays",
    "Enumerator",
    "exact_q",
    "exact_coefficient",
    "OracleTable",
    "build_oracle_table",
    "closed_form_q",
    "factorized_mean",
    "enumerate_paths",
    "ZeroVarianceReport",
    "zero_variance_check",
    "DecayReport",
    "empirical_coefficient_decay",
]

DEFAULT_MAX_LEAVES = 10**7
_CHUNK_ROWS = 1 << 15


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class OutcomeWeight:
    outcome: object
    probability: Fraction


def _n_outcomes(scheme, m, collapse_v):
    if scheme == EULER:
        return 2**m
    return 3**m * (1 if collapse_v else 2 ** (m * (m - 1) // 2))


@lru_cache(maxsize=None)
def _outcome_table(scheme, m, collapse_v):
    pairs = [(k, l) for k in range(m) for l in range(k + 1, m)]
    idx = np.arange(m)
    xis, vs, ws = [], [], []
    if scheme == EULER:
        for y in product((-1.0, 1.0), repeat=m):
            xis.append(y)
            ws.append(Fraction(1, 2**m))
        return np.array(xis, dtype=float).reshape(-1, m), None, tuple(ws)
    vpatterns = [(1,) * len(pairs)] if collapse_v else list(product((-1, 1), repeat=len(pairs)))
    denom = 6**m * (1 if collapse_v else 2 ** len(pairs))
    for y in product((-SQRT3, 0.0, SQRT3), repeat=m):
        zeros = sum(1 for t in y if t == 0.0)
        for pat in vpatterns:
            v = np.zeros((m, m), dtype=np.int8)
            for (k, l), s in zip(pairs, pat):
                v[k, l], v[l, k] = s, -s
            v[idx, idx] = -1
            xis.append(y)
            vs.append(v)
            ws.append(Fraction(4**zeros, denom))
    return np.array(xis, dtype=float).reshape(-1, m), np.array(vs, dtype=np.int8), tuple(ws)


def step_outcomes(scheme, m, collapse_v=False, max_leaves=DEFAULT_MAX_LEAVES):
    """All outcomes of one step with exact probabilities.

    With ``collapse_v`` the second order V matrices are not enumerated (one
    representative per xi), which is exact for models whose step map does
    not read the off-diagonal V entries.
    """
    scheme = normalize_scheme(scheme)
    n = _n_outcomes(scheme, m, collapse_v)
    if n > max_leaves:
        raise BudgetExceededError(f"{n} outcomes per step exceed the budget of {max_leaves}")
    xi, v, ws = _outcome_table(scheme, m, collapse_v)
    if scheme == EULER:
        return [OutcomeWeight(EulerIncrement(xi[i]), ws[i]) for i in range(n)]
    return [OutcomeWeight(SecondOrderIncrement(xi[i], v[i]), ws[i]) for i in range(n)]


def outcome_arrays(scheme, m, collapse_v=False):
    """(xi, v, weights) arrays over one step's outcomes."""
    scheme = normalize_scheme(scheme)
    xi, v, ws = _outcome_table(scheme, m, collapse_v)
    return xi, v, np.array([float(w) for w in ws])


class Enumerator:
    """Depth-first evaluation of q_j and a_{j,term} for one problem.

    Trees are expanded one step at a time in row chunks, so memory stays
    O(J * chunk) while the leaf count may reach ``max_leaves`` per state.
    """

    def __init__(self, model, functional, scheme, grid, max_leaves=DEFAULT_MAX_LEAVES):
        self.model = model
        self.functional = functional
        self.scheme = normalize_scheme(scheme)
        self.grid = grid
        self.max_leaves = max_leaves
        # V only enters the step through L^k sigma^{rl}, k != l.
        self.collapse_v = self.scheme == ORDER2 and model.lsigma_diagonal
        self.xi, self.v, self.w = outcome_arrays(self.scheme, model.dim_noise, self.collapse_v)
        self.n_out = len(self.w)
        self.n_traversals = 0

    def _check_budget(self, depth):
        leaves = self.n_out**depth
        if leaves > self.max_leaves:
            raise BudgetExceededError(
                f"a {depth}-step tree has {leaves} leaves per state, over the budget of {self.max_leaves}"
            )

    def _children(self, x):
        n = x.shape[0]
        xs = np.repeat(x, self.n_out, axis=0)
        xi = np.tile(self.xi, (n, 1))
        v = None if self.v is None else np.tile(self.v, (n, 1, 1))
        return step(self.model, self.scheme, self.grid.delta, xs, xi, v)

    @property
    def _parent_rows(self):
        # parents expanded at once, so that children stay within one chunk
        return max(1, _CHUNK_ROWS // self.n_out)

    def _q(self, j, x):
        if j == self.grid.steps:
            return np.asarray(self.functional(x), dtype=float)
        step_rows = self._parent_rows
        if x.shape[0] > step_rows:
            return np.concatenate([self._q(j, x[i : i + step_rows]) for i in range(0, x.shape[0], step_rows)])
        kids = self._children(x)
        return self._q(j + 1, kids).reshape(x.shape[0], self.n_out) @ self.w

    def q(self, j, x):
        """q_j at states ``x`` of shape (n, d)."""
        if not 0 <= j <= self.grid.steps:
            raise ValueError(f"step {j} outside 0..{self.grid.steps}")
        self._check_budget(self.grid.steps - j)
        self.n_traversals += 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.concatenate([self._q(j, x[i : i + _CHUNK_ROWS]) for i in range(0, x.shape[0], _CHUNK_ROWS)])

    def coefficients(self, j, x, terms, q_func=None):
        """a_{j,term}(x) for every term, shape (n, len(terms)).

        ``q_func(j, states)`` replaces the recursive q_j when supplied.
        """
        if not 1 <= j <= self.grid.steps:
            raise ValueError(f"step {j} outside 1..{self.grid.steps}")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], len(terms)))
        live = [t for t, term in enumerate(terms) if not (self.collapse_v and term.has_v)]
        if not live:
            return out
        live_terms = [terms[t] for t in live]
        F = factor_matrix(live_terms, self.xi, self.v) * self.w[:, None]
        if q_func is None:
            self._check_budget(self.grid.steps - j + 1)
            self.n_traversals += 1
        rows = self._parent_rows
        for i in range(0, x.shape[0], rows):
            xc = x[i : i + rows]
            kids = self._children(xc)
            qv = q_func(j, kids) if q_func is not None else self._q(j, kids)
            out[i : i + rows, live] = qv.reshape(xc.shape[0], self.n_out) @ F
        return out


def exact_q(model, functional, scheme, grid, j, x, max_leaves=DEFAULT_MAX_LEAVES):
    x = np.asarray(x, dtype=float)
    val = Enumerator(model, functional, scheme, grid, max_leaves).q(j, x.reshape(-1, model.dim_state))
    return float(val[0]) if x.ndim == 1 else val


def exact_coefficient(model, functional, scheme, grid, j, term, x, max_leaves=DEFAULT_MAX_LEAVES):
    x = np.asarray(x, dtype=float)
    enum = Enumerator(model, functional, scheme, grid, max_leaves)
    val = enum.coefficients(j, x.reshape(-1, model.dim_state), [term])[:, 0]
    return float(val[0]) if x.ndim == 1 else val


class OracleTable(CoefficientTable):
    """Exact coefficient functions, evaluated lazily.

    With ``memoize`` the coefficient vector of every (j, x) is cached under
    the exact byte pattern of x; there is no tolerance-based lookup.
    """

    provenance = "oracle"

    def __init__(self, enumerator, terms, memoize=True, q_func=None):
        super().__init__(enumerator.scheme, enumerator.grid.steps, terms)
        self.enumerator = enumerator
        self.memoize = memoize
        self.q_func = q_func
        self._cache = {}

    def coefficients(self, j, x):
        self._check_step(j)
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        if not self.memoize:
            return self.enumerator.coefficients(j, x, self.terms, self.q_func)
        keys = [(j, row.tobytes()) for row in x]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            uniq = {}
            for i in missing:
                uniq.setdefault(keys[i], i)
            rows = list(uniq.values())
            vals = self.enumerator.coefficients(j, x[rows], self.terms, self.q_func)
            for r, val in zip(rows, vals):
                self._cache[keys[r]] = val
        return np.array([self._cache[k] for k in keys]).reshape(x.shape[0], len(self.terms))


def build_oracle_table(model, functional, scheme, grid, terms, max_leaves=DEFAULT_MAX_LEAVES, memoize=True, q_func=None):
    enum = Enumerator(model, functional, scheme, grid, max_leaves)
    return OracleTable(enum, terms, memoize=memoize, q_func=q_func)


def closed_form_q(model, functional, scheme, grid):
    """Exact q_j for a constant-coefficient model and a trigonometric payoff.

    With constant coefficients both schemes reduce to
    X_T = x + mu (J - j) delta + sqrt(delta) sigma S with S a sum of i.i.d.
    increments, so E[exp(i k.X_T)] factorises through the characteristic
    function of one increment coordinate.
    """
    if model.constant_coefficients is None:
        raise ValueError("closed-form q needs a constant-coefficient model")
    if not hasattr(functional, "wavevectors"):
        raise ValueError("closed-form q needs a TrigPolynomial payoff")
    scheme = normalize_scheme(scheme)
    mu, sigma = model.constant_coefficients
    K = functional.wavevectors
    drift_phase = K @ mu
    loadings = K @ sigma  # (n_terms, m)
    sq = np.sqrt(grid.delta)
    if scheme == EULER:
        char = np.cos(sq * loadings)
    else:
        char = 2.0 / 3.0 + np.cos(SQRT3 * sq * loadings) / 3.0
    one_step = np.prod(char, axis=1)

    def q(j, x):
        n = grid.steps - j
        theta = np.atleast_2d(x) @ K.T + n * grid.delta * drift_phase
        damp = one_step**n
        return (np.cos(theta) * functional.cos_coefs + np.sin(theta) * functional.sin_coefs) @ damp

    return q


def enumerate_paths(model, scheme, grid, max_leaves=DEFAULT_MAX_LEAVES):
    """Every path of the discrete tree as a :class:`PathBatch`, plus its probability."""
    enum = Enumerator(model, None, scheme, grid, max_leaves)
    enum._check_budget(grid.steps)
    J, n_out = grid.steps, enum.n_out
    n = n_out**J
    d, m = model.dim_state, model.dim_noise
    # outcome index of path p at step j is digit j of p in base n_out
    digits = (np.arange(n)[:, None] // n_out ** np.arange(J - 1, -1, -1)[None, :]) % n_out
    states = np.empty((n, J + 1, d))
    states[:, 0] = model.x0
    xi = enum.xi[digits]
    v = None if enum.v is None else enum.v[digits]
    for j in range(1, J + 1):
        states[:, j] = step(model, enum.scheme, grid.delta, states[:, j - 1], xi[:, j - 1], None if v is None else v[:, j - 1])
    weights = np.prod(enum.w[digits], axis=1)
    batch = PathBatch(enum.scheme, grid, states, xi, v, np.arange(n, dtype=np.uint64))
    return batch, weights


@dataclass
class ZeroVarianceReport:
    scheme: str
    steps: int
    n_paths: int
    n_terms: int
    mean: float
    max_deviation: float

    def passed(self, tol=1e-10):
        return self.max_deviation <= tol


def zero_variance_check(model, functional, scheme, grid, max_leaves=DEFAULT_MAX_LEAVES):
    """f - M with the full oracle table on every enumerated path against E f."""
    scheme = normalize_scheme(scheme)
    terms = enumerate_terms(scheme, model.dim_noise)
    table = build_oracle_table(model, functional, scheme, grid, terms, max_leaves)
    batch, weights = enumerate_paths(model, scheme, grid, max_leaves)
    mean = float(table.enumerator.q(0, model.x0[None])[0])
    resid = np.asarray(functional(batch.terminal), dtype=float) - evaluate_cv(batch, table)
    return ZeroVarianceReport(scheme, grid.steps, len(batch), len(terms), mean, float(np.abs(resid - mean).max()))


def _one_driver_kernel(scheme, delta):
    from .models import arctan_model

    model = arctan_model(1, coupled=True, own_noise=False)
    xi, v, w = outcome_arrays(scheme, 1, collapse_v=True)

    def kids(x1):
        n = x1.size
        states = np.column_stack([np.repeat(x1, len(w)), np.zeros(n * len(w))])
        vv = None if v is None else np.tile(v, (n, 1, 1))
        out = step(model, scheme, delta, states, np.tile(xi, (n, 1)), vv)
        return out[:, 0], out[:, 1]

    return model, kids, w


def _private_char(scheme, delta, steps):
    sq = np.sqrt(delta)
    one = np.cos(sq) if scheme == EULER else 2.0 / 3.0 + np.cos(SQRT3 * sq) / 3.0
    return one**steps


def factorized_mean(n_drivers, scheme, steps, method="spectral", n_nodes=512, max_leaves=DEFAULT_MAX_LEAVES):
    """E f(X_{Delta,T}) for the coupled arctan family with payoff
    cos(sum x) - 20 sum_i sin(x^i).

    The coupled coordinate is a sum over drivers of increments that depend
    on that driver alone, plus sqrt(Delta) times a private noise. Hence
    E cos(sum x) = Re[phi^n chi] with phi = E exp(i(X^1 + Z^1)) for one
    driver and chi the private noise's characteristic function; the sine
    terms vanish by symmetry.

    ``method="tree"`` computes phi by full enumeration of the one-driver
    tree (2^J or 3^J leaves). ``method="spectral"`` runs the backward
    recursion u_j(x) = sum_y w_y exp(i g(x, y)) u_{j+1}(Phi(x, y)) on the
    2 pi-periodic function u_j, stored as a trigonometric interpolant on
    ``n_nodes`` equispaced nodes; its error is spectrally small and is
    checked against the tree in the tests.
    """
    from .models import TrigPolynomial

    scheme = normalize_scheme(scheme)
    delta = 1.0 / steps
    chi = _private_char(scheme, delta, steps)
    if method == "tree":
        model, _, _ = _one_driver_kernel(scheme, delta)
        grid = Grid.for_model(model, steps)
        x0 = model.x0[None]
        re = Enumerator(model, TrigPolynomial([[1.0, 1.0]], [1.0], [0.0]), scheme, grid, max_leaves).q(0, x0)[0]
        im = Enumerator(model, TrigPolynomial([[1.0, 1.0]], [0.0], [1.0]), scheme, grid, max_leaves).q(0, x0)[0]
        phi = re + 1j * im
    elif method == "spectral":
        M = int(n_nodes)
        _, kids, w = _one_driver_kernel(scheme, delta)
        nodes = 2 * np.pi * np.arange(M) / M
        x1, z = kids(nodes)
        freqs = np.fft.fftfreq(M, 1.0 / M)
        if M % 2 == 0:
            freqs[M // 2] = 0.0  # the Nyquist mode is zeroed below
        interp = np.exp(1j * np.outer(x1, freqs)) / M
        phase = np.exp(1j * z)
        u = np.exp(1j * nodes)
        for _ in range(steps):
            c = np.fft.fft(u)
            if M % 2 == 0:
                c[M // 2] = 0.0
            u = (phase * (interp @ c)).reshape(M, len(w)) @ w
        phi = u[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    return float((phi**n_drivers * chi).real)


def _proven_exponent(term):
    w = term.weight_class
    return min(w, 1.0) if term.scheme == EULER else min(w, 1.5)


@dataclass
class DecayReport:
    """Max |a| per weight class and Delta, with fitted log-log slopes."""

    scheme: str
    deltas: list
    max_abs: dict
    slopes: dict
    proven: dict
    steps_used: dict

    @property
    def flagged(self):
        return [w for w, s in self.slopes.items() if s < self.proven[w] - 0.25]


def empirical_coefficient_decay(
    model, functional, scheme, terms, J_list, probe_points, max_leaves=DEFAULT_MAX_LEAVES, max_steps_back=None
):
    """Fit the decay of sup |a_{j,term}| in Delta for each weight class.

    For every J the sup runs over the probe points and over the steps j whose
    remaining tree fits in ``max_leaves`` per probe point (the last step
    always fits), optionally capped at ``max_steps_back`` steps.
    """
    scheme = normalize_scheme(scheme)
    probe_points = np.atleast_2d(np.asarray(probe_points, dtype=float))
    classes = sorted({t.weight_class for t in terms})
    max_abs = {w: [] for w in classes}
    deltas, steps_used = [], {}
    for J in J_list:
        grid = Grid(J, model.horizon)
        enum = Enumerator(model, functional, scheme, grid, max_leaves)
        js = []
        for j in range(J, 0, -1):
            if enum.n_out ** (J - j + 1) * len(probe_points) > max_leaves:
                break
            if max_steps_back is not None and len(js) >= max_steps_back:
                break
            js.append(j)
        if not js:
            raise BudgetExceededError(f"even the last step of J={J} exceeds the budget")
        best = {w: 0.0 for w in classes}
        for j in js:
            A = np.abs(enum.coefficients(j, probe_points, terms))
            for t, term in enumerate(terms):
                best[term.weight_class] = max(best[term.weight_class], float(A[:, t].max()))
        for w in classes:
            max_abs[w].append(best[w])
        deltas.append(grid.delta)
        steps_used[J] = js
    slopes, proven = {}, {}
    logd = np.log(deltas)
    for w in classes:
        vals = np.array(max_abs[w])
        if np.all(vals > 1e-13):
            slopes[w] = float(np.polyfit(logd, np.log(vals), 1)[0])
        proven[w] = _proven_exponent(next(t for t in terms if t.weight_class == w))
    proven = {w: p for w, p in proven.items() if w in slopes}
    return DecayReport(scheme, deltas, max_abs, slopes, proven, steps_used)
