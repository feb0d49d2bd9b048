"""Control variate terms: indexing, increment factors and evaluation.

A term picks one product of increment functions at a single time step. For
the weak Euler scheme it is a product of signs over an index tuple ``s``;
for the second order scheme it is a product of normalised Hermite values
H_o(xi^r) over ``u1`` times V entries over the pairs in ``u2``. Indices are
0-based throughout.
"""

from dataclasses import dataclass
from itertools import combinations, product

import numpy as np

from .schemes import EULER, ORDER2, PathBatch, SimulatedPath, normalize_scheme

__all__ = [
    "TermIndex",
    "hermite",
    "enumerate_terms",
    "term_factor",
    "factor_matrix",
    "OrthonormalityReport",
    "term_factor_orthonormality_check",
    "CoefficientTable",
    "CallableTable",
    "ZeroTable",
    "martingale_increments",
    "evaluate_cv",
]

_SQRT2 = np.sqrt(2.0)


def hermite(k, x):
    """Normalised Hermite polynomial of order 0, 1 or 2."""
    if k == 0:
        return np.ones_like(np.asarray(x, dtype=float))
    if k == 1:
        return np.asarray(x, dtype=float)
    if k == 2:
        x = np.asarray(x, dtype=float)
        return (x * x - 1.0) / _SQRT2
    raise ValueError(f"Hermite order {k} not supported (only 0, 1, 2)")


@dataclass(frozen=True)
class TermIndex:
    scheme: str
    s: tuple = ()
    u1: tuple = ()
    orders: tuple = ()
    u2: tuple = ()

    def __post_init__(self):
        if self.scheme == EULER:
            if not self.s or list(self.s) != sorted(set(self.s)):
                raise ValueError(f"Euler index tuple must be nonempty and strictly increasing: {self.s}")
            if self.u1 or self.u2 or self.orders:
                raise ValueError("Euler terms carry only s")
        elif self.scheme == ORDER2:
            if self.s:
                raise ValueError("second order terms do not carry s")
            if list(self.u1) != sorted(set(self.u1)):
                raise ValueError(f"u1 must be strictly increasing: {self.u1}")
            if len(self.orders) != len(self.u1) or any(o not in (1, 2) for o in self.orders):
                raise ValueError("orders must give 1 or 2 for every entry of u1")
            if list(self.u2) != sorted(set(self.u2)) or any(k >= l for k, l in self.u2):
                raise ValueError(f"u2 must be increasing pairs (k, l) with k < l: {self.u2}")
            if not self.u1 and not self.u2:
                raise ValueError("u1 and u2 cannot both be empty")
        else:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def weight_class(self):
        """Delta exponent class |U2| + |K2| + |K1|/2 (r/2 for Euler)."""
        if self.scheme == EULER:
            return len(self.s) / 2
        n2 = sum(1 for o in self.orders if o == 2)
        n1 = len(self.orders) - n2
        return len(self.u2) + n2 + 0.5 * n1

    @property
    def has_v(self):
        return bool(self.u2)

    @property
    def key(self):
        if self.scheme == EULER:
            return "E:" + ",".join(map(str, self.s))
        left = ",".join(f"{r}^{o}" for r, o in zip(self.u1, self.orders))
        right = ",".join(f"{k}-{l}" for k, l in self.u2)
        return f"O:{left}|{right}"

    @classmethod
    def from_key(cls, key):
        tag, _, body = key.partition(":")
        if tag == "E":
            return cls(EULER, s=tuple(int(t) for t in body.split(",")))
        if tag == "O":
            left, _, right = body.partition("|")
            u1, orders = (), ()
            if left:
                pairs = [p.split("^") for p in left.split(",")]
                u1 = tuple(int(r) for r, _ in pairs)
                orders = tuple(int(o) for _, o in pairs)
            u2 = tuple(tuple(int(t) for t in p.split("-")) for p in right.split(",")) if right else ()
            return cls(ORDER2, u1=u1, orders=orders, u2=u2)
        raise ValueError(f"malformed term key {key!r}")

    def sort_key(self):
        return (self.weight_class, self.s, self.u1, self.orders, self.u2)

    def __str__(self):
        return self.key


def enumerate_terms(scheme, m, truncated=False, drop_v=False):
    """Terms of the full or truncated control variate in canonical order.

    Full sets have 2^m - 1 (Euler) and 3^m 2^{m(m-1)/2} - 1 (second order)
    terms. Truncation keeps Euler terms with r = 1 and second order terms
    with weight class at most 1. ``drop_v`` removes every term with a V
    factor.
    """
    scheme = normalize_scheme(scheme)
    if m < 1:
        raise ValueError("m must be >= 1")
    terms = []
    if scheme == EULER:
        max_r = 1 if truncated else m
        for r in range(1, max_r + 1):
            terms.extend(TermIndex(EULER, s=s) for s in combinations(range(m), r))
    else:
        pairs = list(combinations(range(m), 2))
        for o_vec in product((0, 1, 2), repeat=m):
            u1 = tuple(r for r in range(m) if o_vec[r])
            orders = tuple(o_vec[r] for r in u1)
            w1 = sum(1.0 if o == 2 else 0.5 for o in orders)
            if truncated and w1 > 1:
                continue
            if drop_v:
                max_v = 0
            elif truncated:
                max_v = int(1 - w1)
            else:
                max_v = len(pairs)
            for nv in range(0, max_v + 1):
                for u2 in combinations(pairs, nv):
                    if not u1 and not u2:
                        continue
                    terms.append(TermIndex(ORDER2, u1=u1, orders=orders, u2=u2))
    terms.sort(key=TermIndex.sort_key)
    return terms


def _scheme_of(inc):
    return getattr(inc, "scheme", None)


def term_factor(term, inc):
    """Product of increment functions named by ``term`` for one increment."""
    if _scheme_of(inc) != term.scheme:
        raise ValueError(f"term scheme {term.scheme!r} does not match increment {type(inc).__name__}")
    if term.scheme == EULER:
        return float(np.prod([inc.signs[i] for i in term.s]))
    val = 1.0
    for r, o in zip(term.u1, term.orders):
        val *= float(hermite(o, inc.xi[r]))
    for k, l in term.u2:
        val *= float(inc.v[k, l])
    return val


def factor_matrix(terms, xi, v=None):
    """Factors of every term for a batch of increments, shape (n, len(terms))."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty((xi.shape[0], len(terms)))
    if not terms:
        return out
    scheme = terms[0].scheme
    if scheme == ORDER2:
        h = (None, xi, (xi * xi - 1.0) / _SQRT2)
    for t, term in enumerate(terms):
        if term.scheme != scheme:
            raise ValueError("mixed schemes in one term list")
        if scheme == EULER:
            col = xi[:, term.s[0]].copy()
            for i in term.s[1:]:
                col *= xi[:, i]
        else:
            col = np.ones(xi.shape[0])
            for r, o in zip(term.u1, term.orders):
                col *= h[o][:, r]
            if term.u2:
                if v is None:
                    raise ValueError(f"term {term.key} needs V increments")
                for k, l in term.u2:
                    col *= v[:, k, l]
        out[:, t] = col
    return out


@dataclass
class OrthonormalityReport:
    scheme: str
    m: int
    n_terms: int
    n_outcomes: int
    max_gram_deviation: float
    max_mean_deviation: float

    @property
    def passed(self):
        return max(self.max_gram_deviation, self.max_mean_deviation) <= 1e-14


def term_factor_orthonormality_check(scheme, m):
    """Check E[F_a F_b] = delta_ab and E[F_a] = 0 by exact enumeration."""
    from .oracle import outcome_arrays

    scheme = normalize_scheme(scheme)
    if m > 3:
        raise ValueError("exact orthonormality check is limited to m <= 3")
    terms = enumerate_terms(scheme, m)
    xi, v, w = outcome_arrays(scheme, m)
    F = factor_matrix(terms, xi, v)
    gram = (F * w[:, None]).T @ F
    means = w @ F
    return OrthonormalityReport(
        scheme,
        m,
        len(terms),
        len(w),
        float(np.abs(gram - np.eye(len(terms))).max()),
        float(np.abs(means).max()),
    )


class CoefficientTable:
    """Coefficient functions a_{j,term}(x) for steps j = 1..J.

    Subclasses implement :meth:`coefficients`, returning an array of shape
    (n, len(terms)) for states ``x`` of shape (n, d).
    """

    provenance = "custom"

    def __init__(self, scheme, steps, terms):
        self.scheme = normalize_scheme(scheme)
        self.steps = int(steps)
        self.terms = list(terms)
        for t in self.terms:
            if t.scheme != self.scheme:
                raise ValueError(f"term {t.key} does not belong to scheme {self.scheme!r}")

    def coefficients(self, j, x):
        raise NotImplementedError

    def _check_step(self, j):
        if not 1 <= j <= self.steps:
            raise KeyError(f"no coefficients for step {j}; table covers 1..{self.steps}")

    def __add__(self, other):
        if other.scheme != self.scheme or other.steps != self.steps or other.terms != self.terms:
            raise ValueError("tables must share scheme, steps and terms")
        return CallableTable(
            self.scheme,
            self.steps,
            self.terms,
            lambda j, x: self.coefficients(j, x) + other.coefficients(j, x),
        )


class CallableTable(CoefficientTable):
    """Table backed by a function ``func(j, x) -> (n, len(terms))``."""

    def __init__(self, scheme, steps, terms, func):
        super().__init__(scheme, steps, terms)
        self.func = func

    def coefficients(self, j, x):
        self._check_step(j)
        return np.asarray(self.func(j, np.atleast_2d(x)), dtype=float)


class ZeroTable(CoefficientTable):
    provenance = "zero"

    def coefficients(self, j, x):
        self._check_step(j)
        return np.zeros((np.atleast_2d(x).shape[0], len(self.terms)))


def _as_batch(paths):
    if isinstance(paths, PathBatch):
        return paths, False
    if isinstance(paths, SimulatedPath):
        inc0 = paths.increments[0]
        scheme = inc0.scheme
        from .schemes import Grid

        J = len(paths.increments)
        if scheme == EULER:
            xi = np.array([inc.signs for inc in paths.increments])[None]
            v = None
        else:
            xi = np.array([inc.xi for inc in paths.increments])[None]
            v = np.array([inc.v for inc in paths.increments])[None]
        batch = PathBatch(scheme, Grid(J), paths.states[None], xi, v, np.array([paths.path_id], dtype=np.uint64))
        return batch, True
    raise TypeError(f"expected PathBatch or SimulatedPath, got {type(paths).__name__}")


def martingale_increments(paths, table):
    """Per-step control variate increments, shape (n, J)."""
    batch, _ = _as_batch(paths)
    if batch.scheme != table.scheme:
        raise ValueError(f"paths use {batch.scheme!r} but the table is for {table.scheme!r}")
    J = batch.states.shape[1] - 1
    if J != table.steps:
        raise ValueError(f"paths have {J} steps, table covers {table.steps}")
    out = np.zeros((len(batch), J))
    if not table.terms:
        return out
    for j in range(1, J + 1):
        xi, v = batch.increments_at(j)
        A = table.coefficients(j, batch.states[:, j - 1])
        F = factor_matrix(table.terms, xi, v)
        out[:, j - 1] = np.sum(A * F, axis=1)
    return out


def evaluate_cv(paths, table):
    """Control variate sum_j sum_terms a_{j,term}(X_{j-1}) * factor_j.

    Accepts a :class:`PathBatch` (returns an array) or a single
    :class:`SimulatedPath` (returns a float). Steps are accumulated in order
    so each path's value does not depend on the batch it travels in.
    """
    batch, single = _as_batch(paths)
    inc = martingale_increments(batch, table)
    total = np.zeros(len(batch))
    for j in range(inc.shape[1]):
        total = total + inc[:, j]
    return float(total[0]) if single else total
