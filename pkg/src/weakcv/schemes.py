"""Discrete-increment weak schemes and path simulation.

Two one-step maps are provided: the simplified weak Euler scheme driven by
Rademacher sign vectors, and the simplified second order weak Taylor
scheme driven by three-point variables xi and antisymmetric sign matrices V.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import uniforms

__all__ = [
    "EULER",
    "ORDER2",
    "Grid",
    "EulerIncrement",
    "SecondOrderIncrement",
    "SimulatedPath",
    "PathBatch",
    "normalize_scheme",
    "signs_from_uniforms",
    "three_point_from_uniforms",
    "v_matrix_from_uniforms",
    "sample_euler_increment",
    "sample_second_order_increment",
    "draw_increments",
    "euler_step",
    "second_order_step",
    "step",
    "simulate_paths",
    "replay_states",
    "write_paths_csv",
]

EULER = "euler"
ORDER2 = "order2"
SQRT3 = np.sqrt(3.0)

_ALIASES = {"euler": EULER, "order2": ORDER2, "second_order": ORDER2, "order-2": ORDER2}


def normalize_scheme(scheme):
    try:
        return _ALIASES[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; use 'euler' or 'order2'") from None


@dataclass(frozen=True)
class Grid:
    steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def delta(self):
        return self.horizon / self.steps

    @classmethod
    def for_model(cls, model, steps):
        return cls(int(steps), model.horizon)


@dataclass(frozen=True)
class EulerIncrement:
    signs: np.ndarray

    scheme = EULER


@dataclass(frozen=True)
class SecondOrderIncrement:
    xi: np.ndarray
    v: np.ndarray

    scheme = ORDER2


def n_components(scheme, m):
    """Number of uniforms consumed per step."""
    return m if scheme == EULER else m + m * (m - 1) // 2


# Thresholds belong to the upper cell: u in [0, 1/2) -> -1, [1/2, 1) -> +1.
def signs_from_uniforms(u):
    return np.where(np.asarray(u) < 0.5, -1.0, 1.0)


def three_point_from_uniforms(u):
    u = np.asarray(u)
    return np.where(u < 1.0 / 6.0, -SQRT3, np.where(u < 5.0 / 6.0, 0.0, SQRT3))


def v_matrix_from_uniforms(u, m):
    """Antisymmetric sign matrices with -1 on the diagonal.

    ``u`` has shape ``(..., m(m-1)/2)`` holding the upper-triangle draws in
    row-major order.
    """
    u = np.asarray(u)
    v = np.zeros(u.shape[:-1] + (m, m), dtype=np.int8)
    iu, lu = np.triu_indices(m, k=1)
    upper = np.where(u < 0.5, -1, 1).astype(np.int8)
    v[..., iu, lu] = upper
    v[..., lu, iu] = -upper
    idx = np.arange(m)
    v[..., idx, idx] = -1
    return v


def draw_increments(scheme, seed, path_ids, step, m):
    """Increments of step ``step`` (1-based) for each path id.

    Returns ``(xi, v)`` with ``xi`` of shape (n, m) and ``v`` of shape
    (n, m, m) for the second order scheme, ``None`` for Euler.
    """
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    u = uniforms(seed, path_ids, step, n_components(scheme, m))
    if scheme == EULER:
        return signs_from_uniforms(u), None
    return three_point_from_uniforms(u[:, :m]), v_matrix_from_uniforms(u[:, m:], m)


def sample_euler_increment(seed, path_id, step, m):
    xi, _ = draw_increments(EULER, seed, [path_id], step, m)
    return EulerIncrement(xi[0])


def sample_second_order_increment(seed, path_id, step, m):
    xi, v = draw_increments(ORDER2, seed, [path_id], step, m)
    return SecondOrderIncrement(xi[0], v[0])


def _check_dims(model, x, y):
    if x.shape[-1] != model.dim_state:
        raise ValueError(f"state has dimension {x.shape[-1]}, model expects {model.dim_state}")
    if y.shape[-1] != model.dim_noise:
        raise ValueError(f"increment has dimension {y.shape[-1]}, model expects {model.dim_noise}")


def euler_step(model, delta, x, y):
    """x + mu(x) delta + sigma(x) y sqrt(delta), vectorised over rows."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_dims(model, x, y)
    sq = np.sqrt(delta)
    mu = model.drift(x)
    sig = model.diffusion(x)
    noise = sig[..., 0] * y[..., 0:1]
    for k in range(1, model.dim_noise):
        noise = noise + sig[..., k] * y[..., k : k + 1]
    return x + mu * delta + noise * sq


def second_order_step(model, delta, x, y, z):
    """Simplified order-2 weak Taylor step.

    ``z`` holds the antisymmetric V matrices; only its entries enter through
    y^k y^l + z^{kl}, so the diagonal contributes (y^k)^2 - 1.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_dims(model, x, y)
    m = model.dim_noise
    sq = np.sqrt(delta)
    mu = model.drift(x)
    sig = model.diffusion(x)
    g = model.generator_terms(x, mu, sig)
    skip_offdiag = model.lsigma_diagonal

    noise = np.zeros_like(x)
    second = np.zeros_like(x)
    third = np.zeros_like(x)
    for k in range(m):
        yk = y[..., k : k + 1]
        noise = noise + sig[..., k] * yk
        third = third + (g.l0_sigma[..., k] + g.lk_mu[..., k, :]) * yk
        for l in range(m):
            if skip_offdiag and k != l:
                continue
            if k == l:
                w = yk * yk - 1.0
            else:
                w = yk * y[..., l : l + 1] + np.asarray(z[..., k, l], dtype=float)[..., None]
            second = second + g.lk_sigma[..., k, :, l] * w
    return x + noise * sq + (mu + 0.5 * second) * delta + 0.5 * third * delta**1.5 + 0.5 * g.l0_mu * delta**2


def step(model, scheme, delta, x, xi, v=None):
    if scheme == EULER:
        return euler_step(model, delta, x, xi)
    return second_order_step(model, delta, x, xi, v)


@dataclass(frozen=True)
class SimulatedPath:
    states: np.ndarray
    increments: tuple
    path_id: int


@dataclass
class PathBatch:
    """A block of simulated paths with every increment recorded.

    ``states`` has shape (n, J + 1, d); ``xi`` has shape (n, J, m) and
    holds Euler signs or three-point draws; ``v`` has shape (n, J, m, m)
    for the second order scheme and is ``None`` otherwise. Step ``j``
    (1-based) uses ``xi[:, j - 1]``.
    """

    scheme: str
    grid: Grid
    states: np.ndarray
    xi: np.ndarray
    v: Optional[np.ndarray]
    path_ids: np.ndarray
    seed: Optional[int] = None

    def __len__(self):
        return self.states.shape[0]

    @property
    def terminal(self):
        return self.states[:, -1]

    @property
    def dim_noise(self):
        return self.xi.shape[-1]

    def increments_at(self, j):
        """(xi, v) arrays of step ``j`` (1-based)."""
        return self.xi[:, j - 1], None if self.v is None else self.v[:, j - 1]

    def __getitem__(self, i):
        J = self.grid.steps
        if self.scheme == EULER:
            incs = tuple(EulerIncrement(self.xi[i, j]) for j in range(J))
        else:
            incs = tuple(SecondOrderIncrement(self.xi[i, j], self.v[i, j]) for j in range(J))
        return SimulatedPath(self.states[i], incs, int(self.path_ids[i]))

    def subset(self, idx):
        return PathBatch(
            self.scheme,
            self.grid,
            self.states[idx],
            self.xi[idx],
            None if self.v is None else self.v[idx],
            self.path_ids[idx],
            self.seed,
        )

    @classmethod
    def concatenate(cls, batches):
        first = batches[0]
        return cls(
            first.scheme,
            first.grid,
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.xi for b in batches]),
            None if first.v is None else np.concatenate([b.v for b in batches]),
            np.concatenate([b.path_ids for b in batches]),
            first.seed,
        )


def _simulate_chunk(model, scheme, grid, seed, path_ids):
    n, J = len(path_ids), grid.steps
    d, m = model.dim_state, model.dim_noise
    states = np.empty((n, J + 1, d))
    xis = np.empty((n, J, m))
    vs = np.empty((n, J, m, m), dtype=np.int8) if scheme == ORDER2 else None
    states[:, 0] = model.x0
    x = states[:, 0]
    for j in range(1, J + 1):
        xi, v = draw_increments(scheme, seed, path_ids, j, m)
        x = step(model, scheme, grid.delta, x, xi, v)
        states[:, j] = x
        xis[:, j - 1] = xi
        if vs is not None:
            vs[:, j - 1] = v
    return PathBatch(scheme, grid, states, xis, vs, path_ids, seed)


def simulate_paths(model, scheme, grid, n_paths, seed, path_offset=0, threads=1, chunk_size=8192):
    """Simulate ``n_paths`` paths with ids ``path_offset ..``.

    The output depends only on (seed, path id), never on ``threads`` or
    ``chunk_size``.
    """
    scheme = normalize_scheme(scheme)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    chunks = [ids[i : i + chunk_size] for i in range(0, n_paths, chunk_size)]
    run = lambda c: _simulate_chunk(model, scheme, grid, seed, c)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return parts[0] if len(parts) == 1 else PathBatch.concatenate(parts)


def replay_states(model, batch):
    """Recompute all states from x0 and the stored increments."""
    states = np.empty_like(batch.states)
    states[:, 0] = model.x0
    for j in range(1, batch.grid.steps + 1):
        xi, v = batch.increments_at(j)
        states[:, j] = step(model, batch.scheme, batch.grid.delta, states[:, j - 1], xi, v)
    return states


def write_paths_csv(batch, path):
    """Debug dump: one row per (path_id, j) with state and raw increments.

    Columns: path_id, j, x1..xd, then for j >= 1 the step-j increments
    y1..ym and, for the second order scheme, the upper-triangle entries
    v_k_l (k < l). Row j = 0 leaves increment columns empty.
    """
    n, J1, d = batch.states.shape
    m = batch.dim_noise
    upper = [(k, l) for k in range(m) for l in range(k + 1, m)] if batch.v is not None else []
    header = ["path_id", "j"] + [f"x{i + 1}" for i in range(d)] + [f"y{k + 1}" for k in range(m)]
    header += [f"v_{k + 1}_{l + 1}" for k, l in upper]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            for j in range(J1):
                row = [int(batch.path_ids[i]), j] + [repr(float(v)) for v in batch.states[i, j]]
                if j == 0:
                    row += [""] * (m + len(upper))
                else:
                    row += [repr(float(v)) for v in batch.xi[i, j - 1]]
                    row += [int(batch.v[i, j - 1, k, l]) for k, l in upper]
                w.writerow(row)
