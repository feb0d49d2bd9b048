"""SDE problem definitions: coefficients, functionals and built-in models.

All callbacks are vectorised over leading axes: ``drift(x)`` maps an array
of shape ``(..., d)`` to ``(..., d)`` and ``diffusion(x)`` maps it to
``(..., d, m)``.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import integrate

__all__ = [
    "GeneratorTerms",
    "SdeModel",
    "TrigPolynomial",
    "QuadratureError",
    "arctan_model",
    "arctan_functional",
    "example5d_model",
    "example5d_functional",
    "rotating_model",
    "constant_model",
    "reference_expectation_by_quadrature",
    "get_model",
    "MODEL_NAMES",
    "normal_expectation",
]


class QuadratureError(RuntimeError):
    pass


class GeneratorTerms(NamedTuple):
    """Generator operators applied to the coefficients at a batch of states.

    ``lk_sigma[..., k, r, l]`` is L^k sigma^{rl}, ``l0_sigma[..., r, k]`` is
    L^0 sigma^{rk}, ``lk_mu[..., k, r]`` is L^k mu^r and ``l0_mu[..., r]`` is
    L^0 mu^r.
    """

    lk_sigma: np.ndarray
    l0_sigma: np.ndarray
    lk_mu: np.ndarray
    l0_mu: np.ndarray


class CoefficientDerivatives(NamedTuple):
    """First and second partial derivatives of mu and sigma.

    Index layout: ``jac_mu[..., r, i]``, ``hess_mu[..., r, i, j]``,
    ``jac_sigma[..., r, l, i]``, ``hess_sigma[..., r, l, i, j]``.
    """

    jac_mu: np.ndarray
    hess_mu: np.ndarray
    jac_sigma: np.ndarray
    hess_sigma: np.ndarray


def generator_terms(mu, sigma, derivs):
    """Assemble the L^0 and L^k operators from coefficient derivatives."""
    big_sigma = np.einsum("...ik,...jk->...ij", sigma, sigma)
    # L^k g = sum_i sigma^{ik} d_i g
    lk_sigma = np.einsum("...ik,...rli->...krl", sigma, derivs.jac_sigma)
    lk_mu = np.einsum("...ik,...ri->...kr", sigma, derivs.jac_mu)
    # L^0 g = sum_i mu^i d_i g + 1/2 sum_ij Sigma^{ij} d_ij g
    l0_sigma = np.einsum("...i,...rli->...rl", mu, derivs.jac_sigma) + 0.5 * np.einsum(
        "...ij,...rlij->...rl", big_sigma, derivs.hess_sigma
    )
    l0_mu = np.einsum("...i,...ri->...r", mu, derivs.jac_mu) + 0.5 * np.einsum(
        "...ij,...rij->...r", big_sigma, derivs.hess_mu
    )
    return GeneratorTerms(lk_sigma, l0_sigma, lk_mu, l0_mu)


def finite_difference_derivatives(drift, diffusion, x):
    """Central-difference derivatives of the coefficients at states ``x``.

    First derivatives use h = max(1e-5, 1e-7 |x_i|); second derivatives use
    a wider h2 = max(1e-4, 1e-6 |x_i|) to keep round-off below 1e-7.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = np.maximum(1e-5, 1e-7 * np.abs(x))
    h2 = np.maximum(1e-4, 1e-6 * np.abs(x))
    mu0 = drift(x)
    sig0 = diffusion(x)
    jac_mu = np.empty(mu0.shape + (d,))
    jac_sigma = np.empty(sig0.shape + (d,))
    hess_mu = np.empty(mu0.shape + (d, d))
    hess_sigma = np.empty(sig0.shape + (d, d))

    def shifted(steps):
        xs = x.copy()
        for i, s in steps:
            xs[..., i] += s
        return xs

    for i in range(d):
        hi = h[..., i]
        xp, xm = shifted([(i, hi)]), shifted([(i, -hi)])
        jac_mu[..., i] = (drift(xp) - drift(xm)) / (2 * hi[..., None])
        jac_sigma[..., i] = (diffusion(xp) - diffusion(xm)) / (2 * hi[..., None, None])

        gi = h2[..., i]
        xp, xm = shifted([(i, gi)]), shifted([(i, -gi)])
        hess_mu[..., i, i] = (drift(xp) - 2 * mu0 + drift(xm)) / (gi**2)[..., None]
        hess_sigma[..., i, i] = (diffusion(xp) - 2 * sig0 + diffusion(xm)) / (gi**2)[..., None, None]
        for j in range(i + 1, d):
            gj = h2[..., j]
            pp = shifted([(i, gi), (j, gj)])
            pm = shifted([(i, gi), (j, -gj)])
            mp = shifted([(i, -gi), (j, gj)])
            mm = shifted([(i, -gi), (j, -gj)])
            den = 4 * gi * gj
            val_mu = (drift(pp) - drift(pm) - drift(mp) + drift(mm)) / den[..., None]
            val_sig = (diffusion(pp) - diffusion(pm) - diffusion(mp) + diffusion(mm)) / den[..., None, None]
            hess_mu[..., i, j] = hess_mu[..., j, i] = val_mu
            hess_sigma[..., i, j] = hess_sigma[..., j, i] = val_sig
    return CoefficientDerivatives(jac_mu, hess_mu, jac_sigma, hess_sigma)


def finite_difference_generator_terms(model, x, mu=None, sigma=None):
    x = np.asarray(x, dtype=float)
    mu = model.drift(x) if mu is None else mu
    sigma = model.diffusion(x) if sigma is None else sigma
    return generator_terms(mu, sigma, finite_difference_derivatives(model.drift, model.diffusion, x))


@dataclass(frozen=True)
class SdeModel:
    """Autonomous Ito SDE dX = mu(X) dt + sigma(X) dW on [0, horizon].

    ``derivative_ops`` optionally returns analytic :class:`GeneratorTerms`
    for a batch of states; without it the second order scheme builds them
    from central finite differences. ``lsigma_diagonal`` certifies that
    L^k sigma^{rl} vanishes for k != l, which lets the second order scheme
    ignore the off-diagonal V entries.
    """

    name: str
    dim_state: int
    dim_noise: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    horizon: float = 1.0
    derivative_ops: Optional[Callable[[np.ndarray], GeneratorTerms]] = None
    reference_expectation: Optional[float] = None
    reference_source: str = "none"
    lsigma_diagonal: bool = False
    constant_coefficients: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        x0 = np.array(self.x0, dtype=float)
        if x0.shape != (self.dim_state,):
            raise ValueError(f"x0 must have shape ({self.dim_state},), got {x0.shape}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.reference_source not in ("published", "quadrature", "none"):
            raise ValueError(f"unknown reference_source {self.reference_source!r}")

    def generator_terms(self, x, mu=None, sigma=None):
        """L-operator values needed by the second order weak Taylor step."""
        x = np.asarray(x, dtype=float)
        if mu is None:
            mu = self.drift(x)
        if sigma is None:
            sigma = self.diffusion(x)
        if self.constant_coefficients is not None:
            shape = x.shape[:-1]
            d, m = self.dim_state, self.dim_noise
            return GeneratorTerms(
                np.zeros(shape + (m, d, m)),
                np.zeros(shape + (d, m)),
                np.zeros(shape + (m, d)),
                np.zeros(shape + (d,)),
            )
        if self.derivative_ops is not None:
            return self.derivative_ops(x)
        return finite_difference_generator_terms(self, x, mu, sigma)


class TrigPolynomial:
    """f(x) = sum_t cos_coef_t * cos(k_t . x) + sin_coef_t * sin(k_t . x).

    A trigonometric representation covers the benchmark functional and
    admits closed-form conditional expectations under constant-coefficient
    dynamics, which the oracle module exploits.
    """

    def __init__(self, wavevectors, cos_coefs, sin_coefs, name="trig"):
        self.wavevectors = np.atleast_2d(np.asarray(wavevectors, dtype=float))
        self.cos_coefs = np.asarray(cos_coefs, dtype=float)
        self.sin_coefs = np.asarray(sin_coefs, dtype=float)
        self.name = name
        n = self.wavevectors.shape[0]
        if self.cos_coefs.shape != (n,) or self.sin_coefs.shape != (n,):
            raise ValueError("one cos and one sin coefficient per wavevector")

    @property
    def dim(self):
        return self.wavevectors.shape[1]

    def __call__(self, x):
        arg = np.asarray(x, dtype=float) @ self.wavevectors.T
        return np.cos(arg) @ self.cos_coefs + np.sin(arg) @ self.sin_coefs

    def __repr__(self):
        return f"TrigPolynomial(name={self.name!r}, n_terms={len(self.cos_coefs)})"


# -- arctan / arsinh family ------------------------------------------------
#
# Driver coordinates i < n follow dX = -sin X cos^3 X dt + cos^2 X dW^i, so
# X^i = arctan(W^i). The optional coupled coordinate collects
# sum_i arsinh(W^i) + W^n.


def _arctan_parts(xd):
    s, c = np.sin(xd), np.cos(xd)
    mu = -s * c**3
    dmu = -(c**4) + 3 * s**2 * c**2
    ddmu = 10 * s * c**3 - 6 * s**3 * c
    sig = c**2
    dsig = -2 * s * c
    ddsig = -2 * (c**2 - s**2)
    return s, c, mu, dmu, ddmu, sig, dsig, ddsig


def arctan_model(n_drivers, coupled=True, name=None, own_noise=True):
    """Arctan-driver model; ``arctan_model(4)`` is the 5-d benchmark.

    ``own_noise=False`` drops the coupled coordinate's private Brownian
    motion, leaving m = n_drivers.
    """
    if n_drivers < 1:
        raise ValueError("n_drivers must be >= 1")
    n = n_drivers
    d = n + 1 if coupled else n
    m = n if (coupled and not own_noise) else d

    def drift(x):
        x = np.asarray(x, dtype=float)
        xd = x[..., :n]
        out = np.zeros(x.shape)
        out[..., :n] = -np.sin(xd) * np.cos(xd) ** 3
        if coupled:
            out[..., n] = np.sum(-0.5 * np.sin(xd) * np.cos(xd) ** 2, axis=-1)
        return out

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        xd = x[..., :n]
        out = np.zeros(x.shape + (d,))
        idx = np.arange(n)
        out[..., idx, idx] = np.cos(xd) ** 2
        if coupled:
            out[..., n, :n] = np.cos(xd)
            out[..., n, n] = 1.0
        return out[..., :m]

    def derivative_ops(x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        s, c, mu, dmu, ddmu, sig, dsig, ddsig = _arctan_parts(x[..., :n])
        c2, c4 = c**2, c**4
        lk_sigma = np.zeros(shape + (d, d, d))
        l0_sigma = np.zeros(shape + (d, d))
        lk_mu = np.zeros(shape + (d, d))
        l0_mu = np.zeros(shape + (d,))
        idx = np.arange(n)
        # Every driver-row coefficient depends on its own coordinate only, and
        # L^i g = cos^2(x_i) g' there; L^0 g = mu_i g' + 1/2 cos^4(x_i) g''.
        lk_sigma[..., idx, idx, idx] = c2 * dsig
        l0_sigma[..., idx, idx] = mu * dsig + 0.5 * c4 * ddsig
        lk_mu[..., idx, idx] = c2 * dmu
        l0_mu[..., :n] = mu * dmu + 0.5 * c4 * ddmu
        if coupled:
            # mu^n = sum_i h(x_i), h = -1/2 sin cos^2; sigma^{n,i} = cos x_i
            dh = -0.5 * c**3 + s**2 * c
            ddh = 3.5 * s * c2 - s**3
            lk_sigma[..., idx, n, idx] = c2 * (-s)
            l0_sigma[..., n, idx] = mu * (-s) + 0.5 * c4 * (-c)
            lk_mu[..., idx, n] = c2 * dh
            l0_mu[..., n] = np.sum(mu * dh + 0.5 * c4 * ddh, axis=-1)
        return GeneratorTerms(lk_sigma[..., :m, :, :m], l0_sigma[..., :m], lk_mu[..., :m, :], l0_mu)

    if name is None:
        name = f"arctan{n}" + ("c" if coupled else "") + ("" if m == d else "q")
    return SdeModel(
        name=name,
        dim_state=d,
        dim_noise=m,
        drift=drift,
        diffusion=diffusion,
        x0=np.zeros(d),
        horizon=1.0,
        derivative_ops=derivative_ops,
        lsigma_diagonal=True,
    )


def arctan_functional(n_drivers, coupled=True):
    """cos(sum_i x^i) - 20 sum_{i < n} sin(x^i) on the arctan family."""
    n = n_drivers
    d = n + 1 if coupled else n
    waves = np.vstack([np.ones(d), np.eye(n, d)])
    cos_coefs = np.r_[1.0, np.zeros(n)]
    sin_coefs = np.r_[0.0, np.full(n, -20.0)]
    return TrigPolynomial(waves, cos_coefs, sin_coefs, name=f"arctan{n}" + ("c" if coupled else "") + "-f")


PUBLISHED_REFERENCE_5D = 0.002069


def example5d_model():
    """The 5-dimensional benchmark SDE with its published reference value."""
    model = arctan_model(4, coupled=True, name="example5d")
    return _replace(model, reference_expectation=PUBLISHED_REFERENCE_5D, reference_source="published")


def example5d_functional():
    return arctan_functional(4, coupled=True)


def _replace(model, **changes):
    from dataclasses import replace

    return replace(model, **changes)


def rotating_model():
    """2-d toy with non-diagonal L^k sigma^{rl}; relies on finite differences."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        out[..., 0] = -0.5 * np.sin(x[..., 0])
        out[..., 1] = -0.5 * np.sin(x[..., 1]) + 0.2 * np.cos(x[..., 0])
        return out

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (2,))
        out[..., 0, 0] = 1.0 + 0.3 * np.cos(x[..., 1])
        out[..., 0, 1] = 0.4 * np.sin(x[..., 0])
        out[..., 1, 0] = 0.3 * np.sin(x[..., 1])
        out[..., 1, 1] = 0.8 + 0.2 * np.cos(x[..., 0])
        return out

    return SdeModel("rotating2d", 2, 2, drift, diffusion, x0=np.array([0.1, -0.2]))


def constant_model(mu, sigma, x0=None, name="constant"):
    """Arithmetic Brownian motion with constant drift and diffusion."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d, m = sigma.shape
    if mu.shape != (d,):
        raise ValueError("mu and sigma dimensions disagree")

    def drift(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(mu, x.shape).copy()

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(sigma, x.shape[:-1] + (d, m)).copy()

    return SdeModel(
        name,
        d,
        m,
        drift,
        diffusion,
        x0=np.zeros(d) if x0 is None else x0,
        lsigma_diagonal=True,
        constant_coefficients=(mu, sigma),
    )


def normal_expectation(g, abs_tol=1e-12, limit=200):
    """E[g(W)] for W standard normal by adaptive quadrature on the real line."""
    dens = lambda w: g(w) * np.exp(-0.5 * w * w) / np.sqrt(2 * np.pi)
    value, err, info = integrate.quad(dens, -np.inf, np.inf, epsabs=abs_tol, epsrel=0.0, limit=limit, full_output=1)[:3]
    if err > abs_tol or info.get("last", 0) >= limit:
        raise QuadratureError(f"quadrature did not reach abs_tol={abs_tol:g} (error estimate {err:g})")
    return value


def reference_expectation_by_quadrature(model, functional=None, abs_tol=1e-12, limit=200):
    """E[f(X_T)] under the exact law of an arctan-family model at T = 1.

    The sine terms vanish by odd symmetry and the cosine factorises over the
    independent Brownian coordinates.
    """
    fam = _arctan_signature(model)
    if fam is None or model.horizon != 1.0:
        raise ValueError(f"no quadrature route for model {model.name!r}")
    n, coupled = fam
    if coupled:
        c = normal_expectation(lambda w: np.cos(np.arctan(w) + np.arcsinh(w)), abs_tol, limit)
        tail = normal_expectation(np.cos, abs_tol, limit)
    else:
        c = normal_expectation(lambda w: np.cos(np.arctan(w)), abs_tol, limit)
        tail = 1.0
    return c**n * tail


def _arctan_signature(model):
    name = model.name
    if name == "example5d":
        return 4, True
    if name.startswith("arctan"):
        body = name[len("arctan"):]
        coupled = body.endswith("c")
        try:
            return int(body.rstrip("c")), coupled
        except ValueError:
            return None
    return None


MODEL_NAMES = ("example5d", "toy1d", "toy2d", "rotating2d")


def get_model(name):
    """Resolve a model name to ``(model, functional)``."""
    if name == "example5d":
        return example5d_model(), example5d_functional()
    if name in ("toy1d", "toy2d"):
        coupled = name == "toy2d"
        model = arctan_model(1, coupled=coupled)
        ref = reference_expectation_by_quadrature(model)
        return _replace(model, reference_expectation=ref, reference_source="quadrature"), arctan_functional(1, coupled)
    if name == "rotating2d":
        return rotating_model(), TrigPolynomial([[1.0, 1.0], [1.0, 0.0]], [1.0, 0.0], [0.0, -20.0], name="rotating2d-f")
    raise KeyError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
