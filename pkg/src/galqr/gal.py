"""Generalized asymmetric Laplace (GAL) distribution family.

The GAL extends the asymmetric Laplace (AL) with a shape parameter ``gamma``
that decouples the mode from the fixed quantile. Everything here is
parameterized so that the ``tau0`` quantile of the error sits exactly at
zero: given a target level ``tau0`` and a shape ``gamma`` inside the
admissible interval, the internal skewness level ``tau`` is adjusted through
``h(gamma)`` and the distribution is realized through the normal-exponential
mixture

    eps = skew * s + A * nu + u * sqrt(sigma * B * nu),

with ``s ~ Normal+(0, sigma^2)``, ``nu`` exponential with *mean* ``sigma``
(so that eps is a sigma-scale family), and ``u ~ Normal(0, 1)``.

The closed-form density is derived from that mixture by integrating out
``s`` analytically; the mixture is the ground truth and the density is
validated against it by quadrature (normalization and mass left of zero)
and by KS agreement with exact sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, logsumexp

__all__ = [
    "GalParams",
    "GalLatents",
    "GalMixture",
    "h_of_gamma",
    "gamma_bounds",
    "adjust_tau",
    "gal_sample",
    "gal_logpdf",
    "galmix_logpdf",
    "galmix_sample",
]

_LOG2 = math.log(2.0)
_GAMMA_SEARCH_MAX = 40.0


def h_of_gamma(gamma):
    """Evaluate h(gamma) = 2 Phi(-|gamma|) exp(gamma^2 / 2).

    Even in gamma, equal to 1 at zero and strictly decreasing in |gamma|.
    Computed in log space so the tiny normal tail and the huge exponential
    never meet in linear space (stable for |gamma| well beyond 30).
    """
    g = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("h_of_gamma requires finite input")
    out = np.exp(_LOG2 + log_ndtr(-np.abs(g)) + 0.5 * g * g)
    return float(out) if np.isscalar(gamma) or g.ndim == 0 else out


def _bisect_h(target: float) -> float:
    """Positive root of h(g) = target, using monotonicity of h in |g|."""
    lo, hi = 0.0, _GAMMA_SEARCH_MAX
    if h_of_gamma(hi) >= target:
        raise ValueError(
            f"h(gamma) = {target:.3g} has no root below gamma = {hi:g}; "
            "tau0 is too extreme"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h_of_gamma(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return 0.5 * (lo + hi)


@lru_cache(maxsize=256)
def gamma_bounds(tau0: float) -> tuple[float, float]:
    """Admissible interval (gamma_L, gamma_U) for the shape at level tau0.

    gamma_U is the positive root of h(gamma) - tau0 and gamma_L the negative
    root of h(gamma) - (1 - tau0); outside this interval the adjusted
    skewness level leaves (0, 1).
    """
    if not 0.0 < tau0 < 1.0:
        raise ValueError(f"tau0 must be in (0, 1), got {tau0}")
    gamma_u = _bisect_h(tau0)
    gamma_l = -_bisect_h(1.0 - tau0)
    return gamma_l, gamma_u


def adjust_tau(tau0: float, gamma: float) -> float:
    """Skewness level tau making the tau0 quantile of the GAL sit at zero.

    tau = I(gamma < 0) + (tau0 - I(gamma < 0)) / h(gamma).
    """
    if not 0.0 < tau0 < 1.0:
        raise ValueError(f"tau0 must be in (0, 1), got {tau0}")
    if not np.isfinite(gamma):
        raise ValueError("gamma must be finite")
    lo, hi = gamma_bounds(tau0)
    if not lo < gamma < hi:
        raise ValueError(
            f"gamma = {gamma:.6g} outside admissible interval "
            f"({lo:.6g}, {hi:.6g}) for tau0 = {tau0:g}"
        )
    ind = 1.0 if gamma < 0 else 0.0
    tau = ind + (tau0 - ind) / h_of_gamma(gamma)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"adjusted tau = {tau} escaped (0, 1)")
    return tau


@dataclass(frozen=True)
class GalParams:
    """Quantile-fixed GAL parameters.

    ``tau`` is the adjusted skewness level derived from (tau0, gamma); A and
    B are the usual AL normal-exponential mixture constants at level tau; C
    is the sign of gamma, and ``skew`` is the coefficient multiplying the
    half-normal latent in the mixture representation. The printed factor
    C|gamma| alone does not put the tau0 quantile at zero; matching the
    h(gamma) quantile-adjustment identity requires rescaling by the adjusted
    level, skew = C |gamma| / (1 - tau) for gamma > 0 and C |gamma| / tau for
    gamma < 0 (equivalently, the skewness of the underlying skew-normal
    construction). Validated by quadrature: mass left of zero equals tau0.
    """

    tau0: float
    gamma: float
    sigma: float
    tau: float = field(init=False)
    A: float = field(init=False)
    B: float = field(init=False)
    C: float = field(init=False)
    skew: float = field(init=False)

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        tau = adjust_tau(self.tau0, self.gamma)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "A", (1.0 - 2.0 * tau) / (tau * (1.0 - tau)))
        object.__setattr__(self, "B", 2.0 / (tau * (1.0 - tau)))
        object.__setattr__(self, "C", -1.0 if self.gamma < 0 else 1.0)
        if self.gamma > 0:
            skew = self.gamma / (1.0 - tau)
        elif self.gamma < 0:
            skew = self.gamma / tau
        else:
            skew = 0.0
        object.__setattr__(self, "skew", skew)


@dataclass
class GalLatents:
    """Per-observation mixture latents: s >= 0 (half normal), nu > 0 (exp)."""

    s: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        if np.any(self.s < 0):
            raise ValueError("latent s must be nonnegative")
        if np.any(self.nu <= 0):
            raise ValueError("latent nu must be positive")


def gal_sample(params: GalParams, rng: np.random.Generator, size=None):
    """Exact draw(s) through the mixture representation.

    The tau0 quantile of the output is zero and sigma acts as a pure scale.
    """
    z0 = rng.standard_normal(size)
    w = rng.standard_exponential(size)
    u = rng.standard_normal(size)
    return params.sigma * (
        params.skew * np.abs(z0) + params.A * w + u * np.sqrt(params.B * w)
    )


def _log_ndtr_diff(x1, x2):
    """Stable log(Phi(x1) - Phi(x2)) for x1 >= x2 (elementwise)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    use_sf = x1 + x2 > 0
    # CDF side: log(Phi(x1)) + log1p(-Phi(x2)/Phi(x1))
    a_cdf = log_ndtr(np.where(use_sf, 0.0, x1))
    b_cdf = log_ndtr(np.where(use_sf, -1.0, x2))
    # survival side: Phi(x1) - Phi(x2) = Q(x2) - Q(x1)
    a_sf = log_ndtr(np.where(use_sf, -x2, 0.0))
    b_sf = log_ndtr(np.where(use_sf, -x1, -1.0))
    a = np.where(use_sf, a_sf, a_cdf)
    b = np.where(use_sf, b_sf, b_cdf)
    with np.errstate(divide="ignore"):
        out = a + np.log1p(-np.exp(np.minimum(b - a, 0.0)))
    return out


def _al_logpdf(eps, tau: float, sigma: float):
    z = np.asarray(eps, dtype=float) / sigma
    rho = z * (tau - (z < 0))
    return math.log(tau * (1.0 - tau) / sigma) - rho


def _branch_terms(estar, tau: float, alpha: float):
    """Unnormalized log masses of the two integral pieces of the density.

    Piece 1 covers the half-normal latent below the sign-change point
    s* = eps*/alpha (present only when s* > 0); piece 2 covers the rest.
    These double as the mixing weights of the exact two-piece truncated
    normal conditional of the latent s given a residual.
    """
    k1 = tau - (1.0 if alpha < 0 else 0.0)
    k2 = tau - (1.0 if alpha > 0 else 0.0)
    sstar = estar / alpha
    pos = sstar > 0
    spos = np.where(pos, sstar, 0.0)
    term2 = -k2 * estar + 0.5 * (k2 * alpha) ** 2 + log_ndtr(k2 * alpha - spos)
    with np.errstate(invalid="ignore"):
        diff = _log_ndtr_diff(np.where(pos, sstar, 1.0) - k1 * alpha, -k1 * alpha)
    term1 = np.where(pos, -k1 * estar + 0.5 * (k1 * alpha) ** 2 + diff, -np.inf)
    return term1, term2, sstar, k1, k2


def gal_logpdf(eps, params: GalParams):
    """Log density of the quantile-fixed GAL, finite for all finite eps.

    Derived by integrating the half-normal latent out of the mixture
    representation; gamma = 0 routes to the AL closed form (the exact
    pointwise limit). Fully vectorized over ``eps``.
    """
    if params.gamma == 0.0:
        out = _al_logpdf(eps, params.tau, params.sigma)
        return float(out) if np.isscalar(eps) else out

    p = params.tau
    estar = np.asarray(eps, dtype=float) / params.sigma
    base = math.log(2.0 * p * (1.0 - p) / params.sigma)
    term1, term2, _, _, _ = _branch_terms(estar, p, params.skew)
    out = base + np.logaddexp(term1, term2)
    return float(out) if np.isscalar(eps) else out


@dataclass(frozen=True)
class GalMixture:
    """Finite mixture of quantile-fixed GAL components sharing tau0.

    Mixing the quantile-fixed components preserves the zero tau0 quantile,
    since the mixture CDF at zero is the weight-average of the component
    CDFs. ``concentration`` is the Dirichlet hyperparameter of the truncated
    stick-breaking prior, stored alongside the realized weights.
    """

    weights: np.ndarray
    components: tuple[GalParams, ...]
    concentration: float = 1.0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.components) != w.size or w.size < 1:
            raise ValueError("weights and components must align, K >= 1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a simplex vector (sum 1 within 1e-12)")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        tau0s = {c.tau0 for c in self.components}
        if len(tau0s) != 1:
            raise ValueError("all mixture components must share tau0")

    @property
    def K_eps(self) -> int:
        return len(self.components)

    @property
    def tau0(self) -> float:
        return self.components[0].tau0


def galmix_logpdf(eps, mix: GalMixture):
    """Log of the weighted component density sum (log-sum-exp)."""
    eps_arr = np.asarray(eps, dtype=float)
    stack = np.stack([gal_logpdf(eps_arr, c) for c in mix.components])
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    out = logsumexp(stack + logw.reshape((-1,) + (1,) * eps_arr.ndim), axis=0)
    return float(out) if np.isscalar(eps) else out


def galmix_sample(mix: GalMixture, rng: np.random.Generator, size=None):
    """Draw from the mixture: pick a component by weight, then gal_sample."""
    if size is None:
        k = rng.choice(mix.K_eps, p=mix.weights)
        return gal_sample(mix.components[k], rng)
    n = int(np.prod(size))
    ks = rng.choice(mix.K_eps, p=mix.weights, size=n)
    out = np.empty(n)
    for k in range(mix.K_eps):
        sel = ks == k
        if sel.any():
            out[sel] = gal_sample(mix.components[k], rng, size=int(sel.sum()))
    return out.reshape(size)
