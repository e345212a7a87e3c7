"""Random-variate building blocks for the Gibbs sweeps.

The truncated normal uses Robert's exponential-rejection tail algorithm and
is vectorized so a whole latent vector can be refreshed at once. General
generalized-inverse-Gaussian draws delegate to scipy's geninvgauss behind
the (lambda, chi, psi) parameterization; the lambda = 1/2 case needed by
the mixing-latent conditional also has a fast vectorized path via the
inverse-Gaussian reciprocal identity.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import geninvgauss

__all__ = ["gig_sample", "gig_sample_half", "trunc_normal_sample",
           "trunc_normal_interval", "slice_sample"]


def gig_sample(lam: float, chi: float, psi: float, rng: np.random.Generator,
               size=None):
    """Draw from GIG(lam, chi, psi), density prop. to
    x^(lam-1) exp(-(chi/x + psi*x)/2) on x > 0. Valid for all real lam.
    """
    if not (np.all(np.asarray(chi) > 0) and np.all(np.asarray(psi) > 0)):
        raise ValueError("gig_sample requires chi > 0 and psi > 0")
    scale = np.sqrt(chi / psi)
    b = np.sqrt(chi * psi)
    return scale * geninvgauss.rvs(lam, b, size=size, random_state=rng)


def gig_sample_half(chi, psi, rng: np.random.Generator):
    """Vectorized GIG(1/2, chi, psi) via 1/X ~ GIG(-1/2, psi, chi), the
    inverse-Gaussian law IG(mean sqrt(psi/chi)... inverted. Arrays broadcast.
    """
    chi = np.asarray(chi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(chi <= 0) or np.any(psi <= 0):
        raise ValueError("gig_sample_half requires chi > 0 and psi > 0")
    mean = np.sqrt(psi / chi)
    return 1.0 / rng.wald(mean, np.broadcast_to(psi, mean.shape))


def _trunc_std_normal_lower(a: np.ndarray, rng: np.random.Generator):
    """Standard normal conditioned to (a, inf), elementwise over flat a."""
    out = np.empty_like(a)

    # plain rejection where the acceptance region keeps decent mass
    todo = np.where(a < 0.3)[0]
    while todo.size:
        z = rng.standard_normal(todo.size)
        ok = z >= a[todo]
        out[todo[ok]] = z[ok]
        todo = todo[~ok]

    # Robert's translated-exponential rejection in the tail
    todo = np.where(a >= 0.3)[0]
    while todo.size:
        aa = a[todo]
        alpha = 0.5 * (aa + np.sqrt(aa * aa + 4.0))
        z = aa + rng.standard_exponential(todo.size) / alpha
        ok = np.log(rng.random(todo.size)) <= -0.5 * (z - alpha) ** 2
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def _trunc_std_normal_interval(lo: np.ndarray, hi: np.ndarray,
                               rng: np.random.Generator):
    """Standard normal conditioned to (lo, hi), elementwise over flat arrays.

    Mixed strategy: plain rejection when the interval straddles zero with
    decent width, translated-exponential rejection with an upper cap for
    wide tail intervals, uniform rejection otherwise (narrow intervals).
    """
    out = np.empty_like(lo)
    width = hi - lo
    straddle = (lo <= 0) & (hi >= 0)
    plain = straddle & (width >= 0.7)
    tail_lo = (lo > 0) & (width >= 0.5)
    tail_hi = (hi < 0) & (width >= 0.5)
    uniform = ~(plain | tail_lo | tail_hi)

    todo = np.where(plain)[0]
    while todo.size:
        z = rng.standard_normal(todo.size)
        ok = (z >= lo[todo]) & (z <= hi[todo])
        out[todo[ok]] = z[ok]
        todo = todo[~ok]

    for sel, flip in ((np.where(tail_lo)[0], False), (np.where(tail_hi)[0], True)):
        todo = sel
        while todo.size:
            a = -hi[todo] if flip else lo[todo]
            b = -lo[todo] if flip else hi[todo]
            alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
            z = a + rng.standard_exponential(todo.size) / alpha
            ok = (np.log(rng.random(todo.size)) <= -0.5 * (z - alpha) ** 2) \
                & (z <= b)
            out[todo[ok]] = -z[ok] if flip else z[ok]
            todo = todo[~ok]

    todo = np.where(uniform)[0]
    while todo.size:
        a, b = lo[todo], hi[todo]
        c = np.clip(0.0, a, b)      # density peak location inside the interval
        z = a + (b - a) * rng.random(todo.size)
        ok = np.log(rng.random(todo.size)) <= 0.5 * (c * c - z * z)
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def trunc_normal_interval(mean, sd, lower, upper, rng: np.random.Generator):
    """Normal(mean, sd^2) conditioned to (lower, upper), broadcasting."""
    mean_a, sd_a, lo_a, hi_a = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(sd, dtype=float),
        np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    if np.any(sd_a <= 0) or np.any(hi_a <= lo_a):
        raise ValueError("need sd > 0 and upper > lower")
    lo = ((lo_a - mean_a) / sd_a).ravel()
    hi = ((hi_a - mean_a) / sd_a).ravel()
    z = _trunc_std_normal_interval(lo, hi, rng).reshape(mean_a.shape)
    out = np.clip(mean_a + sd_a * z,
                  np.nextafter(lo_a, np.inf), np.nextafter(hi_a, -np.inf))
    if all(np.isscalar(v) for v in (mean, sd, lower, upper)):
        return float(out)
    return out


def trunc_normal_sample(mean, sd, lower, rng: np.random.Generator):
    """Normal(mean, sd^2) conditioned to (lower, inf).

    Scalar arguments give a scalar; arrays broadcast elementwise. Robust far
    into the upper tail (lower up to mean + 8 sd and beyond).
    """
    mean_a, sd_a, lower_a = np.broadcast_arrays(
        np.asarray(mean, dtype=float),
        np.asarray(sd, dtype=float),
        np.asarray(lower, dtype=float),
    )
    if np.any(sd_a <= 0):
        raise ValueError("sd must be positive")
    a = ((lower_a - mean_a) / sd_a).ravel()
    z = _trunc_std_normal_lower(a, rng).reshape(mean_a.shape)
    out = mean_a + sd_a * z
    # guard against equality at the boundary from floating roundoff
    out = np.maximum(out, np.nextafter(lower_a, np.inf))
    if np.isscalar(mean) and np.isscalar(sd) and np.isscalar(lower):
        return float(out)
    return out


def slice_sample(x0: float, logpdf, rng: np.random.Generator,
                 width: float = 1.0, max_steps: int = 50) -> float:
    """One univariate slice-sampling update (stepping out + shrinkage)."""
    logy = logpdf(x0) + math.log(rng.random())
    u = rng.random()
    lo = x0 - width * u
    hi = lo + width
    steps = max_steps
    while steps > 0 and logpdf(lo) > logy:
        lo -= width
        steps -= 1
    steps = max_steps
    while steps > 0 and logpdf(hi) > logy:
        hi += width
        steps -= 1
    while True:
        x1 = lo + rng.random() * (hi - lo)
        if logpdf(x1) > logy:
            return x1
        if x1 < x0:
            lo = x1
        else:
            hi = x1
