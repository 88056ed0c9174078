"""Seeded random variate generators used by the sampler and the simulator.

All generators take a ``numpy.random.Generator``.  Streams are derived from a
``(seed, stream)`` pair through :class:`numpy.random.SeedSequence` so that
parallel replicates never share state.
"""

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from .core import NumericalError, ValidationError

TAIL_SWITCH = 5.0


def make_rng(seed, stream=0):
    """Independent PCG64 generator for ``(seed, stream)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


def _log_gamma_variates(shape, rng):
    """log of Gamma(shape, 1) variates; stable for shapes far below 1.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a) for a < 1 so that tiny shapes do not
    underflow to exactly zero.
    """
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape))
    out = np.log(g)
    if np.any(small):
        u = 1.0 - rng.random(shape.shape)
        out = np.where(small, out + np.log(u) / np.where(small, shape, 1.0), out)
    return out


def draw_dirichlet(alpha, rng, axis=-1):
    """Dirichlet draw(s) by gamma normalization along ``axis``.

    ``alpha`` may be a batch of parameter vectors; entries equal to zero mark
    structurally absent categories and receive probability zero.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise ValidationError("Dirichlet parameters must be positive")
    present = alpha > 0
    if not np.all(np.any(present, axis=axis)):
        raise ValidationError("Dirichlet parameters must be positive")
    logg = _log_gamma_variates(np.where(present, alpha, 1.0), rng)
    logg = np.where(present, logg, -np.inf)
    return np.exp(logg - logsumexp(logg, axis=axis, keepdims=True))


def draw_categorical(p, rng):
    """Index in ``0..d-1`` drawn with probabilities ``p``.

    ``p`` may be 2-D, in which case one index is drawn per row.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-8):
        raise ValidationError("p must be a probability vector")
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1]) * cdf[..., -1]
    if p.ndim == 1:
        return int(min(np.searchsorted(cdf, u, side="right"), p.shape[-1] - 1))
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[-1] - 1)


def draw_categorical_log(logp, rng):
    """Row-wise categorical draws from unnormalized log-probabilities."""
    logp = np.asarray(logp, dtype=float)
    m = logp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericalError("all class log-probabilities are -inf for some individual")
    p = np.exp(logp - m)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(logp.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, logp.shape[1] - 1)


def _lower_tail_std(a, rng):
    """Standard normal variates conditioned on X > a (vectorized)."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    inner = a <= TAIL_SWITCH
    if np.any(inner):
        ai = a[inner]
        u = 1.0 - rng.random(ai.shape)
        # P(X > x) = U * P(X > a), solved on the survival scale for accuracy
        x = -ndtri(u * ndtr(-ai))
        out[inner] = np.maximum(x, np.nextafter(ai, np.inf))
    tail = np.flatnonzero(~inner)
    while tail.size:
        at = a[tail]
        lam = 0.5 * (at + np.sqrt(at * at + 4.0))
        x = at + rng.exponential(1.0, at.shape) / lam
        accept = rng.random(at.shape) <= np.exp(-0.5 * (x - lam) ** 2)
        out[tail[accept]] = x[accept]
        tail = tail[~accept]
    return out


def draw_truncnormal(mean, lower, upper, rng):
    """Unit-variance normal with location ``mean`` truncated to ``(lower, upper)``.

    Broadcasts over arrays.  One-sided truncation (the only case the probit
    augmentation needs) uses inverse-CDF sampling up to five standard deviations
    into the tail and exponential rejection beyond.  Two-sided finite intervals
    fall back to inverse-CDF sampling on the narrower tail.
    """
    mean, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, lower, upper)))
    if np.any(~(lower < upper)):
        raise ValidationError("truncation interval is empty")
    scalar = mean.ndim == 0
    mean, lower, upper = (np.atleast_1d(v).astype(float) for v in (mean, lower, upper))
    out = np.empty_like(mean)
    lo_only = np.isfinite(lower) & ~np.isfinite(upper)
    hi_only = ~np.isfinite(lower) & np.isfinite(upper)
    free = ~np.isfinite(lower) & ~np.isfinite(upper)
    both = np.isfinite(lower) & np.isfinite(upper)
    if np.any(lo_only):
        out[lo_only] = mean[lo_only] + _lower_tail_std(lower[lo_only] - mean[lo_only], rng)
    if np.any(hi_only):
        out[hi_only] = mean[hi_only] - _lower_tail_std(mean[hi_only] - upper[hi_only], rng)
    if np.any(free):
        out[free] = mean[free] + rng.standard_normal(int(free.sum()))
    if np.any(both):
        a, b = lower[both] - mean[both], upper[both] - mean[both]
        flip = a > 0  # sample on the side where the CDF is not saturated
        lo = np.where(flip, -b, a)
        hi = np.where(flip, -a, b)
        plo, phi = ndtr(lo), ndtr(hi)
        x = ndtri(plo + rng.random(a.shape) * (phi - plo))
        x = np.clip(x, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
        out[both] = mean[both] + np.where(flip, -x, x)
    return out[0] if scalar else out


def draw_mvnormal(mean, cov, rng, ridge=1e-8, max_ridge=1e-4):
    """Multivariate normal draw ``mean + L z`` with ``L`` the lower Cholesky factor.

    A ridge is added only if the plain factorization fails; it is escalated
    tenfold up to ``max_ridge`` before giving up.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    L = cholesky_with_ridge(cov, ridge, max_ridge)[0]
    return mean + L @ rng.standard_normal(mean.shape[0])


def cholesky_with_ridge(mat, ridge=1e-8, max_ridge=1e-4, relative=False):
    """Lower Cholesky factor of a symmetric matrix with escalating diagonal ridge.

    Returns ``(L, ridge_used)``.  With ``relative=True`` the ridge is scaled by
    the mean absolute diagonal.
    """
    mat = 0.5 * (mat + mat.T)
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = np.mean(np.abs(np.diag(mat))) if relative else 1.0
    scale = scale if scale > 0 else 1.0
    eps = ridge
    while eps <= max_ridge * (1 + 1e-12):
        try:
            return np.linalg.cholesky(mat + eps * scale * np.eye(mat.shape[0])), eps
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NumericalError("Cholesky factorization failed after ridge escalation")


def draw_permutation(K, rng):
    """Uniform random permutation of ``0..K-1`` (Fisher-Yates via numpy)."""
    if K < 1:
        raise ValidationError("K must be at least 1")
    return rng.permutation(K)
