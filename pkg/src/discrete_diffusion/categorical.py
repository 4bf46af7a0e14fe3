"""One-hot vectors and the Gaussian corruption that acts on them.

All functions operate on the last axis as the class axis and broadcast
over any leading batch/sequence axes. Randomness always comes from an
explicit ``numpy.random.Generator``.
"""

from typing import NamedTuple

import numpy as np

from .schedule import alpha_bar

RENOISE_VARIANTS = ("alpha", "alpha_bar")


class NoisyLabel(NamedTuple):
    values: np.ndarray
    t: object


def _expand_coef(coef, ndim):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def _check_finite(x, what):
    if np.isnan(x).any():
        raise ValueError(f"{what} contains NaN")


def one_hot(index, K, dtype=np.float64):
    """Dense one-hot rendering of ``index`` over ``K`` classes."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise TypeError("index must be integer")
    if np.any(index < 0) or np.any(index >= K):
        raise ValueError(f"index out of range [0, {K})")
    return np.eye(int(K), dtype=dtype)[index]


def _gaussian_mix(clean, coef, rng):
    """``sqrt(coef) * clean + sqrt(1 - coef) * eps`` with fresh standard-normal eps."""
    coef = _expand_coef(coef, clean.ndim)
    eps = rng.standard_normal(clean.shape)
    return np.sqrt(coef) * clean + np.sqrt(1.0 - coef) * eps, eps


def corrupt(y0, t, s, rng, return_noise=False):
    """Sample y_t ~ N(sqrt(abar_t) y0, (1 - abar_t) I).

    ``t`` may be a scalar or an integer array matching the leading axes of
    ``y0``. With ``return_noise`` the drawn standard-normal noise is returned
    too (the regression target of the noise-prediction objective).
    """
    y0 = np.asarray(y0, dtype=np.float64)
    values, eps = _gaussian_mix(y0, alpha_bar(s, t), rng)
    noisy = NoisyLabel(values, t)
    return (noisy, eps) if return_noise else noisy


def discretize(d):
    """One-hot of the argmax along the class axis; ties go to the lowest index."""
    d = np.asarray(d)
    if d.shape[-1] < 1:
        raise ValueError("need at least one class")
    _check_finite(d, "distribution")
    return one_hot(np.argmax(d, axis=-1), d.shape[-1])


def renoise_coefficient(s, t_prev, variant="alpha_bar"):
    if variant not in RENOISE_VARIANTS:
        raise ValueError(f"unknown renoise variant {variant!r}")
    t_arr = np.asarray(t_prev)
    if np.any(t_arr < 0) or np.any(t_arr > s.T):
        raise ValueError(f"timestep out of range [0, {s.T}]: {t_prev}")
    table = s.alphas if variant == "alpha" else s.alpha_bars
    return table[t_arr]


def renoise(y_hat, t_prev, s, variant="alpha_bar", rng=None):
    """Re-inject Gaussian noise into a discretized prediction.

    ``variant="alpha"`` uses the per-step retention ``alpha_{t_prev}``;
    ``variant="alpha_bar"`` uses the cumulative ``alpha_bar_{t_prev}`` so the
    result has the forward marginal at ``t_prev``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    coef = renoise_coefficient(s, t_prev, variant)
    if np.all(coef == 1.0):
        return NoisyLabel(y_hat.copy(), t_prev)
    values, _ = _gaussian_mix(y_hat, coef, rng)
    return NoisyLabel(values, t_prev)


def softmax(logits, temperature=1.0):
    """Numerically stable softmax along the class axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits, "logits")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_categorical(probs, rng):
    """Draw one class per distribution by inverse-CDF sampling; returns one-hots."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_finite(probs, "probabilities")
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    K = probs.shape[-1]
    cdf = np.cumsum(probs, axis=-1)
    cdf = cdf / cdf[..., -1:]
    # u in (0, 1] so a point mass at index 0 is never skipped
    u = 1.0 - rng.random(probs.shape[:-1])
    index = np.minimum((u[..., None] > cdf).sum(axis=-1), K - 1)
    return one_hot(index, K)
