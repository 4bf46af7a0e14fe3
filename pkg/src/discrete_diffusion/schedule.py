"""Variance schedules for the Gaussian corruption of one-hot vectors."""

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

_COSINE_OFFSET = 0.008
_COSINE_MAX_BETA = 0.999


@dataclass(frozen=True)
class Schedule:
    """Per-step noise quantities over a horizon of ``T`` steps.

    ``betas`` and ``alphas`` have length ``T + 1`` with a unit-retention
    entry at index 0 (``beta_0 = 0``, ``alpha_0 = 1``) so that step ``t``
    is addressed directly. ``alpha_bars`` has length ``T + 1`` with
    ``alpha_bars[0] == 1``.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def alpha_bar(self, t):
        return alpha_bar(self, t)

    def to_dict(self):
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }


def _check_t(s, t):
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise TypeError(f"timestep must be integer, got {t_arr.dtype}")
    if np.any(t_arr < 0) or np.any(t_arr > s.T):
        raise ValueError(f"timestep out of range [0, {s.T}]: {t}")
    return t_arr


def build_schedule(kind="linear", T=1000, beta_min=1e-4, beta_max=0.02):
    """Build a linear or squared-cosine schedule.

    The cosine kind ignores ``beta_min``/``beta_max`` and clips each
    per-step beta to at most 0.999.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    beta_min = float(beta_min)
    beta_max = float(beta_max)
    if kind == "linear":
        if not (0.0 < beta_min < 1.0 and 0.0 < beta_max < 1.0):
            raise ValueError(f"beta bounds must lie in (0, 1), got [{beta_min}, {beta_max}]")
        if beta_min > beta_max:
            raise ValueError(f"beta_min {beta_min} exceeds beta_max {beta_max}")
        step_betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        grid = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((grid + _COSINE_OFFSET) / (1 + _COSINE_OFFSET) * np.pi / 2) ** 2
        ratio = f[1:] / f[:-1]
        step_betas = np.clip(1.0 - ratio, np.finfo(np.float64).eps, _COSINE_MAX_BETA)

    betas = np.concatenate([[0.0], step_betas])
    alphas = 1.0 - betas
    # cumprod multiplies left to right, so alpha_bars[t] == alpha_bars[t-1] * alphas[t] exactly
    alpha_bars = np.cumprod(alphas)
    return Schedule(kind, T, beta_min, beta_max, betas, alphas, alpha_bars)


def schedule_from_table(kind, T, beta_min, beta_max, betas, alpha_bars):
    """Rebuild a schedule from stored tables without recomputing them."""
    betas = np.array(betas, dtype=np.float64)
    alpha_bars = np.array(alpha_bars, dtype=np.float64)
    if betas.shape != (T + 1,) or alpha_bars.shape != (T + 1,) or alpha_bars[0] != 1.0:
        raise ValueError("schedule tables must have length T + 1 with alpha_bar[0] == 1")
    return Schedule(kind, int(T), float(beta_min), float(beta_max), betas, 1.0 - betas, alpha_bars)


def alpha_bar(s, t):
    """Cumulative signal retention at step ``t`` (scalar or integer array)."""
    t_arr = _check_t(s, t)
    out = s.alpha_bars[t_arr]
    return float(out) if out.ndim == 0 else out


def sampling_timesteps(s, S):
    """``S + 1`` evenly spaced, strictly decreasing indices from ``T`` to 0."""
    if int(S) != S or not 1 <= S <= s.T:
        raise ValueError(f"number of sampling steps must lie in [1, {s.T}], got {S}")
    grid = np.linspace(s.T, 0, int(S) + 1)
    # round half up; np.round's half-to-even would merge neighbours at unit spacing
    return [int(v) for v in np.floor(grid + 0.5)]
