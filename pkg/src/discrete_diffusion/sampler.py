"""Reverse process: predict, project to a one-hot, re-noise, repeat."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .categorical import RENOISE_VARIANTS, discretize, renoise, sample_categorical, softmax
from .denoiser import Condition, _as_sequence, denoiser_graph
from .schedule import sampling_timesteps

TO_ONE = ("argmax_onehot", "softmax_sample")


@dataclass
class SampleConfig:
    steps: int = 20
    to_one: str = "argmax_onehot"
    guidance_scale: float = 1.0
    renoise_variant: str = "alpha_bar"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.to_one not in TO_ONE:
            raise ValueError(f"to_one must be one of {TO_ONE}, got {self.to_one!r}")
        if self.renoise_variant not in RENOISE_VARIANTS:
            raise ValueError(f"renoise_variant must be one of {RENOISE_VARIANTS}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class Trajectory:
    """Per-step arrays stacked on a leading step axis of length S."""

    t: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    argmax: list = field(default_factory=list)
    final: np.ndarray = None

    def __len__(self):
        return len(self.t)


def denoiser_logits(params, y_t, t, c):
    """Forward pass without recording a differentiation graph."""
    y = _as_sequence(params.spec, y_t, params.dtype)
    P = {k: ag.Tensor(v) for k, v in params.tensors.items()}
    cond = ag.Tensor(np.asarray(c.vector, dtype=params.dtype))
    out = denoiser_graph(P, params.spec, ag.Tensor(y), t, cond, c.is_null).data.astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite logits")
    return out


def guided_logits(cond, uncond, w):
    """``uncond + w * (cond - uncond)``."""
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {cond.shape} vs {uncond.shape}")
    return uncond + w * (cond - uncond)


def predict_logits(params, y, t, c, w):
    logits = denoiser_logits(params, y, t, c)
    if w == 1.0:
        return logits
    null = Condition.null(len(c), params.spec.cond_dim)
    return guided_logits(logits, denoiser_logits(params, y, t, null), w)


def sample(params, c, cfg, s, rng):
    """Run the reverse loop for a batch of conditions.

    Starts from pure standard-normal noise at ``t = T`` and visits the
    ``cfg.steps + 1`` evenly spaced timesteps. Returns the final one-hots
    ``(B, N, K)`` and the :class:`Trajectory`.
    """
    if cfg.steps > s.T:
        raise ValueError(f"steps {cfg.steps} exceeds schedule horizon {s.T}")
    spec = params.spec
    times = sampling_timesteps(s, cfg.steps)
    y = rng.standard_normal((len(c), spec.seq_len, spec.K))
    traj = Trajectory()
    for t, t_prev in zip(times[:-1], times[1:]):
        logits = predict_logits(params, y, np.full(len(c), t), c, cfg.guidance_scale)
        probs = softmax(logits, cfg.temperature)
        if cfg.to_one == "argmax_onehot":
            y_hat = discretize(logits)
        else:
            y_hat = sample_categorical(probs, rng)
        traj.t.append(t)
        traj.inputs.append(y)
        traj.logits.append(logits)
        traj.probs.append(probs)
        traj.argmax.append(np.argmax(probs, axis=-1))
        if t_prev > 0:
            y = renoise(y_hat, t_prev, s, cfg.renoise_variant, rng).values
    traj.final = y_hat
    return y_hat, traj


def onehot_sharpness(traj):
    """Mean (over samples and tokens) maximum class probability at each step."""
    if not len(traj):
        raise ValueError("empty trajectory")
    return np.array([float(p.max(axis=-1).mean()) for p in traj.probs])


def argmax_stability(traj, last=3):
    """Fraction of samples whose argmax is unchanged over the final ``last`` steps."""
    if len(traj) < last:
        raise ValueError(f"trajectory shorter than {last} steps")
    tail = np.stack(traj.argmax[-last:])  # (last, B, N)
    same = (tail == tail[-1]).all(axis=0).all(axis=-1)
    return float(same.mean())


def trajectory_records(traj, sample_ids=None):
    """One JSON-ready dict per (sample, step) for heatmap regeneration."""
    B = traj.probs[0].shape[0]
    ids = range(B) if sample_ids is None else sample_ids
    for b in ids:
        for j, t in enumerate(traj.t):
            probs = traj.probs[j][b]
            yield {
                "sample": int(b),
                "step": j,
                "t": int(t),
                "probs": np.round(probs, 8).tolist(),
                "argmax": traj.argmax[j][b].tolist(),
                "sharpness": float(probs.max(axis=-1).mean()),
            }
