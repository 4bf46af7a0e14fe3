"""Objectives, condition dropout, K-fold timestep expansion and the optimizer step."""

import math
import time
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .categorical import corrupt, one_hot
from .denoiser import Condition, denoiser_graph, encoder_graph
from .schedule import alpha_bar

LOSS_KINDS = ("weighted_ce", "unweighted_ce", "mse_noise")


class DivergenceError(FloatingPointError):
    """A training step produced a non-finite loss; parameters were left untouched."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = 2
    grad_clip_norm: float = 3.0
    loss_kind: str = "weighted_ce"
    cfg_dropout_prob: float = 0.1
    kfold: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ValueError("cfg_dropout_prob must lie in [0, 1]")
        for name in ("epochs", "batch_size", "kfold"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("learning_rate, weight_decay and warmup_epochs must be non-negative")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# objectives


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ce_loss(logits, y0, abar_t, weighted=True):
    """Token-summed cross-entropy, optionally scaled by ``alpha_bar_t``, averaged over the batch.

    ``logits`` and the one-hot targets ``y0`` are ``(B, N, K)``; ``abar_t``
    is a scalar or ``(B,)``. Returns ``(loss, grad_logits)`` with the exact
    analytic gradient ``w * (softmax - y0) / B``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    if logits.shape != y0.shape:
        raise ValueError(f"logits {logits.shape} and targets {y0.shape} disagree")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    if logits.ndim == 2:
        logits, y0 = logits[None], y0[None]
    B = logits.shape[0]
    w = np.broadcast_to(np.asarray(abar_t, dtype=np.float64), (B,)) if weighted else np.ones(B)
    logp = _log_softmax(logits)
    per_instance = -(y0 * logp).sum(axis=(1, 2))
    loss = float(np.mean(w * per_instance))
    grad = (w / B)[:, None, None] * (np.exp(logp) - y0)
    return loss, grad


def mse_loss(prediction, target):
    """Mean squared error over all coordinates and its gradient."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"prediction {prediction.shape} and target {target.shape} disagree")
    if not (np.all(np.isfinite(prediction)) and np.all(np.isfinite(target))):
        raise FloatingPointError("non-finite inputs")
    diff = prediction - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# batch construction


class ExpandedBatch(NamedTuple):
    """``kfold`` noisy copies per instance; row ``i * kfold + j`` is copy ``j`` of instance ``i``."""

    source: np.ndarray  # (B*k,) index of the originating instance
    t: np.ndarray  # (B*k,)
    noisy: np.ndarray  # (B*k, N, K)
    noise: np.ndarray  # (B*k, N, K)
    targets: np.ndarray  # (B*k, N, K)


def distinct_timesteps(batch, kfold, T, rng):
    """``(batch, kfold)`` timesteps uniform on [1, T], distinct within each row."""
    if kfold > T:
        raise ValueError(f"cannot draw {kfold} distinct timesteps from [1, {T}]")
    t = rng.integers(1, T + 1, size=(batch, kfold))
    while True:
        s = np.sort(t, axis=1)
        bad = (s[:, 1:] == s[:, :-1]).any(axis=1)
        if not bad.any():
            return t
        t[bad] = rng.integers(1, T + 1, size=(int(bad.sum()), kfold))


def kfold_expand(targets, kfold, s, rng):
    """Pair every instance with ``kfold`` distinct timesteps and fresh corruptions.

    ``targets`` are one-hot ``(B, N, K)``. Conditioning features are not
    touched here: the returned ``source`` index lets callers route the single
    encoding of each instance to all of its copies.
    """
    if kfold < 1:
        raise ValueError("kfold must be positive")
    targets = np.asarray(targets, dtype=np.float64)
    B = targets.shape[0]
    t = distinct_timesteps(B, kfold, s.T, rng).reshape(-1)
    source = np.repeat(np.arange(B), kfold)
    y0 = targets[source]
    noisy, noise = corrupt(y0, t, s, rng, return_noise=True)
    return ExpandedBatch(source, t, noisy.values, noise, y0)


def cfg_dropout(c, p, rng):
    """Replace each row's condition by the null condition with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    drop = rng.random(len(c)) < p
    return Condition(c.vector, np.asarray(c.is_null, dtype=bool) | drop)


def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps exceeds total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam moments with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = 0

    def update(self, params, grads, lr, weight_decay):
        """In-place update of ``params`` (a flat name -> array dict).

        Nothing is written unless every new parameter and moment is finite;
        otherwise :class:`DivergenceError` is raised and the state is unchanged.
        """
        b1, b2 = self.beta1, self.beta2
        steps = self.steps + 1
        c1 = 1.0 - b1**steps
        c2 = 1.0 - b2**steps
        staged = {}
        with np.errstate(over="ignore", invalid="ignore"):
            for name, g in grads.items():
                p = params[name]
                m = self.m.get(name, np.zeros_like(p)) * b1 + (1.0 - b1) * g
                v = self.v.get(name, np.zeros_like(p)) * b2 + (1.0 - b2) * g * g
                step = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if weight_decay and p.ndim >= 2:
                    step = step + weight_decay * p
                new = p - lr * step
                if not (np.all(np.isfinite(new)) and np.all(np.isfinite(v))):
                    raise DivergenceError(f"non-finite update for {name}")
                staged[name] = (m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False), new)
        for name, (m, v, new) in staged.items():
            self.m[name], self.v[name] = m, v
            params[name][...] = new
        self.steps = steps

    def state_dict(self):
        return {"steps": self.steps, "m": self.m, "v": self.v}


class TrainState:
    """Denoiser and encoder parameters with their shared optimizer."""

    def __init__(self, denoiser, encoder, total_steps, warmup_steps):
        self.denoiser = denoiser
        self.encoder = encoder
        self.optimizer = AdamW()
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps
        self.step = 0

    def flat_params(self):
        out = {f"denoiser.{k}": v for k, v in self.denoiser.tensors.items()}
        out.update({f"encoder.{k}": v for k, v in self.encoder.tensors.items()})
        return out

    def current_lr(self, base_lr):
        return lr_at(min(self.step, self.total_steps), self.total_steps, self.warmup_steps, base_lr)


def leaf_tensors(prefix, tensors):
    return {k: ag.Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in tensors.items()}


def collect_grads(prefix, leaves):
    return {f"{prefix}.{k}": (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in leaves.items()}


def objective(loss_kind, logits, expanded, s):
    """Scalar loss and its gradient w.r.t. the denoiser output for an expanded batch."""
    if loss_kind == "mse_noise":
        return mse_loss(logits, expanded.noise)
    return ce_loss(logits, expanded.targets, alpha_bar(s, expanded.t), weighted=loss_kind == "weighted_ce")


def apply_update(state, grads, config):
    """Global-norm clipping then one AdamW step; returns (pre-clip norm, lr)."""
    clipped, norm = clip_by_global_norm(grads, config.grad_clip_norm)
    lr = state.current_lr(config.learning_rate)
    state.optimizer.update(state.flat_params(), clipped, lr, config.weight_decay)
    state.step += 1
    return norm, lr


def train_step(state, features, targets, config, s, rng):
    """One optimization step of the diffusion objective.

    ``features`` are ``(B, L, d)`` conditioning tokens and ``targets`` the
    integer labels ``(B, N)`` (or ``(B,)`` for single tokens). Each instance
    is encoded once; its encoding is shared by its ``config.kfold`` noisy
    copies. Raises :class:`DivergenceError` before touching parameters when
    the loss is non-finite.
    """
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[:, None]
    spec = state.denoiser.spec
    enc = leaf_tensors("encoder", state.encoder.tensors)
    den = leaf_tensors("denoiser", state.denoiser.tensors)
    dtype = state.denoiser.dtype
    cond = encoder_graph(enc, state.encoder.spec, ag.Tensor(np.asarray(features, dtype=dtype)))
    is_null = cfg_dropout(Condition(cond.data, np.zeros(len(targets), bool)), config.cfg_dropout_prob, rng).is_null
    expanded = kfold_expand(one_hot(targets, spec.K), config.kfold, s, rng)
    shared = ag.take_rows(cond, expanded.source)
    noisy = ag.Tensor(expanded.noisy.astype(dtype))
    logits = denoiser_graph(den, spec, noisy, expanded.t, shared, is_null[expanded.source])
    with np.errstate(all="ignore"):
        finite = np.all(np.isfinite(logits.data))
    if not finite:
        raise DivergenceError("non-finite activations")
    loss, grad = objective(config.loss_kind, logits.data, expanded, s)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    logits.backward(grad)
    grads = collect_grads("denoiser", den)
    grads.update(collect_grads("encoder", enc))
    norm, lr = apply_update(state, grads, config)
    return {"loss": loss, "grad_norm": norm, "lr": lr, "null_fraction": float(is_null.mean())}


def run_epochs(step_fn, n, config, rng, callback=None):
    """Shuffle-and-batch loop; ``step_fn(index)`` performs one step and returns its metrics.

    Returns the list of per-epoch mean losses.
    """
    steps_per_epoch = math.ceil(n / config.batch_size)
    epoch_losses = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            start = time.perf_counter()
            metrics = step_fn(order[b * config.batch_size : (b + 1) * config.batch_size])
            losses.append(metrics["loss"])
            if callback is not None:
                record = {"step": step, "epoch": epoch, **metrics}
                record["wall_ms"] = round(1000.0 * (time.perf_counter() - start), 3)
                callback(record)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def steps_for(n, config):
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    warmup = min(total, int(round(config.warmup_epochs * steps_per_epoch)))
    return total, warmup
