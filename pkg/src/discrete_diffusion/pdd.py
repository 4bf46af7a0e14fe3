"""Masked-token recovery baseline ("pseudo" discrete diffusion).

Uses the same denoiser architecture with one extra vocabulary entry for
MASK, no Gaussian corruption, and the timestep input pinned to a sentinel.
Generation starts fully masked and commits the most confident predictions
round by round.
"""

import math
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .categorical import one_hot, softmax
from .denoiser import Condition, denoiser_graph, encoder_graph
from .sampler import denoiser_logits
from .training import DivergenceError, apply_update, cfg_dropout, collect_grads, leaf_tensors

TIME_SENTINEL = 0


class MaskedSequence(NamedTuple):
    tokens: np.ndarray  # (..., N) with ``mask_id`` at masked positions
    mask: np.ndarray  # (..., N) bool


def mask_corrupt(tokens, rate, mask_id, rng):
    """Independently replace each position by ``mask_id`` with probability ``rate``.

    ``rate`` may be a scalar or one rate per sequence.
    """
    tokens = np.asarray(tokens)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0) or np.any(rate > 1):
        raise ValueError("mask rate must lie in [0, 1]")
    rate = rate.reshape(rate.shape + (1,) * (tokens.ndim - rate.ndim))
    mask = rng.random(tokens.shape) < rate
    return MaskedSequence(np.where(mask, mask_id, tokens), mask)


def masked_ce_loss(logits, targets, mask):
    """Cross-entropy summed over masked positions, averaged over sequences.

    ``logits`` are ``(B, N, V+1)``; ``targets`` integer ids ``(B, N)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, _, V1 = logits.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = one_hot(targets, V1)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    loss = float(-(m * y * logp).sum() / B)
    grad = m * (np.exp(logp) - y) / B
    return loss, grad


def pdd_train_step(state, features, tokens, config, rng):
    """One optimization step of masked recovery.

    Each instance gets ``config.kfold`` independent maskings at rates drawn
    uniformly from [0, 1), sharing one encoding, mirroring the diffusion
    trainer's budget.
    """
    tokens = np.asarray(tokens)
    spec = state.denoiser.spec
    mask_id = spec.K - 1
    enc = leaf_tensors("encoder", state.encoder.tensors)
    den = leaf_tensors("denoiser", state.denoiser.tensors)
    dtype = state.denoiser.dtype
    cond = encoder_graph(enc, state.encoder.spec, ag.Tensor(np.asarray(features, dtype=dtype)))
    B = len(tokens)
    is_null = cfg_dropout(Condition(cond.data, np.zeros(B, bool)), config.cfg_dropout_prob, rng).is_null
    source = np.repeat(np.arange(B), config.kfold)
    targets = tokens[source]
    rates = rng.random(len(source))
    masked = mask_corrupt(targets, rates, mask_id, rng)
    shared = ag.take_rows(cond, source)
    logits = denoiser_graph(
        den, spec, ag.Tensor(one_hot(masked.tokens, spec.K, dtype)), TIME_SENTINEL, shared, is_null[source]
    )
    if not np.all(np.isfinite(logits.data)):
        raise DivergenceError("non-finite activations")
    loss, grad = masked_ce_loss(logits.data, targets, masked.mask)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    logits.backward(grad)
    grads = collect_grads("denoiser", den)
    grads.update(collect_grads("encoder", enc))
    norm, lr = apply_update(state, grads, config)
    return {"loss": loss, "grad_norm": norm, "lr": lr, "null_fraction": float(is_null.mean())}


def commit_schedule(N, rounds):
    """Number of positions unmasked after each round: ``min(N, r * ceil(N / rounds))``."""
    per_round = math.ceil(N / rounds)
    return [min(N, r * per_round) for r in range(1, rounds + 1)]


def pdd_generate(params, c, rounds, rng=None, temperature=0.0):
    """Iterative confidence-ordered unmasking; returns token ids ``(B, N)``.

    With ``temperature`` 0 each position takes its argmax token; otherwise
    tokens are sampled from the tempered prediction using ``rng``.
    """
    if rounds < 1:
        raise ValueError("rounds must be positive")
    spec = params.spec
    mask_id = spec.K - 1
    B, N = len(c), spec.seq_len
    tokens = np.full((B, N), mask_id, dtype=np.int64)
    rows = np.arange(B)[:, None]
    for target in commit_schedule(N, rounds):
        masked = tokens == mask_id
        logits = denoiser_logits(params, one_hot(tokens, spec.K), TIME_SENTINEL, c)[..., :mask_id]
        probs = softmax(logits)
        if temperature > 0:
            choice = _sample_rows(softmax(logits, temperature), rng)
        else:
            choice = np.argmax(logits, axis=-1)
        confidence = np.where(masked, np.take_along_axis(probs, choice[..., None], -1)[..., 0], -np.inf)
        n_commit = target - (N - masked.sum(axis=1))
        order = np.argsort(-confidence, axis=1, kind="stable")
        commit = np.zeros_like(masked)
        ranks = np.arange(N)[None, :]
        commit[rows, order] = ranks < n_commit[:, None]
        tokens = np.where(commit, choice, tokens)
    return tokens


def _sample_rows(probs, rng):
    cdf = np.cumsum(probs, axis=-1)
    u = 1.0 - rng.random(probs.shape[:-1])
    return np.minimum((u[..., None] > cdf / cdf[..., -1:]).sum(axis=-1), probs.shape[-1] - 1)
