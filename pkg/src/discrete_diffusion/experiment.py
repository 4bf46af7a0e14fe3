"""Train and evaluate models from a resolved config dict."""

import numpy as np

from . import config as cfgmod
from .denoiser import encode, init_denoiser, init_encoder
from .pdd import pdd_generate, pdd_train_step
from .sampler import argmax_stability, onehot_sharpness, sample
from .tasks import semantic_match, validity
from .training import TrainState, run_epochs, steps_for, train_step


def build_state(cfg, n_train):
    """Fresh parameters and optimizer for ``n_train`` training instances."""
    den_spec, enc_spec = cfgmod.model_specs(cfg)
    dtype = cfgmod.DTYPES[cfg["dtype"]]
    rng = np.random.default_rng(cfgmod.seeds(cfg)["init"])
    den = init_denoiser(den_spec, rng, dtype)
    enc = init_encoder(enc_spec, rng, dtype)
    total, warmup = steps_for(n_train, cfgmod.train_config(cfg))
    return TrainState(den, enc, total, warmup)


def train(cfg, dataset, state=None, callback=None, on_epoch=None):
    """Run all epochs on ``dataset``; returns ``(state, epoch_losses)``.

    ``callback`` receives every per-step record; ``on_epoch(epoch, state)``
    runs after each completed epoch (used for periodic checkpoints).
    """
    state = state or build_state(cfg, len(dataset))
    tc = cfgmod.train_config(cfg)
    s = cfgmod.schedule(cfg)
    rng = np.random.default_rng(cfgmod.seeds(cfg)["train"])
    X, y = dataset.features, dataset.targets
    if cfg["method"] == "pdd":
        step = lambda idx: pdd_train_step(state, X[idx], y[idx], tc, rng)  # noqa: E731
    else:
        step = lambda idx: train_step(state, X[idx], y[idx], tc, s, rng)  # noqa: E731

    steps_per_epoch = -(-len(dataset) // tc.batch_size)

    def hook(record):
        if callback is not None:
            callback(record)
        if on_epoch is not None and (record["step"] + 1) % steps_per_epoch == 0:
            on_epoch(record["epoch"], state)

    losses = run_epochs(step, len(dataset), tc, rng, hook)
    return state, losses


def generate(den, enc, features, sample_cfg, schedule, rng=None, method="add", rounds=12):
    """Token ids ``(n, N)`` and the trajectory (``None`` for PDD)."""
    c = encode(enc, features)
    if method == "pdd":
        return pdd_generate(den, c, rounds), None
    rng = rng if rng is not None else np.random.default_rng(sample_cfg.seed)
    out, traj = sample(den, c, sample_cfg, schedule, rng)
    return out.argmax(axis=-1), traj


def sequence_rates(tokens, scenes):
    """``(validity rate, semantic-match rate)`` of generated token rows."""
    valid = np.mean([validity(q) for q in tokens])
    match = np.mean([semantic_match(q, sc) for q, sc in zip(tokens, scenes)])
    return float(valid), float(match)


def evaluate(den, enc, dataset, sample_cfg, schedule, method="add", rounds=12):
    """Metrics record: accuracy (blobs) or validity/semantic match (grammar), plus sharpness."""
    tokens, traj = generate(den, enc, dataset.features, sample_cfg, schedule, method=method, rounds=rounds)
    record = {"n": len(dataset)}
    if dataset.scenes.shape[1] == 0:
        record["accuracy"] = float(np.mean(tokens[:, 0] == dataset.targets))
    else:
        record["validity"], record["semantic_match"] = sequence_rates(tokens, dataset.scenes)
    if traj is not None:
        sharp = onehot_sharpness(traj)
        record["sharpness_first"] = float(sharp[0])
        record["sharpness_last"] = float(sharp[-1])
        record["sharpness_final5"] = float(sharp[-5:].mean())
        if len(traj) >= 3:
            record["argmax_stability"] = argmax_stability(traj)
    return record
