"""Flat ``key = value`` run configuration.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Every key is listed in :data:`SCHEMA`. Unknown keys, duplicates, values
that do not parse and missing required keys are rejected with an error
naming the key.
"""

import numpy as np

from .denoiser import DenoiserSpec, EncoderSpec
from .sampler import SampleConfig
from .schedule import build_schedule
from .tasks import BlobTask, GrammarTask
from .training import TrainConfig

TASKS = ("blobs", "grammar")
METHODS = ("add", "pdd")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


# key -> (type, default); a default of None marks the key as required
SCHEMA = {
    "task": (str, None),
    "seed": (int, None),
    "method": (str, "add"),
    # training
    "epochs": (int, 50),
    "batch_size": (int, 256),
    "learning_rate": (float, 1e-3),
    "weight_decay": (float, 0.05),
    "warmup_epochs": (float, 2.0),
    "grad_clip_norm": (float, 3.0),
    "loss_kind": (str, "weighted_ce"),
    "cfg_dropout_prob": (float, 0.1),
    "kfold": (int, 4),
    "checkpoint_every": (int, 10),
    # schedule
    "kind": (str, "linear"),
    "T": (int, 1000),
    "beta_min": (float, 1e-4),
    "beta_max": (float, 0.02),
    # model
    "hidden_dim": (int, 64),
    "depth": (int, 2),
    "time_embed_dim": (int, 32),
    "encoder_layers": (int, 1),
    "pooling": (str, "mean"),
    "dtype": (str, "float32"),
    # data
    "n_train": (int, 20000),
    "n_test": (int, 5000),
    "task_seed": (int, 0),
    "num_classes": (int, 10),
    "feature_dim": (int, 16),
    "tokens": (int, 8),
    "noise_scale": (float, 2.75),
    "vocab_size": (int, 64),
    "seq_len": (int, 12),
    "feature_noise": (float, 0.0),
    # sampling
    "steps": (int, 20),
    "to_one": (str, "argmax_onehot"),
    "guidance_scale": (float, 1.0),
    "renoise_variant": (str, "alpha_bar"),
    "temperature": (float, 1.0),
    "pdd_rounds": (int, 12),
}
REQUIRED = tuple(k for k, (_, default) in SCHEMA.items() if default is None)


def _coerce(key, raw):
    kind = SCHEMA[key][0]
    try:
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return kind(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text):
    """Parse config text into ``{key: value}`` without applying defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(key or f"line {lineno}", "expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(key, "unknown config key")
        if key in values:
            raise ConfigError(key, "duplicate config key")
        values[key] = _coerce(key, raw)
    return values


def resolve(values, check_task=True):
    """Fill defaults, check required keys and enumerations.

    ``check_task=False`` skips building the synthetic task, for callers that
    bring their own data.
    """
    for key in values:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown config key")
    for key in REQUIRED:
        if values.get(key) is None:
            raise ConfigError(key, "missing required config key")
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    cfg.update({k: _coerce(k, v) if isinstance(v, str) and SCHEMA[k][0] is not str else v for k, v in values.items()})
    for key, allowed in (("task", TASKS), ("method", METHODS), ("dtype", tuple(DTYPES))):
        if cfg[key] not in allowed:
            raise ConfigError(key, f"must be one of {allowed}, got {cfg[key]!r}")
    try:
        train_config(cfg)
        sample_config(cfg)
        schedule(cfg)
        model_specs(cfg)
        if check_task:
            make_task(cfg)
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None
    return cfg


def load(path, overrides=None):
    """Read ``path``, apply ``overrides`` (flag values win) and resolve."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    values = parse_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve(values), text


def dumps(cfg):
    """Canonical text form: every key, in schema order."""
    return "".join(f"{k} = {cfg[k]}\n" for k in SCHEMA)


def train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in TrainConfig.field_names()})


def sample_config(cfg, **changes):
    fields = ("steps", "to_one", "guidance_scale", "renoise_variant", "temperature", "seed")
    return SampleConfig(**{**{k: cfg[k] for k in fields}, **changes})


def schedule(cfg):
    return build_schedule(cfg["kind"], cfg["T"], cfg["beta_min"], cfg["beta_max"])


def make_task(cfg):
    if cfg["task"] == "blobs":
        return BlobTask(cfg["num_classes"], cfg["feature_dim"], cfg["tokens"], cfg["noise_scale"], cfg["task_seed"])
    return GrammarTask(cfg["vocab_size"], cfg["seq_len"], cfg["feature_dim"], cfg["feature_noise"], cfg["task_seed"])


def model_specs(cfg):
    """Denoiser and encoder specs implied by the task and method."""
    if cfg["task"] == "blobs":
        K, N = cfg["num_classes"], 1
    else:
        K, N = cfg["vocab_size"], cfg["seq_len"]
    if cfg["method"] == "pdd":
        K += 1
    den = DenoiserSpec(K, cfg["feature_dim"], cfg["hidden_dim"], cfg["depth"], cfg["time_embed_dim"], N)
    enc = EncoderSpec(cfg["feature_dim"], cfg["encoder_layers"], cfg["pooling"])
    return den, enc


def seeds(cfg):
    """Independent streams derived from the single ``seed`` key."""
    names = ("init", "train", "train_data", "test_data")
    children = np.random.SeedSequence(cfg["seed"]).spawn(len(names))
    return dict(zip(names, children))
