"""scikit-learn style estimators over the diffusion trainer and samplers.

``X`` is always a 3-D array of conditioning tokens ``(n_samples, L, d)``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import config as cfgmod
from . import experiment
from .categorical import softmax
from .datasets import Dataset
from .denoiser import encode
from .sampler import sample


def _check_X(X, d=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"X must be 3-D (n_samples, tokens, dim), got shape {X.shape}")
    if d is not None and X.shape[2] != d:
        raise ValueError(f"X has token dim {X.shape[2]}, estimator was fitted with {d}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


class _DiffusionBase(BaseEstimator):
    _task = "blobs"
    _method = "add"

    def __init__(
        self,
        hidden_dim=64,
        depth=2,
        time_embed_dim=32,
        encoder_layers=1,
        pooling="mean",
        epochs=50,
        batch_size=256,
        learning_rate=1e-3,
        weight_decay=0.05,
        warmup_epochs=2,
        grad_clip_norm=3.0,
        loss_kind="weighted_ce",
        cfg_dropout_prob=0.1,
        kfold=4,
        T=1000,
        steps=20,
        to_one="argmax_onehot",
        guidance_scale=1.0,
        renoise_variant="alpha_bar",
        temperature=1.0,
        dtype="float32",
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.encoder_layers = encoder_layers
        self.pooling = pooling
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.grad_clip_norm = grad_clip_norm
        self.loss_kind = loss_kind
        self.cfg_dropout_prob = cfg_dropout_prob
        self.kfold = kfold
        self.T = T
        self.steps = steps
        self.to_one = to_one
        self.guidance_scale = guidance_scale
        self.renoise_variant = renoise_variant
        self.temperature = temperature
        self.dtype = dtype
        self.random_state = random_state

    def _config(self, X, extra):
        seed = self.random_state
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % 2**32)
        values = {k: v for k, v in self.get_params().items() if k in cfgmod.SCHEMA}
        values.update(task=self._task, method=self._method, seed=int(seed), feature_dim=X.shape[2], **extra)
        return cfgmod.resolve(values, check_task=False)

    def _fit(self, X, targets, scenes, extra):
        self.config_ = self._config(X, extra)
        self.schedule_ = cfgmod.schedule(self.config_)
        ds = Dataset(None, self.config_["seed"], X, targets, scenes)
        state, self.loss_curve_ = experiment.train(self.config_, ds)
        self.denoiser_, self.encoder_ = state.denoiser, state.encoder
        self.n_features_in_ = X.shape[2]
        return self

    def _sample_config(self, **changes):
        return cfgmod.sample_config(self.config_, **changes)

    def trajectory(self, X, **sample_changes):
        """Run the reverse process and return ``(one_hots, Trajectory)``."""
        check_is_fitted(self, "denoiser_")
        X = _check_X(X, self.n_features_in_)
        cfg = self._sample_config(**sample_changes)
        c = encode(self.encoder_, X)
        return sample(self.denoiser_, c, cfg, self.schedule_, np.random.default_rng(cfg.seed))


class ADDClassifier(ClassifierMixin, _DiffusionBase):
    """Classifier whose label is generated by the argmax-and-re-noise loop."""

    _task = "blobs"

    def fit(self, X, y):
        X = _check_X(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return self._fit(X, y_idx, np.zeros((len(X), 0), np.int64), {"num_classes": len(self.classes_)})

    def predict_proba(self, X):
        """Softmax of the final reverse step's logits."""
        _, traj = self.trajectory(X)
        return softmax(traj.logits[-1][:, 0], self.temperature)

    def predict(self, X):
        one_hot, _ = self.trajectory(X)
        return self.classes_[one_hot[:, 0].argmax(axis=-1)]


class ADDSequenceGenerator(_DiffusionBase):
    """Conditional token-sequence generator; ``y`` holds integer ids ``(n, N)``.

    The vocabulary is ``0 .. y.max()`` as seen during ``fit``.
    """

    _task = "grammar"

    def fit(self, X, y):
        X = _check_X(X)
        tokens = np.asarray(y)
        if tokens.ndim != 2 or len(tokens) != len(X) or not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError("y must be integer token ids of shape (n_samples, seq_len)")
        if tokens.min() < 0:
            raise ValueError("token ids must be non-negative")
        self.vocab_size_ = int(tokens.max()) + 1
        extra = {"vocab_size": self.vocab_size_, "seq_len": tokens.shape[1]}
        return self._fit(X, tokens.astype(np.int64), np.zeros((len(X), 0), np.int64), extra)

    def predict(self, X):
        one_hot, _ = self.trajectory(X)
        return one_hot.argmax(axis=-1)


class PDDSequenceGenerator(ADDSequenceGenerator):
    """Masked-recovery baseline decoded by confidence-ordered unmasking."""

    _method = "pdd"

    def trajectory(self, X, **sample_changes):
        raise AttributeError("the masked baseline has no diffusion trajectory")

    def predict(self, X, rounds=None):
        """Unmask over ``rounds`` rounds (default: one position per round)."""
        check_is_fitted(self, "denoiser_")
        X = _check_X(X, self.n_features_in_)
        rounds = self.denoiser_.spec.seq_len if rounds is None else rounds
        tokens, _ = experiment.generate(self.denoiser_, self.encoder_, X, None, None, method="pdd", rounds=rounds)
        return tokens
