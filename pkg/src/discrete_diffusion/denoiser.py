"""Conditional denoiser f(y_t, t, c) and the toy conditioning encoder.

Parameters live in plain ``dict[str, ndarray]`` keyed by dotted names so
they serialize and update without any framework. Forward passes build an
:mod:`autograd` graph; the returned :class:`Tape` differentiates it.
"""

from dataclasses import asdict, dataclass, field

import math

import numpy as np

from . import autograd as ag

MLP_RATIO = 2
POOLINGS = ("class_token", "mean")


@dataclass(frozen=True)
class DenoiserSpec:
    K: int
    cond_dim: int
    hidden_dim: int = 64
    depth: int = 2
    time_embed_dim: int = 32
    seq_len: int = 1

    def __post_init__(self):
        for name in ("K", "cond_dim", "hidden_dim", "depth", "time_embed_dim", "seq_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EncoderSpec:
    token_dim: int
    num_layers: int = 1
    pooling: str = "mean"

    def __post_init__(self):
        if self.token_dim < 1 or self.num_layers < 1:
            raise ValueError("token_dim and num_layers must be positive")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class DenoiserParams:
    spec: DenoiserSpec
    tensors: dict = field(default_factory=dict)

    @property
    def null_condition(self):
        return self.tensors["null_condition"]

    @property
    def dtype(self):
        return self.tensors["out.w"].dtype

    def copy(self):
        return DenoiserParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return DenoiserParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class EncoderParams:
    spec: EncoderSpec
    tensors: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["cls"].dtype

    def copy(self):
        return EncoderParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return EncoderParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class Condition:
    """Conditioning vectors ``(B, cond_dim)`` with a per-row null flag.

    Null rows are replaced by the denoiser's learned null vector at use time,
    so their ``vector`` content is ignored.
    """

    vector: np.ndarray
    is_null: np.ndarray

    @classmethod
    def of(cls, vector):
        vector = np.atleast_2d(np.asarray(vector, dtype=np.float64))
        return cls(vector, np.zeros(len(vector), dtype=bool))

    @classmethod
    def null(cls, batch, cond_dim):
        return cls(np.zeros((batch, cond_dim)), np.ones(batch, dtype=bool))

    def __len__(self):
        return len(self.is_null)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(rng, tensors, name, n_in, n_out, zero=False):
    tensors[f"{name}.w"] = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
    tensors[f"{name}.b"] = np.zeros(n_out)


def _norm(tensors, name, n):
    tensors[f"{name}.g"] = np.ones(n)
    tensors[f"{name}.b"] = np.zeros(n)


def _attention(rng, tensors, name, n):
    for proj in ("q", "k", "v"):
        tensors[f"{name}.{proj}"] = _uniform(rng, n, (n, n))
    _linear(rng, tensors, f"{name}.o", n, n)


def _mlp(rng, tensors, name, n):
    _linear(rng, tensors, f"{name}.fc1", n, MLP_RATIO * n)
    _linear(rng, tensors, f"{name}.fc2", MLP_RATIO * n, n)


def init_denoiser(spec, rng, dtype=np.float64):
    """Fan-in uniform weights, zero biases, zero output head and null condition."""
    H, t = spec.hidden_dim, {}
    _linear(rng, t, "in", spec.K, H)
    _linear(rng, t, "time", spec.time_embed_dim, H)
    _linear(rng, t, "cond", spec.cond_dim, H)
    if spec.seq_len > 1:
        t["pos"] = _uniform(rng, H, (spec.seq_len, H))
    for i in range(spec.depth):
        if spec.seq_len > 1:
            _norm(t, f"blocks.{i}.ln_attn", H)
            _attention(rng, t, f"blocks.{i}.attn", H)
        _norm(t, f"blocks.{i}.ln_mlp", H)
        _mlp(rng, t, f"blocks.{i}.mlp", H)
    _norm(t, "ln_out", H)
    _linear(rng, t, "out", H, spec.K, zero=True)
    t["null_condition"] = np.zeros(spec.cond_dim)
    return DenoiserParams(spec, t).astype(dtype)


def init_encoder(spec, rng, dtype=np.float64):
    d = spec.token_dim
    t = {"cls": _uniform(rng, d, (d,))}
    for m in range(spec.num_layers):
        _norm(t, f"layers.{m}.ln_attn", d)
        _attention(rng, t, f"layers.{m}.attn", d)
        _norm(t, f"layers.{m}.ln_mlp", d)
        _mlp(rng, t, f"layers.{m}.mlp", d)
    return EncoderParams(spec, t).astype(dtype)


def count_parameters(params):
    return int(sum(v.size for v in params.tensors.values()))


# ---------------------------------------------------------------------------
# building blocks


def time_embedding(t, dim):
    """Sinusoidal embedding: ``[sin(t w_i), cos(t w_i)]`` with w_i from 1 down to 1e-4."""
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _dense(P, name, x):
    return x @ P[f"{name}.w"] + P[f"{name}.b"]


def _ln(P, name, x):
    return ag.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def _mlp_forward(P, name, x):
    return _dense(P, f"{name}.fc2", ag.silu(_dense(P, f"{name}.fc1", x)))


def _attention_forward(P, name, x):
    """Single-head scaled dot-product self-attention over axis -2."""
    q = x @ P[f"{name}.q"]
    k = x @ P[f"{name}.k"]
    v = x @ P[f"{name}.v"]
    scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(x.shape[-1]))
    return _dense(P, f"{name}.o", ag.matmul(ag.softmax(scores), v))


def _leaves(tensors):
    return {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}


# ---------------------------------------------------------------------------
# denoiser


class Tape:
    """Evaluation record of one forward pass, sufficient for ``backward``."""

    def __init__(self, output, params, inputs):
        self.output = output
        self.params = params
        self.inputs = inputs

    def backward(self, grad_output):
        grad_output = np.asarray(grad_output, dtype=self.output.data.dtype)
        if grad_output.shape != self.output.shape:
            raise ValueError(f"gradient shape {grad_output.shape} does not match {self.output.shape}")
        self.output.backward(grad_output)
        grads = {k: _grad_or_zero(v) for k, v in self.params.items()}
        inputs = {k: _grad_or_zero(v) for k, v in self.inputs.items()}
        return grads, inputs


def _grad_or_zero(t):
    return np.zeros_like(t.data) if t.grad is None else t.grad


def _as_sequence(spec, y, dtype=np.float64):
    y = np.asarray(y, dtype=dtype)
    if y.ndim == 2 and spec.seq_len == 1:
        y = y[:, None, :]
    if y.ndim != 3 or y.shape[1:] != (spec.seq_len, spec.K):
        raise ValueError(f"expected y_t of shape (B, {spec.seq_len}, {spec.K}), got {y.shape}")
    return y


def denoiser_graph(P, spec, y, t, cond, is_null):
    """Build the logits graph from parameter/input tensors.

    ``y`` is a ``(B, N, K)`` tensor, ``t`` integer timesteps ``(B,)``,
    ``cond`` a ``(B, cond_dim)`` tensor and ``is_null`` a ``(B,)`` mask.
    """
    B = y.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    c = ag.where_rows(is_null, P["null_condition"], cond)
    temb = time_embedding(t, spec.time_embed_dim).astype(P["time.w"].data.dtype)
    temb = _dense(P, "time", ag.Tensor(temb))
    cemb = _dense(P, "cond", c)
    h = _dense(P, "in", y)
    if spec.seq_len == 1:
        h = h + ag.reshape(temb + cemb, (B, 1, spec.hidden_dim))
        for i in range(spec.depth):
            h = h + _mlp_forward(P, f"blocks.{i}.mlp", _ln(P, f"blocks.{i}.ln_mlp", h))
        return _dense(P, "out", _ln(P, "ln_out", h))

    temb3 = ag.reshape(temb, (B, 1, spec.hidden_dim))
    h = h + P["pos"] + temb3
    cond_token = ag.reshape(cemb, (B, 1, spec.hidden_dim)) + temb3
    h = ag.concat([cond_token, h], axis=1)
    for i in range(spec.depth):
        h = h + _attention_forward(P, f"blocks.{i}.attn", _ln(P, f"blocks.{i}.ln_attn", h))
        h = h + _mlp_forward(P, f"blocks.{i}.mlp", _ln(P, f"blocks.{i}.ln_mlp", h))
    h = h[:, 1:, :]
    return _dense(P, "out", _ln(P, "ln_out", h))


def denoiser_forward(params, y_t, t, c):
    """Logits ``(B, N, K)`` for noisy inputs ``y_t`` at timesteps ``t`` under condition ``c``.

    All N token rows come out of a single pass; tokens interact through
    self-attention when N > 1.
    """
    spec = params.spec
    y = _as_sequence(spec, y_t, params.dtype)
    if c.vector.shape != (y.shape[0], spec.cond_dim):
        raise ValueError(f"condition shape {c.vector.shape} does not match batch {y.shape[0]} x {spec.cond_dim}")
    P = _leaves(params.tensors)
    y_leaf = ag.Tensor(y, requires_grad=True, name="y_t")
    c_leaf = ag.Tensor(np.asarray(c.vector, dtype=params.dtype), requires_grad=True, name="cond")
    logits = denoiser_graph(P, spec, y_leaf, t, c_leaf, c.is_null)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite denoiser activations")
    return logits.data, Tape(logits, P, {"y_t": y_leaf, "cond": c_leaf})


def denoiser_backward(tape, grad_logits):
    """Gradients of ``<grad_logits, logits>``: (param grads, y_t grad, cond grad)."""
    grads, inputs = tape.backward(grad_logits)
    return grads, inputs["y_t"], inputs["cond"]


# ---------------------------------------------------------------------------
# encoder


def encoder_graph(P, spec, tokens):
    B, L, d = tokens.shape
    cls = ag.reshape(P["cls"], (1, 1, d)) + ag.Tensor(np.zeros((B, 1, d), dtype=P["cls"].data.dtype))
    z = ag.concat([cls, tokens], axis=1)
    for m in range(spec.num_layers):
        z = z + _attention_forward(P, f"layers.{m}.attn", _ln(P, f"layers.{m}.ln_attn", z))
        z = z + _mlp_forward(P, f"layers.{m}.mlp", _ln(P, f"layers.{m}.ln_mlp", z))
    if spec.pooling == "class_token":
        return z[:, 0, :]
    return ag.mean(z[:, 1:, :], axis=1)


def _check_tokens(spec, tokens, dtype=np.float64):
    tokens = np.asarray(tokens, dtype=dtype)
    if tokens.ndim == 2:
        tokens = tokens[None]
    if tokens.ndim != 3 or tokens.shape[1] < 1 or tokens.shape[2] != spec.token_dim:
        raise ValueError(f"expected tokens of shape (B, L, {spec.token_dim}), got {tokens.shape}")
    return tokens


def encode(params, tokens):
    """Condition vectors from ``(B, L, d)`` feature tokens (no gradient)."""
    tokens = _check_tokens(params.spec, tokens, params.dtype)
    P = {k: ag.Tensor(v) for k, v in params.tensors.items()}
    return Condition.of(encoder_graph(P, params.spec, ag.Tensor(tokens)).data)
