"""Synthetic tasks with exact oracles.

``BlobTask`` is conditional classification: each instance is ``L`` feature
tokens drawn around one of ``K`` class means, so the Bayes classifier is
available in closed form. ``GrammarTask`` is conditional sentence
generation from a finite scene space under a small regular grammar with
number agreement and an optional fronted modifier.
"""

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class BlobTask:
    num_classes: int = 10
    feature_dim: int = 16
    tokens: int = 8
    # tuned so the closed-form Bayes accuracy sits near 0.97
    noise_scale: float = 2.75
    task_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 1 or self.tokens < 1:
            raise ValueError("class count, feature dim and token count must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    @cached_property
    def means(self):
        rng = np.random.default_rng([self.task_seed, 0xB10B])
        return rng.standard_normal((self.num_classes, self.feature_dim))


def gen_blobs(task, n, seed, means=None):
    """``n`` instances: features ``(n, L, d)`` and uniformly drawn labels ``(n,)``."""
    if n < 1:
        raise ValueError("n must be positive")
    means = task.means if means is None else np.asarray(means)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, task.num_classes, size=n)
    noise = rng.standard_normal((n, task.tokens, task.feature_dim))
    features = means[labels][:, None, :] + task.noise_scale * noise
    return features, labels


def bayes_predict(task, features, means=None):
    """Maximum-likelihood class under the known isotropic Gaussian mixture."""
    means = task.means if means is None else np.asarray(means)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != means.shape[1]:
        raise ValueError(f"features must be (n, L, {means.shape[1]}), got {features.shape}")
    # sum_l ||x_l - mu_k||^2 = const - 2 L <xbar, mu_k> + L ||mu_k||^2
    xbar = features.mean(axis=1)
    score = 2.0 * xbar @ means.T - (means**2).sum(axis=1)
    return np.argmax(score, axis=1)


def bayes_accuracy(task, features, labels, means=None):
    return float(np.mean(bayes_predict(task, features, means) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# grammar

PAD = 0
_DETS = {"sing": 1, "plural": 2}
_THE = 3
_COMMA = 4
_NOUNS = ("dog", "cat", "bird", "horse", "child", "robot")
_PLURALS = ("dogs", "cats", "birds", "horses", "children", "robots")
_VERBS_SING = ("chases", "sees", "follows", "watches", "greets", "finds")
_VERBS_PLURAL = ("chase", "see", "follow", "watch", "greet", "find")
_ADVERBS = ("quickly", "slowly")
_PREPS = ("in", "on", "near")
_PLACES = ("park", "hill", "river", "house")

WORDS = (
    ["<pad>", "a", "some", "the", ","]
    + list(_NOUNS)
    + list(_PLURALS)
    + list(_VERBS_SING)
    + list(_VERBS_PLURAL)
    + list(_ADVERBS)
    + list(_PREPS)
    + list(_PLACES)
)
_NOUN0 = 5
_PLURAL0 = _NOUN0 + len(_NOUNS)
_VSING0 = _PLURAL0 + len(_PLURALS)
_VPLUR0 = _VSING0 + len(_VERBS_SING)
_ADV0 = _VPLUR0 + len(_VERBS_PLURAL)
_PREP0 = _ADV0 + len(_ADVERBS)
_PLACE0 = _PREP0 + len(_PREPS)

N_SUBJECTS = 2 * len(_NOUNS)
N_VERBS = len(_VERBS_SING)
N_OBJECTS = len(_NOUNS)
N_MODIFIERS = 1 + len(_ADVERBS) + len(_PREPS) * len(_PLACES)


class Scene(NamedTuple):
    """Sentence content plus its surface order.

    ``subject`` indexes noun and number (``>= 6`` is plural); ``modifier`` 0
    means none, 1-2 an adverb, 3+ a prepositional phrase. ``order`` 1 fronts
    the modifier; it is a rendering choice that the conditioning features do
    not reveal, so every scene with a modifier has two valid sentences.
    """

    subject: int
    verb: int
    object: int
    modifier: int
    order: int = 0

    @property
    def content(self):
        return (self.subject, self.verb, self.object, self.modifier)


@dataclass(frozen=True)
class GrammarTask:
    vocab_size: int = 64
    seq_len: int = 12
    feature_dim: int = 16
    feature_noise: float = 0.0
    task_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < len(WORDS):
            raise ValueError(f"vocab_size must be at least {len(WORDS)}")
        if self.seq_len < 9:
            raise ValueError("seq_len must fit the longest sentence (9 tokens)")

    @property
    def slot_sizes(self):
        return (N_SUBJECTS, N_VERBS, N_OBJECTS, N_MODIFIERS)

    @cached_property
    def slot_tables(self):
        rng = np.random.default_rng([self.task_seed, 0x6A4])
        return [rng.standard_normal((n, self.feature_dim)) for n in self.slot_sizes]

    def scene_features(self, scenes, rng=None):
        """One feature token per content slot: ``(n, 4, d)``; surface order is not encoded."""
        content = np.array([s.content if isinstance(s, Scene) else s[:4] for s in scenes], dtype=np.int64)
        out = np.stack([table[content[:, j]] for j, table in enumerate(self.slot_tables)], axis=1)
        if self.feature_noise > 0:
            out = out + self.feature_noise * rng.standard_normal(out.shape)
        return out

    def all_scenes(self):
        for subject, verb, obj, modifier in itertools.product(*(range(n) for n in self.slot_sizes)):
            for order in (0, 1) if modifier else (0,):
                yield Scene(subject, verb, obj, modifier, order)


def _modifier_tokens(modifier):
    if modifier <= len(_ADVERBS):
        return [_ADV0 + modifier - 1]
    prep, place = divmod(modifier - 1 - len(_ADVERBS), len(_PLACES))
    return [_PREP0 + prep, _THE, _PLACE0 + place]


def render(scene, seq_len=12):
    """Token ids of the sentence for ``scene``, padded to ``seq_len``."""
    subject, verb, obj, modifier, order = scene
    plural = subject >= len(_NOUNS)
    noun = subject % len(_NOUNS)
    core = [
        _DETS["plural" if plural else "sing"],
        (_PLURAL0 if plural else _NOUN0) + noun,
        (_VPLUR0 if plural else _VSING0) + verb,
        _THE,
        _NOUN0 + obj,
    ]
    if modifier == 0:
        words = core
    elif order == 0:
        words = core + _modifier_tokens(modifier)
    else:
        words = _modifier_tokens(modifier) + [_COMMA] + core
    if len(words) > seq_len:
        raise ValueError("sentence longer than seq_len")
    return np.array(words + [PAD] * (seq_len - len(words)), dtype=np.int64)


def _parse_modifier(words):
    if len(words) == 1 and _ADV0 <= words[0] < _PREP0:
        return 1 + words[0] - _ADV0
    if len(words) == 3 and _PREP0 <= words[0] < _PLACE0 and words[1] == _THE and _PLACE0 <= words[2] < _PLACE0 + len(_PLACES):
        return 1 + len(_ADVERBS) + (words[0] - _PREP0) * len(_PLACES) + (words[2] - _PLACE0)
    return None


def _parse_core(words):
    if len(words) != 5:
        return None
    det, subj, verb, the, obj = words
    if det == _DETS["sing"]:
        nouns, verbs, offset = _NOUN0, _VSING0, 0
    elif det == _DETS["plural"]:
        nouns, verbs, offset = _PLURAL0, _VPLUR0, len(_NOUNS)
    else:
        return None
    if not (nouns <= subj < nouns + len(_NOUNS) and verbs <= verb < verbs + N_VERBS):
        return None
    if the != _THE or not (_NOUN0 <= obj < _NOUN0 + N_OBJECTS):
        return None
    return subj - nouns + offset, verb - verbs, obj - _NOUN0


def parse(seq):
    """The :class:`Scene` a token sequence renders, or ``None`` if ungrammatical."""
    seq = [int(v) for v in seq]
    n = len(seq)
    while n and seq[n - 1] == PAD:
        n -= 1
    words = seq[:n]
    if not words or PAD in words:
        return None
    if len(words) == 5:
        core = _parse_core(words)
        return None if core is None else Scene(*core, 0, 0)
    # trailing modifier
    core = _parse_core(words[:5])
    if core is not None:
        modifier = _parse_modifier(words[5:])
        if modifier is not None:
            return Scene(*core, modifier, 0)
    # fronted modifier
    if _COMMA in words:
        split = words.index(_COMMA)
        modifier = _parse_modifier(words[:split])
        core = _parse_core(words[split + 1 :])
        if modifier is not None and core is not None:
            return Scene(*core, modifier, 1)
    return None


def validity(seq):
    return parse(seq) is not None


def semantic_match(seq, scene):
    """Grammatical and describing the same content as ``scene`` (surface order may differ)."""
    parsed = parse(seq)
    return parsed is not None and parsed.content == tuple(scene)[:4]


def decode(seq):
    return " ".join(WORDS[int(v)] if int(v) < len(WORDS) else f"<{int(v)}>" for v in seq if int(v) != PAD)


def gen_grammar(task, n, seed):
    """``n`` examples: conditioning features ``(n, 4, d)``, token ids ``(n, N)``, scenes ``(n, 5)``."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    content = np.stack([rng.integers(0, size, n) for size in task.slot_sizes], axis=1)
    order = np.where(content[:, 3] > 0, rng.integers(0, 2, n), 0)
    scenes = np.concatenate([content, order[:, None]], axis=1)
    tokens = np.stack([render(Scene(*row), task.seq_len) for row in scenes])
    features = task.scene_features(scenes, rng)
    return features, tokens, scenes
