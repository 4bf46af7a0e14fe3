"""On-disk dataset caches.

A file is an ASCII header followed by fixed-size binary records::

    ADDDATA 1
    task <blobs|grammar>
    n <record count>
    seed <generation seed>
    features <L> <d>
    targets <N>
    scenes <width>
    params <task parameters as sorted-key JSON>
    end_header

The header is terminated by the newline after ``end_header``. Record ``i``
then holds ``L*d`` little-endian float64 features, ``N`` little-endian
int64 targets and ``width`` little-endian int64 scene fields, with no
padding between fields or records. Files are caches: the same task and
seed regenerate identical bytes.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tasks import BlobTask, GrammarTask, gen_blobs, gen_grammar

MAGIC = "ADDDATA 1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    task: object
    seed: int
    features: np.ndarray  # (n, L, d) float64
    targets: np.ndarray  # (n,) for blobs, (n, N) for grammar
    scenes: np.ndarray  # (n, 5) for grammar, (n, 0) for blobs

    def __len__(self):
        return len(self.features)

    def head(self, n):
        """The first ``n`` records."""
        return Dataset(self.task, self.seed, self.features[:n], self.targets[:n], self.scenes[:n])


def generate(task, n, seed):
    if isinstance(task, BlobTask):
        features, labels = gen_blobs(task, n, seed)
        return Dataset(task, seed, features, labels, np.zeros((n, 0), np.int64))
    features, tokens, scenes = gen_grammar(task, n, seed)
    return Dataset(task, seed, features, tokens, scenes)


def task_name(task):
    return "blobs" if isinstance(task, BlobTask) else "grammar"


def _targets_2d(ds):
    return ds.targets.reshape(len(ds), -1)


def to_bytes(ds):
    n, L, d = ds.features.shape
    targets = _targets_2d(ds)
    header = [
        MAGIC,
        f"task {task_name(ds.task)}",
        f"n {n}",
        f"seed {ds.seed}",
        f"features {L} {d}",
        f"targets {targets.shape[1]}",
        f"scenes {ds.scenes.shape[1]}",
        f"params {json.dumps(asdict(ds.task), sort_keys=True, separators=(',', ':'))}",
        "end_header",
    ]
    records = np.concatenate(
        [
            ds.features.reshape(n, -1).astype("<f8").view(np.uint8).reshape(n, -1),
            targets.astype("<i8").view(np.uint8).reshape(n, -1),
            ds.scenes.astype("<i8").view(np.uint8).reshape(n, -1),
        ],
        axis=1,
    )
    return ("\n".join(header) + "\n").encode("ascii") + records.tobytes()


def from_bytes(data):
    end = data.find(b"end_header\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise DatasetError("not a dataset file")
    fields = {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        name = fields["task"]
        n, seed = int(fields["n"]), int(fields["seed"])
        L, d = (int(v) for v in fields["features"].split())
        n_targets, width = int(fields["targets"]), int(fields["scenes"])
        params = json.loads(fields["params"])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"malformed header: {exc}") from None
    task = BlobTask(**params) if name == "blobs" else GrammarTask(**params)
    body = data[end + len(b"end_header\n") :]
    record = 8 * (L * d + n_targets + width)
    if len(body) != n * record:
        raise DatasetError(f"expected {n * record} payload bytes, found {len(body)}")
    raw = np.frombuffer(body, np.uint8).reshape(n, record)
    cut = 8 * L * d
    features = raw[:, :cut].copy().view("<f8").reshape(n, L, d).astype(np.float64)
    targets = raw[:, cut : cut + 8 * n_targets].copy().view("<i8").astype(np.int64)
    scenes = raw[:, cut + 8 * n_targets :].copy().view("<i8").reshape(n, width).astype(np.int64)
    if name == "blobs":
        targets = targets[:, 0]
    return Dataset(task, seed, features, targets, scenes)


def save(ds, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
