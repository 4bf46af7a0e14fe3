"""Self-describing single-file checkpoints.

Layout, all integers little-endian::

    magic        8 bytes   b"ADDCKPT\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint64    byte length of the header
    header       UTF-8 JSON, keys sorted, no whitespace
    payload      raw tensor bytes, concatenated in header order

Each tensor entry in the header records ``name``, ``shape``, ``dtype``
(``"<f4"`` or ``"<f8"``), ``offset`` and ``nbytes`` relative to the payload
start. Nothing time-dependent is written, so equal parameters give equal
bytes and equal checksums.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserParams, DenoiserSpec, EncoderParams, EncoderSpec
from .schedule import schedule_from_table

MAGIC = b"ADDCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    denoiser: DenoiserParams
    encoder: EncoderParams
    schedule: object
    method: str = "add"
    task: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0


def _tensor_table(prefix, tensors, offset, chunks):
    table = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {prefix}{name}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        table.append({"name": prefix + name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, offset


def to_bytes(ckpt):
    chunks = []
    den_table, offset = _tensor_table("denoiser.", ckpt.denoiser.tensors, 0, chunks)
    enc_table, _ = _tensor_table("encoder.", ckpt.encoder.tensors, offset, chunks)
    s = ckpt.schedule
    header = {
        "config": ckpt.config,
        "denoiser_spec": ckpt.denoiser.spec.to_dict(),
        "encoder_spec": ckpt.encoder.spec.to_dict(),
        "method": ckpt.method,
        "schedule": {
            "kind": s.kind,
            "T": s.T,
            "beta_min": s.beta_min,
            "beta_max": s.beta_max,
            # repr-exact floats: json round-trips float64 losslessly
            "betas": [float(b) for b in s.betas],
            "alpha_bars": [float(a) for a in s.alpha_bars],
        },
        "step": int(ckpt.step),
        "task": ckpt.task,
        "tensors": den_table + enc_table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(data):
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    try:
        version, header_len = struct.unpack_from("<IQ", data, pos)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    payload = memoryview(data)[pos + header_len :]
    den, enc = {}, {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=entry["dtype"]).reshape(entry["shape"])
        arr = arr.astype(_DTYPES[entry["dtype"]])
        prefix, _, name = entry["name"].partition(".")
        (den if prefix == "denoiser" else enc)[name] = arr
    sd = header["schedule"]
    schedule = schedule_from_table(sd["kind"], sd["T"], sd["beta_min"], sd["beta_max"], sd["betas"], sd["alpha_bars"])
    return Checkpoint(
        denoiser=DenoiserParams(DenoiserSpec(**header["denoiser_spec"]), den),
        encoder=EncoderParams(EncoderSpec(**header["encoder_spec"]), enc),
        schedule=schedule,
        method=header["method"],
        task=header["task"],
        config=header["config"],
        step=header["step"],
    )


def save(ckpt, path):
    """Write atomically: a crash mid-write never clobbers an existing checkpoint."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def checksum(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
