"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"SSPCKPT1"
    bytes 8..11   uint32 header length H
    bytes 12..    header: JSON (utf-8, sorted keys) with
                    format_version, encoder_config, vocab_sha256,
                    rng_state, meta, arrays
    then          raw array payload

``arrays`` lists, in name order, ``{name, dtype, shape, offset, nbytes}``
entries whose offsets are relative to the payload start.  Student and
teacher parameters live under the ``student/`` and ``teacher/`` name
prefixes; Adam moments, when present, under ``optim/m/`` and ``optim/v/``.

Writes are deterministic: the same parameters, config, and metadata always
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig

MAGIC = b"SSPCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    encoder_config: EncoderConfig
    vocab_sha256: str
    rng_state: dict
    meta: dict
    optim_m: dict[str, np.ndarray] = field(default_factory=dict)
    optim_v: dict[str, np.ndarray] = field(default_factory=dict)


def _flatten_arrays(checkpoint: Checkpoint) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in checkpoint.student.items():
        arrays[f"student/{name}"] = tensor.data
    for name, tensor in checkpoint.teacher.items():
        arrays[f"teacher/{name}"] = tensor.data
    for name, arr in checkpoint.optim_m.items():
        arrays[f"optim/m/{name}"] = arr
    for name, arr in checkpoint.optim_v.items():
        arrays[f"optim/v/{name}"] = arr
    return arrays


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    arrays = _flatten_arrays(checkpoint)
    index = []
    offset = 0
    payload = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": "float64",
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        payload.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": asdict(checkpoint.encoder_config),
        "vocab_sha256": checkpoint.vocab_sha256,
        "rng_state": checkpoint.rng_state,
        "meta": checkpoint.meta,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path, expected_vocab_sha256: str | None = None) -> Checkpoint:
    """Read a checkpoint, validating structure before any tensor is returned.

    A vocabulary-hash mismatch or any structural damage raises
    CheckpointError; there is no partial load.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc.msg})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    if expected_vocab_sha256 is not None and header["vocab_sha256"] != expected_vocab_sha256:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch "
            f"(checkpoint {header['vocab_sha256'][:12]}..., "
            f"current {expected_vocab_sha256[:12]}...)"
        )
    payload = raw[header_start + header_len :]
    student: dict[str, Tensor] = {}
    teacher: dict[str, Tensor] = {}
    optim_m: dict[str, np.ndarray] = {}
    optim_v: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(
            payload[start : start + nbytes], dtype=np.float64
        ).reshape(entry["shape"]).copy()
        name = entry["name"]
        if name.startswith("student/"):
            t = Tensor(arr)
            t.requires_grad = True
            student[name[len("student/") :]] = t
        elif name.startswith("teacher/"):
            teacher[name[len("teacher/") :]] = Tensor(arr)
        elif name.startswith("optim/m/"):
            optim_m[name[len("optim/m/") :]] = arr
        elif name.startswith("optim/v/"):
            optim_v[name[len("optim/v/") :]] = arr
        else:
            raise CheckpointError(f"{path}: unknown array group {name!r}")
    config = EncoderConfig(**header["encoder_config"])
    return Checkpoint(
        student=student,
        teacher=teacher,
        encoder_config=config,
        vocab_sha256=header["vocab_sha256"],
        rng_state=header["rng_state"],
        meta=header["meta"],
        optim_m=optim_m,
        optim_v=optim_v,
    )


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
