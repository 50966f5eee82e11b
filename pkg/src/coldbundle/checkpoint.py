"""Checkpoint file format.

Layout of a ``.ckpt`` file:

    magic  b"CBCK1\\n"
    u64 LE header length
    header JSON (utf-8, sorted keys, no whitespace)
    concatenated tensor payloads, little-endian float64, header order

The header carries ``{"stage": str, "config": {...}, "payload_sha256": hex,
"tensors": [{"name", "shape"}, ...]}``.  Saving is byte-deterministic for
identical inputs; load-then-save round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, OrderingError

_MAGIC = b"CBCK1\n"

STAGE_ORDER = {"stage1": 1, "stage2": 2, "stage3": 3}


@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict  # name -> float64 ndarray

    @property
    def content_hash(self) -> str:
        return _payload_hash(self.tensors)


def _payload(tensors: dict) -> bytes:
    chunks = []
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def _payload_hash(tensors: dict) -> str:
    return hashlib.sha256(_payload(tensors)).hexdigest()


def save_checkpoint(path, stage: str, config: dict, tensors: dict) -> None:
    if stage not in STAGE_ORDER:
        raise ContractError(f"unknown stage tag {stage!r}")
    payload = _payload(tensors)
    header = {
        "stage": stage,
        "config": config,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": [{"name": name, "shape": list(np.asarray(arr).shape)}
                    for name, arr in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, expect_stage: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        if expect_stage is not None:
            raise OrderingError(f"missing {expect_stage} checkpoint at {path}; "
                                f"run the earlier pipeline stage first")
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ContractError(f"{path}: payload hash mismatch (corrupt checkpoint)")
    if expect_stage is not None and header["stage"] != expect_stage:
        raise OrderingError(f"{path}: expected stage {expect_stage!r}, found {header['stage']!r}")
    tensors = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    return Checkpoint(stage=header["stage"], config=header["config"], tensors=tensors)
