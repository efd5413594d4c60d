"""Checkpoint container: magic, JSON header, then a torch-serialized weight blob.

Layout::

    b"SPCK1\\n" | uint64 LE header length | UTF-8 JSON header | weight blob

The header records the backbone identifier, feature_dim, init provenance,
training-config hash and the blob's sha256, so incompatible weights are
rejected before any tensor is touched.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import torch

from ..errors import IncompatibleWeightsError

MAGIC = b"SPCK1\n"


def save_checkpoint(path: str | Path, state_dict: Mapping[str, torch.Tensor], header: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state_dict.items()}, buf)
    blob = buf.getvalue()
    head = dict(header)
    head["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    head["blob_size"] = len(blob)
    raw = json.dumps(head, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(blob)
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise IncompatibleWeightsError(f"{path} is not a checkpoint container")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise IncompatibleWeightsError(f"{path} is not a checkpoint container")
    off = len(MAGIC)
    (n,) = struct.unpack("<Q", data[off : off + 8])
    header = json.loads(data[off + 8 : off + 8 + n])
    blob = data[off + 8 + n :]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise IncompatibleWeightsError(f"{path}: weight blob hash mismatch")
    state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    return header, state
