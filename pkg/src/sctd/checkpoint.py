"""Single-file checkpoint format.

Layout::

    b"SCTD1"                      magic + format version
    uint64 little-endian          header length in bytes
    header                        UTF-8 JSON (sorted keys), array table included
    raw blocks                    little-endian array data, in header order
    32 bytes                      SHA-256 of everything above

Loading verifies the digest before parsing anything, so a damaged file never
yields partial state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .data import Vocab
from .errors import IncompatibleCheckpointError, IntegrityError
from .model import Encoder, ModelConfig

MAGIC = b"SCTD"
VERSION = b"1"
_DIGEST = 32


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_checkpoint(path, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    table = []
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_le(arr.dtype))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = dict(header, arrays=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + VERSION + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blocks)
    blob = body + hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 1 + 8 + _DIGEST or not blob.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    version = blob[len(MAGIC) : len(MAGIC) + 1]
    if version != VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version!r} is not supported (expected {VERSION!r})"
        )
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted or truncated")
    start = len(MAGIC) + 1
    (hlen,) = struct.unpack("<Q", body[start : start + 8])
    hstart = start + 8
    try:
        header = json.loads(body[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header") from exc
    data = body[hstart + hlen :]
    arrays = {}
    for entry in header.pop("arrays"):
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays


def load_encoder(path) -> Tuple[Encoder, Vocab]:
    """Frozen encoder snapshot and its vocabulary from a training checkpoint."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig(**header["model_config"])
    encoder = Encoder(config)
    encoder.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    for p in encoder.parameters():
        p.requires_grad = False
    return encoder, Vocab(tuple(header["vocab"]))
