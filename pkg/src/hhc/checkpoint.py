"""Checkpoint container: magic, format version, SHA-256 of the payload, then a torch-serialized payload.

Layout::

    0   4   magic "HHCK"
    4   2   format version (u16 little-endian)
    6   32  sha256(payload)
    38  ... payload (``torch.save`` of a dict of tensors, numbers and strings)

Writes go to a temporary file in the same directory and are renamed into
place, so a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional

import torch

from .errors import ChecksumError, DataError, VersionMismatchError

MAGIC = b"HHCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH32s")


def save_checkpoint(path, payload: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    data = _HEADER.pack(MAGIC, FORMAT_VERSION, hashlib.sha256(body).digest()) + body
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated checkpoint header")
    magic, version, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    body = data[_HEADER.size:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    return torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)


_STEP_RE = re.compile(r"step-(\d+)\.ckpt$")


def list_checkpoints(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        return []
    found = [(int(m.group(1)), p) for p in d.iterdir() if (m := _STEP_RE.search(p.name))]
    return [p for _, p in sorted(found)]


def latest_checkpoint(directory) -> Optional[Path]:
    ckpts = list_checkpoints(directory)
    return ckpts[-1] if ckpts else None


def checkpoint_name(step: int) -> str:
    return f"step-{step:08d}.ckpt"
