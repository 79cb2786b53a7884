"""Versioned model checkpoints.

Layout: ``b"CDCK1"`` | u32 manifest length | manifest JSON (UTF-8, sorted keys)
| u32 tensor count | (u32 name length, name, CDTN tensor) per parameter.
The manifest always carries ``format``, ``kind`` and, for codecs, ``variant``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from clusdiff.errors import DataError
from clusdiff.nncore.io import read_named, write_named

MAGIC = b"CDCK1"


def save(path, kind: str, manifest: dict, tensors: Dict[str, np.ndarray]) -> None:
    body = dict(manifest)
    body["format"] = "CDCK1"
    body["kind"] = kind
    raw = json.dumps(body, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        write_named(f, dict(sorted(tensors.items())))


def load(path, expect_kind: Optional[str] = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(5) != MAGIC:
            raise DataError(f"{path}: not a CDCK1 checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(n).decode())
        tensors = read_named(f)
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise DataError(f"{path}: expected a {expect_kind} checkpoint, found {manifest.get('kind')}")
    return manifest, tensors


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
