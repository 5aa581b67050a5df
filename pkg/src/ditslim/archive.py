"""On-disk container for named float64 tensors.

Layout: magic + version, a JSON manifest (entry names, shapes, optional
``meta`` object), then self-describing entries in manifest order. Each entry
repeats (name, dtype tag, shape) before its raw little-endian payload so the
file is recoverable without the manifest. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"TARC"
VERSION = 1
_DTYPE_TAG = b"f64\x00"


def save_archive(path: str | Path, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    manifest = {
        "entries": [{"name": name, "shape": list(arr.shape), "dtype": "f64"} for name, arr in entries.items()],
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float64)
            nbytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nbytes)))
            fh.write(nbytes)
            fh.write(_DTYPE_TAG)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContractError(f"{path}: not a tensor archive")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported archive version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        entries: dict[str, np.ndarray] = {}
        for listed in manifest["entries"]:
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            if name != listed["name"]:
                raise ContractError(f"{path}: entry order disagrees with manifest ({name!r} vs {listed['name']!r})")
            if fh.read(4) != _DTYPE_TAG:
                raise ContractError(f"{path}: entry {name!r} has an unsupported dtype tag")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            count = 1
            for e in shape:
                count *= e
            payload = fh.read(8 * count)
            entries[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        return entries, manifest.get("meta", {})
