"""Named tensor stores and their on-disk archive format.

A store is a plain ``dict`` mapping a dotted name (``"layer0.attn.wk"``) to a
numpy array. An archive is a directory holding ``manifest.json`` and
``tensors.bin``; payloads are little-endian float32, concatenated in
lexicographic name order so that two writes of the same store are
byte-identical.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
DTYPES = {"f32": np.dtype("<f4")}


class ArchiveError(ValueError):
    """Raised for malformed, truncated or unsupported archives."""


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise ArchiveError(f"invalid tensor name {name!r}")
    if any(ord(c) < 32 or ord(c) == 127 for c in name):
        raise ArchiveError(f"control character in tensor name {name!r}")


def as_f32(store: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round every tensor to float32, the on-disk precision."""
    return {k: np.asarray(v, dtype=np.float32) for k, v in store.items()}


def write_archive(store: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    if isinstance(store, Mapping):
        items = list(store.items())
    else:
        items = list(store)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate tensor name in store")
    for n in names:
        _check_name(n)

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, arr in sorted(items, key=lambda kv: kv[0]):
        arr = np.asarray(arr)
        blob = np.ascontiguousarray(arr, dtype=DTYPES["f32"]).tobytes()
        entries.append({"name": name, "shape": [int(s) for s in arr.shape],
                        "dtype": "f32", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    with open(path / PAYLOAD, "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    with open(path / MANIFEST, "w") as fh:
        json.dump({"tensors": entries}, fh, indent=1)
        fh.write("\n")


def read_archive(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with open(path / MANIFEST) as fh:
            manifest = json.load(fh)
        entries = manifest["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"corrupt manifest in {path}: {exc}") from exc
    payload = (path / PAYLOAD).read_bytes()

    store: dict[str, np.ndarray] = {}
    for e in entries:
        try:
            name, shape, tag = e["name"], list(e["shape"]), e["dtype"]
            offset, nbytes = int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError) as exc:
            raise ArchiveError(f"corrupt manifest entry {e!r}") from exc
        if tag not in DTYPES:
            raise ArchiveError(f"unsupported dtype tag {tag!r} for {name}")
        if name in store:
            raise ArchiveError(f"duplicate tensor name {name!r} in manifest")
        dtype = DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected or offset + nbytes > len(payload) or offset < 0:
            raise ArchiveError(
                f"payload length mismatch for {name}: shape {shape} needs "
                f"{expected} bytes, manifest/payload provide {nbytes} at "
                f"offset {offset} of {len(payload)}")
        arr = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize,
                            offset=offset)
        store[name] = arr.reshape(shape).astype(np.float32)
    return store
