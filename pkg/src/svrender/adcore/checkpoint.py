"""Checkpoint serialization: JSON manifest plus raw little-endian weight blob."""

from __future__ import annotations

import json
import os

import numpy as np

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(directory, store, meta=None):
    """Write every parameter in ``store`` to ``directory``.

    Produces two files: a UTF-8 JSON manifest listing name, dtype, and shape
    for each parameter in registration order, and a binary blob holding the
    flattened values as little-endian IEEE-754, concatenated in manifest
    order.  ``meta`` (a JSON-serializable dict) rides along in the manifest.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    for p in store:
        dtype = str(p.value.data.dtype)
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported parameter dtype {dtype!r}")
        entries.append({"name": p.name, "dtype": dtype, "shape": list(p.value.data.shape)})
        chunks.append(np.ascontiguousarray(p.value.data, dtype=_DTYPE_CODES[dtype]).tobytes())
    manifest = {"params": entries, "meta": dict(meta or {})}
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=False)
        fh.write("\n")
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        for c in chunks:
            fh.write(c)


def load_checkpoint(directory, store=None):
    """Read a checkpoint back as ``(values, meta)``.

    ``values`` maps parameter name to ndarray with the recorded dtype and
    shape.  When ``store`` is given, matching parameters are assigned in
    place and a missing or shape-mismatched name raises ValueError.
    """
    with open(os.path.join(directory, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, BLOB_NAME), "rb") as fh:
        blob = fh.read()

    values = {}
    offset = 0
    for entry in manifest["params"]:
        dtype = entry["dtype"]
        shape = tuple(entry["shape"])
        code = _DTYPE_CODES[dtype]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(code).itemsize
        if offset + nbytes > len(blob):
            raise ValueError("checkpoint blob shorter than manifest promises")
        arr = np.frombuffer(blob, dtype=code, count=count, offset=offset).reshape(shape)
        values[entry["name"]] = arr.astype(dtype)
        offset += nbytes
    if offset != len(blob):
        raise ValueError("checkpoint blob longer than manifest promises")

    meta = manifest.get("meta", {})
    if store is not None:
        for name, arr in values.items():
            if name not in store:
                raise ValueError(f"checkpoint parameter {name!r} not in store")
            store[name].assign(arr)
    return values, meta
