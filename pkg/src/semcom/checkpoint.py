"""Versioned checkpoint container and parameter digests.

A checkpoint is an ``.npz`` holding named parameter arrays grouped into
bundles (``"<bundle>/<array>"`` keys) plus a JSON metadata record with a
format version and the configuration digest of the run that wrote it.
Digests are SHA-256 over names, shapes, dtypes and raw bytes, so a frozen
module can be proven bitwise untouched.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

Bundles = dict[str, dict[str, np.ndarray]]


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over the sorted (name, shape, dtype, bytes) of a param dict."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, bundles: Bundles, meta: dict) -> None:
    arrays = {}
    shapes = {}
    for bundle, params in bundles.items():
        for name, arr in params.items():
            arrays[f"{bundle}/{name}"] = arr
            shapes[f"{bundle}/{name}"] = list(arr.shape)
    record = {"format_version": FORMAT_VERSION, "shapes": shapes, **meta}
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Bundles, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    bundles: Bundles = {}
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')} in {path}")
        for key in z.files:
            if key == "__meta__":
                continue
            bundle, name = key.split("/", 1)
            arr = z[key]
            if list(arr.shape) != meta["shapes"][key]:
                raise ValueError(f"checkpoint {path}: shape mismatch for {key}")
            bundles.setdefault(bundle, {})[name] = arr
    return bundles, meta
