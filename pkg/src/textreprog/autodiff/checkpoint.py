"""Tensor checkpoints: JSON manifest plus one little-endian float32 blob.

``save_tensors("out/weights", {...})`` writes ``out/weights.json`` and
``out/weights.bin``. The manifest lists ``name``, ``shape``, ``dtype`` and
``offset`` (bytes into the blob) for every tensor.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Tensor

DTYPE = "f32"
_NP = np.dtype("<f4")


def _paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_tensors(stem, tensors, meta=None):
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=_NP)
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE, "offset": offset})
            offset += arr.nbytes
    manifest = {"tensors": entries, "blob": blob_path.name}
    if meta is not None:
        manifest["meta"] = meta
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path, blob_path


def load_tensors(stem):
    """Return ``(dict name -> float32 array, meta)``."""
    manifest_path, _ = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != DTYPE:
            raise ValueError(f"unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_NP, count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest.get("meta")
