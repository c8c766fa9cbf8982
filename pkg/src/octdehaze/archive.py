"""Checkpoint archive format: a zip file with a JSON index plus one .npy per tensor.

The index maps stable string keys (e.g. ``g_a.blocks.3.conv1.w_hh.weight``)
to entry metadata (dtype, shape, file name inside the archive). A free-form
``meta`` dict travels alongside for run/config fingerprints.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

_INDEX_NAME = "index.json"


def save_archive(path, tensors: dict, meta: dict | None = None) -> None:
    index = {"format_version": 1, "meta": meta or {}, "entries": {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, key in enumerate(sorted(tensors)):
            arr = np.asarray(tensors[key])
            fname = f"t{i:05d}.npy"
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(fname, buf.getvalue())
            index["entries"][key] = {
                "file": fname,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
            }
        zf.writestr(_INDEX_NAME, json.dumps(index, sort_keys=True, indent=1))


def load_archive(path) -> tuple[dict, dict]:
    """Returns (tensors, meta)."""
    with zipfile.ZipFile(path, "r") as zf:
        index = json.loads(zf.read(_INDEX_NAME))
        tensors = {}
        for key, entry in index["entries"].items():
            tensors[key] = np.load(io.BytesIO(zf.read(entry["file"])))
    return tensors, index.get("meta", {})
