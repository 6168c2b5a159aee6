"""Flat archive of named float buffers: a zip holding a JSON manifest plus
one little-endian float32 buffer per entry. Used for model checkpoints,
precomputed token features, and embedding files."""

import json
import os
import tempfile
import zipfile

import numpy as np

FORMAT_VERSION = 1


def save_archive(path, arrays):
    """Write {name: ndarray} atomically (temp file then rename)."""
    entries = []
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
            for i, (name, arr) in enumerate(arrays.items()):
                arr = np.asarray(arr)
                entries.append(
                    {"name": name, "shape": list(arr.shape), "file": f"data/{i}.bin"}
                )
                zf.writestr(f"data/{i}.bin", arr.astype("<f4").tobytes())
            manifest = {
                "format_version": FORMAT_VERSION,
                "dtype": "<f4",
                "entries": entries,
            }
            zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_archive(path):
    """Read an archive back as {name: float64 ndarray}."""
    out = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported archive format version: {manifest.get('format_version')}"
            )
        for entry in manifest["entries"]:
            buf = np.frombuffer(zf.read(entry["file"]), dtype="<f4")
            out[entry["name"]] = buf.reshape(entry["shape"]).astype(np.float64)
    return out
