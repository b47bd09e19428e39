"""Tensor and measurement-set file formats.

Tensors are raw little-endian 8-byte floats in row-major order, with a
sidecar JSON header {"shape": [...], "dtype": "f64"} at <path>.json.
Measurement sets are one tensor file per block plus a JSON manifest.
"""

import hashlib
import json
import os

import numpy as np

from .operators import MeasurementSet

__all__ = [
    "save_tensor", "load_tensor", "file_sha256",
    "save_measurement_set", "load_measurement_set",
    "save_json", "load_json",
]


def save_tensor(path, array):
    # order="C" (not ascontiguousarray) so 0-d tensors keep their shape
    a = np.asarray(array, dtype=np.float64, order="C")
    with open(path, "wb") as f:
        f.write(a.astype("<f8").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump({"shape": list(a.shape), "dtype": "f64"}, f, sort_keys=True)
        f.write("\n")


def load_tensor(path, allow_non_finite=False):
    with open(str(path) + ".json") as f:
        header = json.load(f)
    if header.get("dtype") != "f64":
        raise ValueError(f"unsupported tensor dtype: {header.get('dtype')}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.fromfile(path, dtype="<f8")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(
            f"tensor file {path}: {data.size} values, header says {shape}")
    arr = data.reshape(shape)
    if not allow_non_finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"tensor file {path} contains non-finite values")
    return arr


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _encode_optional_float(v):
    if v is None:
        return None
    v = float(v)
    if np.isinf(v):
        return "inf"
    return v


def _decode_optional_float(v):
    if v is None:
        return None
    if v == "inf":
        return float("inf")
    return float(v)


def save_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


def save_measurement_set(dirpath, mset, manifest_name="measurements.json"):
    """One tensor file per block plus a manifest with per-file checksums."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, b in enumerate(mset.blocks):
        name = f"block_{i:04d}.f64"
        save_tensor(os.path.join(dirpath, name), b)
        entries.append({"file": name,
                        "sha256": file_sha256(os.path.join(dirpath, name))})
    manifest = {
        "schema_version": 1,
        "blocks": entries,
        "snr_db": _encode_optional_float(mset.snr_db),
        "seed": mset.seed,
    }
    save_json(os.path.join(dirpath, manifest_name), manifest)
    return manifest


def load_measurement_set(dirpath, manifest_name="measurements.json"):
    manifest = load_json(os.path.join(dirpath, manifest_name))
    if manifest.get("schema_version") != 1:
        raise ValueError("unsupported measurement manifest schema_version")
    blocks = [load_tensor(os.path.join(dirpath, e["file"]))
              for e in manifest["blocks"]]
    return MeasurementSet(blocks,
                          snr_db=_decode_optional_float(manifest["snr_db"]),
                          seed=manifest.get("seed"))
