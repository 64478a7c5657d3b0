"""Checkpoint directory: ``manifest.json`` + ``tensors.bin``.

The blob holds raw little-endian floats laid out back to back in manifest
order (tensors sorted by name); the manifest records name, shape, dtype,
byte offset and byte length for each, plus free-form JSON metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.name if arr.dtype.name in _DTYPES else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "greenplm-ckpt-1", "tensors": entries, "metadata": metadata}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest at {path}: {exc}") from None
    out = {}
    expected = 0
    for e in manifest.get("tensors", []):
        if e["offset"] != expected:
            raise CheckpointError(f"tensor {e['name']!r} offset {e['offset']} overlaps or leaves a gap")
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"tensor {e['name']!r} has unsupported dtype {e['dtype']!r}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["length"] != n * np.dtype(dt).itemsize:
            raise CheckpointError(f"tensor {e['name']!r} length does not match its shape")
        end = e["offset"] + e["length"]
        if end > len(blob):
            raise CheckpointError(f"blob truncated: tensor {e['name']!r} needs bytes up to {end}, "
                                  f"blob has {len(blob)}")
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.dtype(e["dtype"]))
        expected = end
    if expected != len(blob):
        raise CheckpointError(f"blob has {len(blob) - expected} trailing bytes not in the manifest")
    return out, manifest.get("metadata", {})
