"""Parameter checkpoints: one little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; parameters go in sorted-name order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    layers, offset, chunks = [], 0, []
    for n in names:
        a = np.ascontiguousarray(params[n], dtype="<f8")
        layers.append({"name": n, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel())
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    path.with_suffix(".bin").write_bytes(blob)
    manifest = {"format": "geoclo-checkpoint/1", "layers": layers, "count": offset,
                "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".bin")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    js = path.with_suffix(".json")
    if not js.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {js}")
    manifest = json.loads(js.read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: checkpoint blob hash mismatch")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    params = {}
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"]))
        params[layer["name"]] = flat[layer["offset"]:layer["offset"] + n].reshape(
            layer["shape"]).copy()
    return params, manifest["meta"]
