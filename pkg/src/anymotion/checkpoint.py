"""Named-array checkpoint archive: manifest.json + weights.bin in one directory.

The manifest lists every array (unique, sorted names) with shape and byte
offset into the raw little-endian float32 buffer, plus free-form metadata
(stage tag, config hash, RNG state). Save/load round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters of a module as float32 numpy arrays keyed by dotted name."""
    out = {}
    for name, p in module.named_parameters():
        out[prefix + name] = p.detach().cpu().numpy().astype("<f4")
    return out


def load_into_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = ""):
    dtype = next(module.parameters()).dtype
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise ValidationError(f"checkpoint is missing array {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(
                    f"array {key!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(dtype))


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    if len(set(names)) != len(names):
        raise ValidationError("array names must be unique")
    entries = []
    offset = 0
    with open(path / WEIGHTS_NAME, "wb") as fh:
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            fh.write(arr.tobytes())
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                 "offset": offset, "nbytes": arr.nbytes}
            )
            offset += arr.nbytes
    manifest = dict(meta)
    manifest["arrays"] = entries
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    raw = (path / WEIGHTS_NAME).read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(
            raw, dtype="<f4", count=n, offset=entry["offset"]
        ).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    meta = {k: v for k, v in manifest.items() if k != "arrays"}
    return arrays, meta
