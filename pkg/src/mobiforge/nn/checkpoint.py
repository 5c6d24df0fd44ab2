"""Parameter checkpoints: flat little-endian binary + JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Parameter


def save_checkpoint(params: dict[str, Parameter], path) -> None:
    """Write <path> (raw float32 blob) and <path>.json (name/shape/offset)."""
    path = Path(path)
    manifest = []
    offset = 0
    with open(path, "wb") as f:
        for name in sorted(params):
            arr = params[name].data.astype("<f4")
            f.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump({"tensors": manifest, "byte_order": "little"}, f, indent=1)


def load_checkpoint(path) -> dict[str, Parameter]:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as f:
        manifest = json.load(f)
    blob = path.read_bytes()
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        params[entry["name"]] = Parameter(arr.copy(), name=entry["name"])
    return params


def load_into(params: dict[str, Parameter], path) -> None:
    """Load checkpoint values into an existing named-parameter dict in place."""
    loaded = load_checkpoint(path)
    missing = set(params) - set(loaded)
    if missing:
        raise KeyError(f"checkpoint {path} missing tensors {sorted(missing)}")
    for name, p in params.items():
        src = loaded[name].data
        if src.shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {src.shape} != model {p.data.shape}")
        p.data[...] = src.astype(p.data.dtype)
