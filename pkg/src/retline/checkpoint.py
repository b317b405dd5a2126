"""Checkpoint IO: a JSON manifest plus a little-endian float32 blob.

`<name>.json` holds the model config and a tensor directory mapping each
parameter name to its shape and byte offset; `<name>.bin` holds the raw
values. Parameters are float32-representable by construction, so a save/load
round trip reproduces every value bitwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .model import Model, ModelConfig

_DTYPE = "<f4"


def save_checkpoint(model: Model, path_prefix: str) -> None:
    directory = os.path.dirname(os.path.abspath(path_prefix))
    os.makedirs(directory, exist_ok=True)
    tensors, offset = {}, 0
    chunks = []
    for name, t in model.params.items():
        raw = t.data.astype(_DTYPE).tobytes()
        tensors[name] = {
            "shape": list(t.shape),
            "offset": offset,
            "dtype": "float32",
        }
        chunks.append(raw)
        offset += len(raw)
    config = asdict(model.config)
    config["cnn_channels"] = list(config["cnn_channels"])
    manifest = {"config": config, "tensors": tensors, "blob_bytes": offset}
    with open(path_prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(path_prefix + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path_prefix: str) -> Model:
    with open(path_prefix + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(path_prefix + ".bin", "rb") as fh:
        raw = fh.read()
    if len(raw) != manifest["blob_bytes"]:
        raise ValueError(
            f"blob is {len(raw)} bytes, manifest expects {manifest['blob_bytes']}"
        )
    cfg_dict = dict(manifest["config"])
    cfg_dict["cnn_channels"] = tuple(cfg_dict["cnn_channels"])
    config = ModelConfig(**cfg_dict)
    model = Model(config, seed=0)
    for name, t in model.params.items():
        entry = manifest["tensors"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ValueError(
                f"tensor {name!r} has shape {shape} in the checkpoint, "
                f"model expects {t.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(raw):
            raise ValueError(f"blob truncated while reading tensor {name!r}")
        values = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=start)
        t.data = values.astype(np.float64).reshape(shape)
    return model
