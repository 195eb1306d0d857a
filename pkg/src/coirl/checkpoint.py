"""Self-describing JSON checkpoints: name -> {shape, dtype, base64 data}."""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np

FORMAT = "coirl-checkpoint/1"


class CheckpointError(ValueError):
    pass


def encode_array(arr):
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape), "dtype": "f32", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(entry):
    if entry.get("dtype") != "f32":
        raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    shape = tuple(entry["shape"])
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"payload size {arr.size} does not match shape {shape}")
    return arr.reshape(shape)


def dumps(arrays, meta=None, extra=None):
    doc = {
        "format": FORMAT,
        "meta": meta or {},
        "params": {name: encode_array(a) for name, a in arrays.items()},
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save(path, arrays, meta=None, extra=None):
    """Atomically write a checkpoint document."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(arrays, meta, extra), encoding="utf-8")
    os.replace(tmp, path)


def load(path, expected_shapes=None):
    """Read a checkpoint; returns (arrays, document).

    When ``expected_shapes`` is given, every expected name must be present with
    the same shape.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} document")
    arrays = {name: decode_array(e) for name, e in doc["params"].items()}
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(arrays))
        if missing:
            raise CheckpointError(f"missing parameters: {missing[:5]}")
        for name, shape in expected_shapes.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise CheckpointError(f"{name}: shape {arrays[name].shape} != expected {tuple(shape)}")
    return arrays, doc
