"""Model files.

Layout (little-endian)::

    magic    b"TLEM"
    version  u16 (1)
    hlen     u32, then hlen bytes of UTF-8 JSON (sorted keys): config,
             n_classes, map_shape, iteration, sketch (c, d, seed) pairs and
             the ordered array manifest [[name, shape], ...]
    arrays   float64 values for each manifest entry, in order

Sketch hash tables are not stored; they regenerate from their seeds.  The
encoding is a pure function of the model state, so identical training runs
produce byte-identical files.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from .classify import ClassifierHead, FcEncoder
from .model import TleModel, TrainConfig
from .sketch import TensorSketchEncoder, sketch_params_new
from .tensor import ShapeError

__all__ = ["MODEL_MAGIC", "MODEL_VERSION", "ModelFormatError", "encode_model", "decode_model",
           "save_model", "load_model"]

MODEL_MAGIC = b"TLEM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _arrays(model: TleModel) -> list[tuple[str, np.ndarray]]:
    out = list(model.params().items())
    out += [(f"momentum.{k}", model.buffers[k]) for k, _ in list(out)]
    return out


def encode_model(model: TleModel) -> bytes:
    arrays = _arrays(model)
    header = {
        "config": dataclasses.asdict(model.config),
        "n_classes": model.n_classes,
        "map_shape": list(model.map_shape),
        "iteration": model.iteration,
        "sketch": None if model.sketch is None else [
            [p.c, p.d, p.seed] for p in (model.sketch.p1, model.sketch.p2)],
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    return b"".join(parts)


def decode_model(data: bytes) -> TleModel:
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {data[:4]!r}")
    if len(data) < 10:
        raise ModelFormatError("model file truncated in header")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None
    pos = 10 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise ModelFormatError(f"model file truncated in array {name!r}")
        arrays[name] = np.frombuffer(data[pos:pos + 8 * n], dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes in model file")

    config = TrainConfig(**header["config"])
    sketch = None
    if header["sketch"] is not None:
        (c1, d1, s1), (c2, d2, s2) = header["sketch"]
        sketch = TensorSketchEncoder(sketch_params_new(c1, d1, s1), sketch_params_new(c2, d2, s2))
    fc = FcEncoder(arrays["fc_W"], arrays["fc_b"]) if "fc_W" in arrays else None
    buffers = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("momentum.")}
    return TleModel(config, header["n_classes"], tuple(header["map_shape"]),
                    ClassifierHead(arrays["W"], arrays["b"]), sketch, fc, buffers, header["iteration"])


def save_model(model: TleModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_model(model))


def load_model(path: str | os.PathLike, dataset=None) -> TleModel:
    """Load a model; with ``dataset`` given, also check class count and map shape."""
    with open(path, "rb") as f:
        model = decode_model(f.read())
    if dataset is not None:
        if dataset.n_classes != model.n_classes:
            raise ShapeError(f"model has {model.n_classes} classes but dataset has {dataset.n_classes}")
        if dataset.map_shape != model.map_shape:
            raise ShapeError(f"model expects maps {model.map_shape}, dataset has {dataset.map_shape}")
    return model
