"""Checkpoint container: magic "FWCK", version, JSON config echo, then the
parameter tensors in declaration order as little-endian float32."""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from ..config import ModelConfig
from .model import DenoiserModel

MAGIC = b"FWCK"
VERSION = 1


class CheckpointLoadError(ValueError):
    pass


def save_checkpoint(path: str, model: DenoiserModel, meta: dict | None = None) -> None:
    echo = {"model": dataclasses.asdict(model.cfg), "meta": meta or {}}
    blob = json.dumps(echo, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for arr in model.params.values():
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path: str) -> tuple[DenoiserModel, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointLoadError("bad checkpoint magic")
    version, jlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointLoadError(f"unsupported checkpoint version {version}")
    offset = 12
    echo = json.loads(blob[offset:offset + jlen])
    offset += jlen
    (n_params,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    cfg = ModelConfig(**echo["model"])
    model = DenoiserModel(cfg)
    names = model.param_names()
    if n_params != len(names):
        raise CheckpointLoadError("parameter count mismatch")
    loaded = {}
    for name in names:
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        loaded[name] = arr.reshape(dims).astype(np.float64)
    if offset != len(blob):
        raise CheckpointLoadError("trailing bytes in checkpoint")
    model.load_params(loaded)
    return model, echo["meta"]
