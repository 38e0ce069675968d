"""Model snapshots on disk.

Layout (magic RPCK, integers little-endian):

    "RPCK" | u32 version | u64 json_len | meta JSON (sorted keys)
    u32 n_entries
    per entry: u32 name_len | name utf8 | u32 rank | u64 dim... | f32 payload

The meta JSON carries the full model config, the decoder kind, the training
step count and the dataset seed, enough to rebuild the model object before
filling in weights. Entries cover trainable parameters and batch-norm
running statistics; optimizer state is deliberately not persisted. Values
are stored as f32, which makes save -> load -> save byte-stable.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import tensor as T
from .model import LightFieldModel, ModelConfig

MAGIC = b"RPCK"
VERSION = 1


def _named_state(model):
    return list(model.named_parameters()) + [
        (name, buf) for name, buf in model.named_buffers()]


def save_checkpoint(path, model, step=0):
    entries = _named_state(model)
    meta = {
        "config": dataclasses.asdict(model.cfg),
        "decoder": model.decoder_kind,
        "step": int(step),
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, value in entries:
            # parameters are Tensors, batch-norm buffers bare arrays
            data = value.data if isinstance(value, T.Tensor) else value
            arr = np.asarray(data, dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes: (model, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        meta = json.loads(_read_exact(fh, mlen, path).decode())
        (n_entries,) = struct.unpack("<I", _read_exact(fh, 4, path))
        stored = {}
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, nlen, path).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path))
            count = int(np.prod(shape)) if shape else 1
            stored[name] = np.frombuffer(_read_exact(fh, 4 * count, path),
                                         dtype="<f4").reshape(shape)

    model = LightFieldModel(ModelConfig(**meta["config"]), meta["decoder"])
    expected = dict(_named_state(model))
    if set(stored) != set(expected):
        missing = set(expected) - set(stored)
        surplus = set(stored) - set(expected)
        raise ValueError(f"{path}: state names do not match the rebuilt model "
                         f"(missing {sorted(missing)}, surplus {sorted(surplus)})")
    for name, value in _named_state(model):
        arr = stored[name].astype(np.float64)
        target = value.data if isinstance(value, T.Tensor) else value
        if target.shape != arr.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, "
                             f"model wants {target.shape}")
        target[...] = arr
    return model, meta


def roundtrip_stable(path, scratch_path):
    """save(load(path)) must reproduce the file bit for bit."""
    model, meta = load_checkpoint(path)
    save_checkpoint(scratch_path, model, step=meta["step"])
    with open(path, "rb") as a, open(scratch_path, "rb") as b:
        return a.read() == b.read()
