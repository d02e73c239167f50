"""Single-file checkpoint: JSON manifest followed by 64-byte-aligned little-endian tensors.

Layout::

    b"REFONLY1"                       8 bytes
    manifest length                   uint64 little-endian
    manifest                          UTF-8 JSON, sorted keys
    zero padding to a 64-byte boundary
    tensor payloads, each starting on a 64-byte boundary (offsets are
    relative to the start of the payload section)
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

MAGIC = b"REFONLY1"
ALIGN = 64
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_NAMES = {"<f4": "float32", "<f8": "float64", "<i8": "int64"}
_FROM_NAME = {v: k for k, v in _NAMES.items()}


def _pad(n: int) -> int:
    return (-n) % ALIGN


def write_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> str:
    """Write ``tensors`` (in the given order) plus ``meta``; returns the file's sha256."""
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise ContractError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = t.contiguous().numpy().astype(code, copy=False).tobytes()
        table.append({"name": name, "dtype": _NAMES[code], "shape": list(t.shape),
                      "offset": offset, "length": len(raw)})
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    manifest = dict(meta, tensors=table)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = MAGIC + struct.pack("<Q", len(header)) + header
    data = prefix + b"\0" * _pad(len(prefix)) + b"".join(blobs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode("utf-8"))
    start = 16 + n + _pad(16 + n)
    tensors = {}
    for entry in manifest.pop("tensors"):
        lo = start + entry["offset"]
        arr = np.frombuffer(data[lo:lo + entry["length"]], dtype=_FROM_NAME[entry["dtype"]])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))
                                                  .reshape(entry["shape"]).copy())
    return manifest, tensors


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(path, model, train_config=None, optimizer_state=None, extra: dict | None = None) -> str:
    """Serialize model weights, configs, schedule and (optionally) optimizer moments."""
    tensors = dict(model.state_dict())
    meta = {
        "format": "refonly-checkpoint",
        "version": 1,
        "model_config": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "extra": extra or {},
        "optimizer_step": None,
    }
    if optimizer_state is not None:
        meta["optimizer_step"] = optimizer_state.step
        for name in optimizer_state.m:
            tensors[f"optimizer.m.{name}"] = optimizer_state.m[name]
            tensors[f"optimizer.v.{name}"] = optimizer_state.v[name]
    return write_checkpoint(path, tensors, meta)


def load_model(path):
    """Returns ``(model, manifest, optimizer_state_or_None)``."""
    from .model import DualCondModel, ModelConfig
    from .trainer import OptimizerState

    manifest, tensors = read_checkpoint(path)
    model = DualCondModel(ModelConfig.from_dict(manifest["model_config"]))
    state = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    model.load_state_dict(state, strict=True)
    opt = None
    if manifest.get("optimizer_step") is not None:
        m = {k[len("optimizer.m."):]: v for k, v in tensors.items() if k.startswith("optimizer.m.")}
        v = {k[len("optimizer.v."):]: t for k, t in tensors.items() if k.startswith("optimizer.v.")}
        opt = OptimizerState(m, v, manifest["optimizer_step"])
    return model, manifest, opt
