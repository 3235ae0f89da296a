"""EMCK checkpoint format.

Layout (little-endian)::

    b"EMCK" | u32 version | u64 tensor count
    per tensor: u16 name length | name (utf-8) | u8 dtype (0 = f32) | u8 rank | u32 dims... | f32 payload
    u64 config length | config JSON (utf-8, sorted keys)
    u64 adam step | u64 moment count | moment tensors in the per-tensor layout,
        named "exp_avg.<param>" and "exp_avg_sq.<param>"
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EMCK"
VERSION = 1
DTYPE_F32 = 0


@dataclass
class ModelCheckpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict
    adam_step: int = 0
    moments: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_tensor(data: memoryview, pos: int) -> tuple[str, np.ndarray, int]:
    (n,) = struct.unpack_from("<H", data, pos)
    pos += 2
    name = bytes(data[pos : pos + n]).decode("utf-8")
    pos += n
    dtype, rank = struct.unpack_from("<BB", data, pos)
    pos += 2
    if dtype != DTYPE_F32:
        raise ValueError(f"tensor {name}: unsupported dtype code {dtype}")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    return name, arr, pos + 4 * count


def encode(ckpt: ModelCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<IQ", VERSION, len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _write_tensor(buf, name, arr)
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)) + blob)
    buf.write(struct.pack("<QQ", ckpt.adam_step, len(ckpt.moments)))
    for name, arr in ckpt.moments.items():
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def decode(data: bytes) -> ModelCheckpoint:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError(f"not an EMCK checkpoint (magic {bytes(view[:4])!r})")
    version, count = struct.unpack_from("<IQ", view, 4)
    if version != VERSION:
        raise ValueError(f"unsupported EMCK version {version}")
    pos = 16
    tensors = OrderedDict()
    for _ in range(count):
        name, arr, pos = _read_tensor(view, pos)
        tensors[name] = arr
    (n,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    config = json.loads(bytes(view[pos : pos + n]).decode("utf-8"))
    pos += n
    step, n_moments = struct.unpack_from("<QQ", view, pos)
    pos += 16
    moments = OrderedDict()
    for _ in range(n_moments):
        name, arr, pos = _read_tensor(view, pos)
        moments[name] = arr
    if pos != len(data):
        raise ValueError(f"trailing bytes in checkpoint ({len(data) - pos})")
    return ModelCheckpoint(tensors, config, step, moments)


def save(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> ModelCheckpoint:
    return decode(Path(path).read_bytes())


def from_model(model: torch.nn.Module, config: dict, store=None) -> ModelCheckpoint:
    tensors = OrderedDict((k, v.detach().cpu().numpy().astype(np.float32)) for k, v in model.state_dict().items())
    moments = OrderedDict()
    step = 0
    if store is not None:
        step = store.step
        for k in store.params:
            moments[f"exp_avg.{k}"] = store.exp_avg[k].detach().cpu().numpy()
            moments[f"exp_avg_sq.{k}"] = store.exp_avg_sq[k].detach().cpu().numpy()
    return ModelCheckpoint(tensors, config, step, moments)


def load_into(model: torch.nn.Module, ckpt: ModelCheckpoint, store=None) -> None:
    state = OrderedDict((k, torch.from_numpy(v.copy())) for k, v in ckpt.tensors.items())
    model.load_state_dict(state)
    if store is not None:
        store.step = ckpt.adam_step
        for k in store.params:
            if f"exp_avg.{k}" in ckpt.moments:
                store.exp_avg[k].copy_(torch.from_numpy(ckpt.moments[f"exp_avg.{k}"]))
                store.exp_avg_sq[k].copy_(torch.from_numpy(ckpt.moments[f"exp_avg_sq.{k}"]))
