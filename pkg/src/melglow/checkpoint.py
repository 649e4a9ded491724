"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MGCK" | u32 version
    u32 len | config JSON (ConfigFile, keys sorted)
    tensor table
    u8 has_optimizer [ | u32 len | state JSON | tensor table ]
    u32 CRC32 of every preceding byte

    tensor table := u32 count, then per tensor:
        u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f32 data
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ConfigFile, config_from_dict
from .errors import CheckpointError

MAGIC = b"MGCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ConfigFile
    tensors: dict  # name -> np.ndarray (float32)
    state: Optional[dict] = None
    optimizer: Optional[dict] = None


def _pack_table(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).copy()
        return out


def save_checkpoint(path, config: ConfigFile, tensors: dict, state: Optional[dict] = None, optimizer: Optional[dict] = None) -> None:
    body = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    body += [struct.pack("<I", len(cfg)), cfg, _pack_table(tensors)]
    if state is None and optimizer is None:
        body.append(b"\x00")
    else:
        st = json.dumps(state or {}, sort_keys=True).encode()
        body += [b"\x01", struct.pack("<I", len(st)), st, _pack_table(optimizer or {})]
    payload = b"".join(body)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a MelGlow checkpoint")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    config = config_from_dict(json.loads(r.take(clen)))
    tensors = r.table()
    (flag,) = r.unpack("<B")
    state = optimizer = None
    if flag:
        (slen,) = r.unpack("<I")
        state = json.loads(r.take(slen))
        optimizer = r.table()
    return Checkpoint(config, tensors, state, optimizer)


def model_tensors(model: torch.nn.Module) -> dict:
    return {k: v for k, v in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, tensors: dict) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    for name, ref in own.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {name}: checkpoint shape {tensors[name].shape} != model shape {tuple(ref.shape)}")
    model.load_state_dict({k: torch.as_tensor(v).to(own[k].dtype) for k, v in tensors.items()})
