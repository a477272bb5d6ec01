"""Versioned binary weights file.

Layout (all integers little-endian)::

    magic      8 bytes  b"SBMIWTS\\0"
    version    uint32   currently 1
    cfg_len    uint32   length of the model-config JSON that follows
    cfg        cfg_len bytes, UTF-8 JSON of ModelConfig
    count      uint32   number of tensors
    per tensor:
      name_len uint16, name (UTF-8)
      ndim     uint32, dims uint32 x ndim
      data     float64 little-endian, row-major, prod(dims) values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .model import ModelConfig, Network, build_model

MAGIC = b"SBMIWTS\0"
VERSION = 1


def dumps(network: Network) -> bytes:
    cfg = network.config.to_json().encode("utf-8")
    state = network.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("weights file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Network:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a weights file (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    try:
        cfg = ModelConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise FormatError(f"bad model config block: {exc}") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after tensors")
    net = build_model(cfg)
    try:
        net.load_state_dict(state)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return net


def save_weights(network: Network, path):
    Path(path).write_bytes(dumps(network))


def load_weights(path) -> Network:
    return loads(Path(path).read_bytes())
