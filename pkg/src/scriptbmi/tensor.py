"""Float64 array helpers and reproducible random streams.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C
(row-major) order. Activations use the (batch, channels, height, width)
layout throughout.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import RangeError, ShapeError

DTYPE = np.float64


def _check_extents(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def tensor_full(shape, value: float) -> np.ndarray:
    return np.full(_check_extents(shape), value, dtype=DTYPE)


def flat_index(index, shape) -> int:
    """Row-major flat offset of a multi-index."""
    offset = 0
    for i, extent in zip(index, shape):
        if not 0 <= i < extent:
            raise ShapeError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * extent + i
    return offset


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


@dataclass
class RngStream:
    """Counter-based random stream keyed by (master_seed, purpose_tag, counter).

    Each call to :meth:`generator` hashes the current key into a fresh PCG64
    generator and advances ``counter``, so equal keys give equal draws on any
    platform. Use :meth:`derive` for per-item sub-streams that do not depend
    on processing order.
    """

    master_seed: int
    purpose_tag: str = ""
    counter: int = 0

    def _key(self, counter: int) -> int:
        material = f"{self.master_seed & 0xFFFFFFFFFFFFFFFF}\x1f{self.purpose_tag}\x1f{counter}"
        digest = hashlib.blake2b(material.encode("utf-8"), digest_size=16).digest()
        return int.from_bytes(digest, "little")

    def generator(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._key(self.counter))))
        self.counter += 1
        return gen

    def derive(self, tag: str, index: int = 0) -> "RngStream":
        prefix = f"{self.purpose_tag}/" if self.purpose_tag else ""
        return RngStream(self.master_seed, f"{prefix}{tag}#{int(index)}", 0)


def rng_uniform(stream: RngStream, shape, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise RangeError(f"need lo < hi, got [{lo}, {hi})")
    shape = _check_extents(shape)
    u = stream.generator().random(shape)
    out = lo + (hi - lo) * u
    # rounding can land exactly on hi when the interval is tiny
    return np.where(out < hi, out, np.nextafter(hi, lo)).astype(DTYPE)


def rng_normal(stream: RngStream, shape, mean: float, std: float) -> np.ndarray:
    if std < 0:
        raise RangeError(f"std must be >= 0, got {std}")
    shape = _check_extents(shape)
    z = stream.generator().standard_normal(shape)
    if std == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return (mean + std * z).astype(DTYPE)
