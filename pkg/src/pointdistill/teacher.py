"""Frozen teacher prefix embeddings: fixture files and a synthetic generator.

Fixture layout (little-endian)::

    "PDTF"  u32 version=1  u64 count  u32 l  u32 d_cap
    per sample: 16-byte id, then l * d_cap float32 (row-major)
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValueError, ShapeMismatchError
from .numerics import Tensor
from .persistence import ID_BYTES, F32, _check_id, _open, _Reader, atomic_write

FIXTURE_MAGIC = b"PDTF"
FIXTURE_VERSION = 1


class PrefixEmbedding(Tensor):
    """Frozen (..., l, d_cap) teacher target; routing a gradient into it raises."""

    def __init__(self, matrix, dtype=None):
        arr = np.asarray(matrix, dtype=dtype)
        if arr.ndim < 2:
            raise ValueError(f"prefix embedding must be (l, d_cap), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("prefix embedding contains non-finite values")
        super().__init__(arr, frozen=True, name="teacher")


@dataclass
class TeacherFixtureSet:
    """Ordered sample id -> (l, d_cap) float32 embedding."""

    l: int
    d_cap: int
    embeddings: dict[bytes, np.ndarray] = field(default_factory=dict)
    description: str = ""

    def __len__(self) -> int:
        return len(self.embeddings)

    def __contains__(self, sid) -> bool:
        return bytes(sid) in self.embeddings

    def __getitem__(self, sid) -> np.ndarray:
        return self.embeddings[bytes(sid)]

    @property
    def ids(self) -> list[bytes]:
        return list(self.embeddings)

    def add(self, sid, matrix) -> None:
        arr = np.asarray(matrix, dtype=np.float32)
        if arr.shape != (self.l, self.d_cap):
            raise ValueError(f"embedding shape {arr.shape} != ({self.l}, {self.d_cap})")
        self.embeddings[_check_id(sid)] = arr

    def stack(self, ids) -> np.ndarray:
        """(len(ids), l, d_cap) block in the requested order."""
        return np.stack([self.embeddings[bytes(s)] for s in ids]) if len(ids) else \
            np.zeros((0, self.l, self.d_cap), dtype=np.float32)


def encode_fixtures(fx: TeacherFixtureSet) -> bytes:
    parts = [FIXTURE_MAGIC, struct.pack("<IQII", FIXTURE_VERSION, len(fx), fx.l, fx.d_cap)]
    for sid, emb in fx.embeddings.items():
        parts.append(sid)
        parts.append(np.ascontiguousarray(emb, dtype=F32).tobytes())
    return b"".join(parts)


def write_fixtures(path, fx: TeacherFixtureSet) -> None:
    atomic_write(path, encode_fixtures(fx))


def load_fixtures(path) -> TeacherFixtureSet:
    """Read a fixture file.

    Raises ``MissingInputError`` if absent, ``ShapeMismatchError`` when the
    payload does not match the header, ``NonFiniteValueError`` on NaN/Inf.
    """
    with _open(path) as fh:
        data = fh.read()
    rd = _Reader(io.BytesIO(data), path)
    rd.magic(FIXTURE_MAGIC, FIXTURE_VERSION)
    count, l, d_cap = rd.unpack("QII")
    block = ID_BYTES + 4 * l * d_cap
    if len(data) - rd.offset != count * block:
        raise ShapeMismatchError(
            f"header declares {count} x ({l}, {d_cap}) embeddings ({count * block} bytes) "
            f"but payload holds {len(data) - rd.offset} bytes", rd.offset, path)
    fx = TeacherFixtureSet(l, d_cap)
    for _ in range(count):
        sid = rd.take(ID_BYTES)
        at = rd.offset
        emb = rd.floats(l * d_cap).reshape(l, d_cap)
        if not np.all(np.isfinite(emb)):
            raise NonFiniteValueError(f"non-finite value in sample {sid!r}", at, path)
        fx.embeddings[sid] = emb
    return fx


def _philox(seed: int, stream: int, key: int) -> np.random.Generator:
    mask = (1 << 64) - 1
    return np.random.Generator(np.random.Philox(key=[seed & mask, key & mask], counter=[stream, 0, 0, 0]))


def synth_teacher(class_id: int, l: int, d_cap: int, noise_scale: float, seed: int,
                  prototype_seed: int = 0) -> np.ndarray:
    """Class prototype plus per-sample noise, both ~ N(0, 1) / sqrt(d_cap).

    The prototype depends only on ``(prototype_seed, class_id)``; ``seed``
    drives the noise. Draws come from the counter-based Philox generator so
    results do not depend on call order.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    scale = 1.0 / np.sqrt(d_cap)
    proto = _philox(prototype_seed, 0, class_id).standard_normal((l, d_cap)) * scale
    if noise_scale:
        proto = proto + noise_scale * scale * _philox(seed, 1, class_id).standard_normal((l, d_cap))
    return proto.astype(np.float32)


__all__ = ["PrefixEmbedding", "TeacherFixtureSet", "encode_fixtures", "write_fixtures",
           "load_fixtures", "synth_teacher", "FIXTURE_MAGIC"]
