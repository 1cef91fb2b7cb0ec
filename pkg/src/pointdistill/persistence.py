"""Little-endian binary formats for datasets (PDDS) and checkpoints (PDCK).

Dataset layout::

    "PDDS"  u32 version=1  u64 count  u32 n_points  u32 flags (bit 0: labels)
    u32 n_classes, then per class: u16 byte length + UTF-8 name
    per sample: 16-byte id, [u32 label], n_points * 3 float32

Checkpoint layout::

    "PDCK"  u32 version=1  32-byte sha256 config digest  u64 seed  u64 step
    u32 meta length + UTF-8 JSON (model config, free-form metadata)
    u32 tensor count, then per tensor:
        u16 name length + UTF-8 name, u8 ndim, ndim * u32 dims, float32 payload
    u8 optimizer flag; if 1: u64 optimizer step, then two tensor tables
    (first and second moments) in the same encoding

All writes go to a temporary file in the target directory and are renamed
into place, so an interrupted save never leaves a readable checkpoint.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import (BadMagicError, DigestMismatchError, FormatError, MissingInputError,
                     MissingTensorError, NonFiniteValueError, ShapeMismatchError,
                     TensorShapeError, TruncatedError, VersionError)
from .model.config import ModelConfig

DATASET_MAGIC = b"PDDS"
CHECKPOINT_MAGIC = b"PDCK"
VERSION = 1
ID_BYTES = 16
F32 = np.dtype("<f4")


# --- low level ----------------------------------------------------------------

class _Reader:
    """Sequential reader that reports byte offsets in its errors."""

    def __init__(self, fh: BinaryIO, path=None):
        self.fh = fh
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise TruncatedError(f"expected {n} bytes, found {len(buf)}", self.offset, self.path)
        self.offset += n
        return buf

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=F32).copy()

    def magic(self, expected: bytes, version: int = VERSION) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise BadMagicError(f"bad magic {got!r}, expected {expected!r}", 0, self.path)
        at = self.offset
        ver = self.unpack("I")
        if ver != version:
            raise VersionError(f"unsupported version {ver}", at, self.path)

    def expect_eof(self) -> None:
        if self.fh.read(1):
            raise FormatError("trailing bytes after declared payload", self.offset, self.path)


def _open(path, mode: str = "rb"):
    try:
        return open(path, mode)
    except FileNotFoundError as exc:
        raise MissingInputError(f"no such file: {path}") from exc


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` via a sibling temp file and ``os.replace``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sample_id(index: int, prefix: str = "s") -> bytes:
    """Fixed-width 16-byte ASCII id such as ``b's000000000000042'``."""
    text = f"{prefix}{index:0{ID_BYTES - len(prefix)}d}"
    if len(text) != ID_BYTES:
        raise ValueError(f"id {text!r} does not fit in {ID_BYTES} bytes")
    return text.encode("ascii")


def _check_id(sid) -> bytes:
    sid = bytes(sid)
    if len(sid) != ID_BYTES:
        raise ValueError(f"sample ids are {ID_BYTES} bytes, got {len(sid)}")
    return sid


# --- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory dataset: ids, (N, n, 3) float32 clouds, optional labels."""

    ids: list[bytes]
    clouds: np.ndarray
    labels: np.ndarray | None = None
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_points(self) -> int:
        return self.clouds.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[index]
        return Dataset([self.ids[i] for i in index], self.clouds[index], labels, list(self.class_names))


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    num_points: int
    has_labels: bool
    class_names: tuple[str, ...]
    data_offset: int


def encode_dataset(ids: list[bytes], clouds, labels=None, class_names: Iterable[str] = ()) -> bytes:
    clouds = np.asarray(clouds)
    if clouds.ndim != 3 or clouds.shape[2] != 3 or clouds.shape[0] != len(ids):
        raise ValueError(f"expected ({len(ids)}, n, 3) clouds, got {clouds.shape}")
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    names = [n.encode("utf-8") for n in class_names]
    parts = [DATASET_MAGIC, struct.pack("<IQII", VERSION, len(ids), clouds.shape[1], int(labels is not None)),
             struct.pack("<I", len(names))]
    parts += [struct.pack("<H", len(n)) + n for n in names]
    payload = clouds.astype(F32)
    for i, sid in enumerate(ids):
        parts.append(_check_id(sid))
        if labels is not None:
            parts.append(struct.pack("<I", int(labels[i])))
        parts.append(payload[i].tobytes())
    return b"".join(parts)


def write_dataset(path, ids, clouds, labels=None, class_names: Iterable[str] = ()) -> None:
    atomic_write(path, encode_dataset(list(ids), clouds, labels, class_names))


def save_dataset(path, ds: Dataset) -> None:
    write_dataset(path, ds.ids, ds.clouds, ds.labels, ds.class_names)


def _dataset_header(rd: _Reader) -> DatasetHeader:
    rd.magic(DATASET_MAGIC)
    count, n_points, flags = rd.unpack("QII")
    if flags & ~1:
        raise FormatError(f"unknown flag bits {flags:#x}", rd.offset - 4, rd.path)
    n_classes = rd.unpack("I")
    names = []
    for _ in range(n_classes):
        size = rd.unpack("H")
        at = rd.offset
        try:
            names.append(rd.take(size).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("class name is not valid UTF-8", at, rd.path) from exc
    return DatasetHeader(count, n_points, bool(flags & 1), tuple(names), rd.offset)


def read_dataset_header(path) -> DatasetHeader:
    with _open(path) as fh:
        return _dataset_header(_Reader(fh, path))


def read_dataset(path) -> Iterator[tuple[bytes, np.ndarray, int | None]]:
    """Stream ``(id, cloud, label)`` in file order, validating sizes as it goes."""
    with _open(path) as fh:
        rd = _Reader(fh, path)
        head = _dataset_header(rd)
        seen = set()
        for _ in range(head.count):
            at = rd.offset
            sid = rd.take(ID_BYTES)
            if sid in seen:
                raise FormatError(f"duplicate sample id {sid!r}", at, path)
            seen.add(sid)
            label = rd.unpack("I") if head.has_labels else None
            at = rd.offset
            cloud = rd.floats(head.num_points * 3).reshape(head.num_points, 3)
            if not np.all(np.isfinite(cloud)):
                raise NonFiniteValueError("non-finite coordinate", at, path)
            yield sid, cloud, label
        rd.expect_eof()


def load_dataset(path) -> Dataset:
    head = read_dataset_header(path)
    ids, clouds, labels = [], [], []
    for sid, cloud, label in read_dataset(path):
        ids.append(sid)
        clouds.append(cloud)
        labels.append(label)
    arr = np.stack(clouds) if clouds else np.zeros((0, head.num_points, 3), dtype=F32)
    lab = np.asarray(labels, dtype=np.int64) if head.has_labels else None
    return Dataset(ids, arr, lab, list(head.class_names))


# --- checkpoints --------------------------------------------------------------

@dataclass
class OptimizerSnapshot:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: OptimizerSnapshot | None = None


def _encode_table(tensors: dict[str, np.ndarray]) -> list[bytes]:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=F32).tobytes())
    return out


def _decode_table(rd: _Reader) -> dict[str, np.ndarray]:
    count = rd.unpack("I")
    out = {}
    for _ in range(count):
        at = rd.offset
        size = rd.unpack("H")
        name = rd.take(size).decode("utf-8", errors="strict")
        if name in out:
            raise FormatError(f"tensor {name!r} appears twice", at, rd.path)
        ndim = rd.unpack("B")
        shape = tuple(rd.unpack(f"{ndim}I")) if ndim > 1 else ((rd.unpack("I"),) if ndim else ())
        at = rd.offset
        data = rd.floats(int(np.prod(shape, dtype=np.int64)))
        if not np.all(np.isfinite(data)):
            raise NonFiniteValueError(f"non-finite value in {name!r}", at, rd.path)
        out[name] = data.reshape(shape)
    return out


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = json.dumps({"config": ck.config.to_dict(), "meta": ck.meta}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION), ck.config.digest(),
             struct.pack("<QQ", ck.seed, ck.step), struct.pack("<I", len(meta)), meta]
    parts += _encode_table(ck.tensors)
    if ck.optimizer is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<Q", ck.optimizer.step))
        parts += _encode_table(ck.optimizer.m)
        parts += _encode_table(ck.optimizer.v)
    return b"".join(parts)


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    """Parse a checkpoint; with ``expected`` the stored config digest must match unless ``force``."""
    with _open(path) as fh:
        rd = _Reader(fh, path)
        rd.magic(CHECKPOINT_MAGIC)
        digest = rd.take(32)
        seed, step = rd.unpack("QQ")
        size = rd.unpack("I")
        at = rd.offset
        raw = rd.take(size)
        try:
            blob = json.loads(raw.decode("utf-8"))
            config = ModelConfig.from_dict(blob["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"unreadable metadata: {exc}", at, path) from exc
        if config.digest() != digest:
            raise FormatError("stored digest does not match stored config", 8, path)
        tensors = _decode_table(rd)
        at = rd.offset
        flag = rd.unpack("B")
        opt = None
        if flag == 1:
            ostep = rd.unpack("Q")
            opt = OptimizerSnapshot(ostep, _decode_table(rd), _decode_table(rd))
        elif flag != 0:
            raise FormatError(f"bad optimizer flag {flag}", at, path)
        rd.expect_eof()
    if expected is not None and expected.digest() != digest and not force:
        raise DigestMismatchError(f"{path}: checkpoint config digest {digest.hex()[:12]} "
                                  f"differs from expected {expected.digest().hex()[:12]}")
    return Checkpoint(config, tensors, seed, step, blob.get("meta", {}), opt)


def checkpoint_size(tensors: dict[str, np.ndarray], meta_len: int, optimizer: bool = False) -> int:
    """Exact byte size implied by the layout (without optimizer moments)."""
    head = 4 + 4 + 32 + 8 + 8 + 4 + meta_len + 4
    body = sum(2 + len(n.encode()) + 1 + 4 * np.ndim(a) + 4 * np.size(a) for n, a in tensors.items())
    return head + body + 1 + (8 if optimizer else 0)


# --- model state --------------------------------------------------------------

def state_dict(model) -> dict[str, np.ndarray]:
    """Canonical name -> array for every parameter and normalisation buffer."""
    out = {name: p.data for name, p in model.named_parameters()}
    out.update(dict(model.named_buffers()))
    return out


def load_state(model, tensors: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> list[str]:
    """Copy tensors whose names start with ``prefix`` into ``model``.

    Returns the names that were restored. With ``strict`` every model entry
    under ``prefix`` must be present.
    """
    params = {n: p for n, p in model.named_parameters() if n.startswith(prefix)}
    buffers = {n for n, _ in model.named_buffers() if n.startswith(prefix)}
    loaded = []
    for name in sorted(params.keys() | buffers):
        if name not in tensors:
            if strict:
                raise MissingTensorError(f"checkpoint has no tensor {name!r}")
            continue
        arr = tensors[name]
        if name in params:
            p = params[name]
            if arr.shape != p.shape:
                raise TensorShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
        else:
            model.set_buffer(name, arr)
        loaded.append(name)
    return loaded


def load_encoder(model, ck: Checkpoint) -> list[str]:
    """Transfer ``encoder.*`` tensors only; heads keep their fresh initialisation."""
    return load_state(model, ck.tensors, prefix="encoder.")


__all__ = [
    "Dataset", "DatasetHeader", "Checkpoint", "OptimizerSnapshot", "ID_BYTES",
    "sample_id", "atomic_write", "encode_dataset", "write_dataset", "save_dataset",
    "read_dataset", "read_dataset_header", "load_dataset", "encode_checkpoint",
    "save_checkpoint", "load_checkpoint", "checkpoint_size", "state_dict", "load_state",
    "load_encoder",
]
