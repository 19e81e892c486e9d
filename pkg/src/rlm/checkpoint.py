"""Binary checkpoint format.

Layout, all integers little-endian::

    b"RLMCKPT1"                      magic, 8 bytes
    u32 format version
    u64 length + UTF-8 JSON          {"config", "vocabulary", "train_state"}
    u32 tensor count
    per tensor:
        u32 length + UTF-8 name
        u32 rank, rank x u32 dims
        u8 dtype code (0 = float32, 1 = float64)
        raw little-endian values

Writes go to a temporary file in the target directory and are renamed into
place.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"RLMCKPT1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class CheckpointManifest:
    config: dict[str, Any]
    vocabulary: list[str]
    tensors: dict[str, np.ndarray]
    train_state: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _dump_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def to_bytes(manifest: CheckpointManifest) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", manifest.format_version))
    meta = _dump_json({
        "config": manifest.config,
        "vocabulary": manifest.vocabulary,
        "train_state": manifest.train_state,
    })
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(manifest.tensors)))
    for name, arr in manifest.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, manifest: CheckpointManifest) -> None:
    data = to_bytes(manifest)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> CheckpointManifest:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an RLMCKPT1 checkpoint")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt metadata block: {err}") from None
    for key in ("config", "vocabulary", "train_state"):
        if key not in meta:
            raise CheckpointError(f"metadata missing field {key!r}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        (code,) = r.unpack("<B", f"dtype of {name!r}")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(size * dt.itemsize, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return CheckpointManifest(meta["config"], meta["vocabulary"], tensors,
                              meta["train_state"], version)


def load_checkpoint(path: str | os.PathLike) -> CheckpointManifest:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def check_shapes(manifest: CheckpointManifest, expected: Mapping[str, tuple[int, ...]]) -> None:
    """Raise ``CheckpointError`` naming the first tensor that does not fit ``expected``."""
    missing = [k for k in expected if k not in manifest.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
    extra = [k for k in manifest.tensors if k not in expected]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name, shape in expected.items():
        got = manifest.tensors[name].shape
        if tuple(got) != tuple(shape):
            raise CheckpointError(f"tensor {name!r}: shape {tuple(got)} does not match expected {tuple(shape)}")
