"""Binary checkpoint format.

Layout (little-endian)::

    magic   4 bytes  b"FSSC"
    version u16
    digest  32 bytes sha256 of the model's structural config
    count   u32      number of tensor records
    records          name_len u16, name utf-8, dtype tag u8, rank u8,
                     dims u32 * rank, raw payload
    crc32   u32      over every preceding byte

Metadata (iteration counter, config structure, kind) travels as a ``u8``
record named ``meta.json``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FSSC"
VERSION = 1
PREFIX = struct.Struct("<4sH32sI")
META_NAME = "meta.json"

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("u1"): 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: bytes
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors whose names start with ``prefix + '.'``, with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise CheckpointError("digest must be 32 bytes")
    items = dict(ckpt.tensors)
    if META_NAME in items:
        raise CheckpointError(f"tensor name {META_NAME!r} is reserved")
    items[META_NAME] = np.frombuffer(json.dumps(ckpt.meta, sort_keys=True).encode(), dtype=np.uint8)
    parts = [PREFIX.pack(MAGIC, VERSION, ckpt.digest, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, expected_digest: bytes | None = None) -> Checkpoint:
    if len(blob) < PREFIX.size + 4:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file corrupted)")
    magic, version, digest, count = PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written for a different model configuration")
    pos = PREFIX.size
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            if tag not in TAG_DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
            dt = TAG_DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as err:
        raise CheckpointError(f"malformed tensor record at byte {pos}") from err
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} unexpected trailing bytes")
    meta_raw = tensors.pop(META_NAME, None)
    meta = json.loads(meta_raw.tobytes().decode()) if meta_raw is not None else {}
    return Checkpoint(digest, tensors, meta)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return decode(blob, expected_digest)


def prefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}
