"""Binary dataset files of (ground truth, coarse) grid pairs.

Layout, little-endian::

    b"VOXD" | u16 version | u16 K | u16 H | u16 W | u16 D | u32 count
    count x ( gt: H*W*D u8 | coarse: H*W*D u8 )
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VOXD"
VERSION = 1
HEADER = struct.Struct("<4sHHHHHI")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int, record: int | None = None):
        where = f" (byte offset {offset}" + (f", record {record})" if record is not None else ")")
        super().__init__(message + where)
        self.offset = offset
        self.record = record


@dataclass(frozen=True)
class DatasetHeader:
    num_classes: int
    dims: tuple[int, int, int]
    count: int

    @property
    def record_bytes(self) -> int:
        return 2 * int(np.prod(self.dims))

    @property
    def file_size(self) -> int:
        return HEADER.size + self.count * self.record_bytes


def write_dataset(path, records: list[tuple[np.ndarray, np.ndarray]], num_classes: int) -> DatasetHeader:
    if not records:
        raise ValueError("cannot write an empty dataset")
    dims = tuple(int(s) for s in records[0][0].shape)
    header = DatasetHeader(num_classes, dims, len(records))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, num_classes, *dims, len(records)))
        for i, (gt, coarse) in enumerate(records):
            for grid in (gt, coarse):
                if grid.shape != dims:
                    raise ValueError(f"record {i} has dims {grid.shape}, expected {dims}")
                if grid.max(initial=0) >= num_classes:
                    raise ValueError(f"record {i} holds a label >= {num_classes}")
                fh.write(np.ascontiguousarray(grid, dtype=np.uint8).tobytes())
    os.replace(tmp, path)
    return header


def read_header(blob: bytes) -> DatasetHeader:
    if len(blob) < HEADER.size:
        raise DatasetFormatError("file shorter than header", len(blob))
    magic, version, k, h, w, d, count = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if min(h, w, d) == 0 or k == 0:
        raise DatasetFormatError("zero-sized dims or class count", 6)
    return DatasetHeader(k, (h, w, d), count)


def read_dataset(path) -> tuple[list[tuple[np.ndarray, np.ndarray]], DatasetHeader]:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = read_header(blob)
    n = int(np.prod(header.dims))
    records = []
    offset = HEADER.size
    for i in range(header.count):
        end = offset + 2 * n
        if end > len(blob):
            raise DatasetFormatError(f"truncated record {i}", min(offset, len(blob)), i)
        pair = np.frombuffer(blob, dtype=np.uint8, count=2 * n, offset=offset).reshape(2, *header.dims)
        if pair.max(initial=0) >= header.num_classes:
            raise DatasetFormatError(f"label out of range in record {i}", offset, i)
        records.append((pair[0].copy(), pair[1].copy()))
        offset = end
    if offset != len(blob):
        raise DatasetFormatError(f"{len(blob) - offset} trailing bytes", offset)
    return records, header


def split_dataset(n_records: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], ...]:
    """Deterministic disjoint split of ``range(n_records)`` by ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(n_records)
    cuts = np.floor(np.cumsum(ratios)[:-1] * n_records).astype(int)
    return tuple(sorted(part.tolist()) for part in np.split(perm, cuts))
