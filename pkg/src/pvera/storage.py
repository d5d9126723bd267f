"""File formats: PVT1 tensors, JSON reports, CSV tables.

PVT1 layout (little-endian throughout):
    bytes 0..7   magic "PVTENS01"
    bytes 8..11  u32 rank
    next rank*8  u64 extents
    rest         product(extents) float64 values, row-major
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PVTENS01"


def save_tensor(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.float64)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: truncated header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_end = len(MAGIC) + 4 + 8 * rank
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated extent list (rank {rank})")
    shape = struct.unpack_from(f"<{rank}Q", raw, len(MAGIC) + 4)
    count = int(np.prod(shape)) if rank else 1
    expected = header_end + 8 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - header_end} bytes, "
            f"extents {tuple(shape)} require {8 * count}"
        )
    values = np.frombuffer(raw, dtype="<f8", offset=header_end, count=count)
    return values.reshape(shape).astype(np.float64)


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]
