"""Field snapshot files.

Layout: magic ``b"CLF1"``, a little-endian uint32 header length, a UTF-8 JSON
header, then the float64 payload (row-major, components concatenated).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import SnapshotError
from .grid import Field, MatrixField, PeriodicGrid, ScalarField, VectorField

MAGIC = b"CLF1"
VERSION = 1
_CLASSES = {0: ScalarField, 1: VectorField, 2: MatrixField}


def encode(f: Field, name: str = "") -> bytes:
    header = {**f.grid.to_dict(), "rank": f.rank, "name": name,
              "endianness": "little", "version": VERSION}
    hb = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(f.data, dtype="<f8").tobytes()
    return MAGIC + struct.pack("<I", len(hb)) + hb + payload


def decode(buf: bytes, expect_dim: int | None = None) -> tuple[Field, str]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise SnapshotError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise SnapshotError(f"truncated header: expected at least {8 + hlen} bytes, got {len(buf)}")
    try:
        header = json.loads(buf[8:8 + hlen].decode())
        dim = int(header["dim"])
        shape = tuple(int(n) for n in header["points_per_axis"])
        lengths = tuple(float(x) for x in header["axis_length"])
        rank = int(header["rank"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"corrupt header: {exc}") from exc
    if header.get("version", VERSION) != VERSION:
        raise SnapshotError(f"unsupported snapshot version {header.get('version')}")
    if header.get("endianness", "little") != "little":
        raise SnapshotError(f"foreign endianness {header.get('endianness')!r}; only little-endian is read")
    if len(shape) != dim or len(lengths) != dim:
        raise SnapshotError(f"header dimension {dim} disagrees with axis lists of length {len(shape)}")
    if expect_dim is not None and dim != expect_dim:
        raise SnapshotError(f"dimension mismatch: expected {expect_dim}, file has {dim}")
    if rank not in _CLASSES:
        raise SnapshotError(f"unsupported rank {rank}")
    lead = {0: (), 1: (dim,), 2: (3, 3)}[rank]
    full = lead + shape
    need = 8 + hlen + 8 * int(np.prod(full))
    if len(buf) != need:
        raise SnapshotError(f"payload size mismatch: expected {need} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", offset=8 + hlen).reshape(full)
    try:
        field = _CLASSES[rank](PeriodicGrid(shape, lengths), data.astype(np.float64))
    except ValueError as exc:
        raise SnapshotError(f"invalid field in snapshot: {exc}") from exc
    return field, str(header.get("name", ""))


def write_snapshot(path, f: Field, name: str = "") -> Path:
    path = Path(path)
    path.write_bytes(encode(f, name))
    return path


def ingest(path, expect_dim: int | None = None) -> Field:
    """Read a snapshot file written by :func:`write_snapshot`."""
    return decode(Path(path).read_bytes(), expect_dim)[0]
