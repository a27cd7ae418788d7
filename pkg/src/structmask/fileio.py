"""Binary matrix files, PGM mask images, metric CSVs and run manifests.

Matrix record layout (all integers little-endian)::

    8 bytes   magic b"GLDM0001"
    u32       rank
    u32 * r   dimensions
    u32       dtype tag: 0 = float64, 1 = binary stored as uint8
    payload   row-major values

A checkpoint is several records written back to back.
"""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError

MAGIC = b"GLDM0001"
DTYPE_F64 = 0
DTYPE_BINARY = 1
CSV_COLUMNS = ("epoch", "split", "metric", "value", "seed")


def encode_matrix(a: np.ndarray, binary: bool | None = None) -> bytes:
    a = np.asarray(a)
    if binary is None:
        binary = a.dtype == np.uint8 or a.dtype == bool
    if binary:
        if not np.all((a == 0) | (a == 1)):
            raise FormatError("binary matrices may only hold 0 and 1")
        payload = np.ascontiguousarray(a, dtype=np.uint8).tobytes()
        tag = DTYPE_BINARY
    else:
        payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
        tag = DTYPE_F64
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<I", tag)
    return header + payload


def _decode(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 8] != MAGIC:
        raise FormatError(f"bad magic at byte offset {offset}")
    pos = offset + 8
    if len(buf) < pos + 4:
        raise FormatError(f"truncated header at byte offset {len(buf)}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank + 4:
        raise FormatError(f"truncated header at byte offset {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (tag,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    count = int(np.prod(dims)) if rank else 1
    if tag == DTYPE_F64:
        nbytes, dtype = 8 * count, "<f8"
    elif tag == DTYPE_BINARY:
        nbytes, dtype = count, np.uint8
    else:
        raise FormatError(f"unknown dtype tag {tag} at byte offset {pos - 4}")
    if len(buf) < pos + nbytes:
        raise FormatError(f"payload size mismatch: need {nbytes} bytes after offset {pos}, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims).copy()
    if tag == DTYPE_F64:
        arr = arr.astype(np.float64)
    return arr, pos + nbytes


def write_matrix(path, a: np.ndarray, binary: bool | None = None) -> None:
    Path(path).write_bytes(encode_matrix(a, binary))


def read_matrix(path) -> np.ndarray:
    """Read a file holding exactly one record."""
    buf = Path(path).read_bytes()
    arr, end = _decode(buf, 0)
    if end != len(buf):
        raise FormatError(f"payload size mismatch: {len(buf) - end} trailing bytes")
    return arr


def write_matrices(path, arrays: Iterable[np.ndarray]) -> None:
    Path(path).write_bytes(b"".join(encode_matrix(a) for a in arrays))


def read_matrices(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = _decode(buf, pos)
        out.append(arr)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5); values are scaled from [min, max] to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def metrics_csv(rows: Iterable[dict], extra: tuple[str, ...] = ()) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(extra) + list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        if isinstance(out.get("value"), float):
            out["value"] = repr(out["value"])
        writer.writerow(out)
    return buf.getvalue()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config_hash: str, seed: int, files: Iterable[str]) -> Path:
    out_dir = Path(out_dir)
    lines = [f"config_sha256 {config_hash}", f"seed {seed}"]
    for name in sorted(files):
        lines.append(f"file {name} {sha256_file(out_dir / name)}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
