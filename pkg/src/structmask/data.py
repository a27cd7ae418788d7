"""Synthetic sparse signals and IDX image files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPARSITY_MODES = ("bernoulli", "exact")
AMPLITUDES = ("gaussian", "beta28")


@dataclass(frozen=True)
class SyntheticSpec:
    """Random sparse vectors of length ``n``.

    ``bernoulli`` draws each support entry independently with probability
    ``s/n`` (expected sparsity ``s``); ``exact`` picks ``s`` positions without
    replacement. Nonzeros are standard normal or Beta(2, 8).
    """

    n: int
    s: int
    mode: str = "bernoulli"
    amplitude: str = "gaussian"

    def __post_init__(self):
        if not 1 <= self.s <= self.n:
            raise ParameterError(f"sparsity s={self.s} outside [1, {self.n}]")
        if self.mode not in SPARSITY_MODES:
            raise ParameterError(f"unknown sparsity mode {self.mode!r}")
        if self.amplitude not in AMPLITUDES:
            raise ParameterError(f"unknown amplitude law {self.amplitude!r}")


def gen_sparse(spec: SyntheticSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """``(count, n)`` array of sparse signals."""
    n, s = spec.n, spec.s
    if spec.mode == "bernoulli":
        support = rng.random((count, n)) < s / n
    else:
        support = np.zeros((count, n), dtype=bool)
        idx = np.argsort(rng.random((count, n)), axis=1)[:, :s]
        np.put_along_axis(support, idx, True, axis=1)
    if spec.amplitude == "gaussian":
        amp = rng.standard_normal((count, n))
    else:
        amp = rng.beta(2.0, 8.0, size=(count, n))
    return np.where(support, amp, 0.0)


# ---------------------------------------------------------------- IDX


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> tuple[int, np.ndarray]:
    """Return ``(magic, array)`` for an unsigned-byte IDX file (optionally gzipped)."""
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    rank = magic & 0xFF
    hdr = 4 + 4 * rank
    if len(buf) < hdr:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    dims = struct.unpack(f">{rank}I", buf[4:hdr])
    need = int(np.prod(dims))
    if len(buf) - hdr < need:
        raise FormatError(f"{path}: truncated payload at byte offset {len(buf)} "
                          f"(expected {hdr + need} bytes)")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=hdr).reshape(dims)
    return magic, data


def load_idx_images(path) -> np.ndarray:
    """Images as ``(count, rows*cols)`` floats in ``[0, 1]``."""
    magic, data = read_idx(path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    return data.reshape(data.shape[0], -1).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    magic, data = read_idx(path)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    return data.copy()


def write_idx(path, data: np.ndarray, compress: bool = False) -> None:
    """Write a ``uint8`` array as IDX (images for rank 3, labels for rank 1)."""
    data = np.ascontiguousarray(data, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(data.ndim)
    if magic is None:
        raise FormatError("IDX writer supports rank-1 labels or rank-3 images")
    payload = struct.pack(">I", magic) + struct.pack(f">{data.ndim}I", *data.shape) + data.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def mnist_subset_to_idx(dest) -> tuple[Path, Path]:
    """Write the 5000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    Returns the image and label paths. Requires the optional ``mlxtend``
    package; the sample keeps its bundled order.
    """
    try:
        from importlib.resources import files
        src = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError as e:
        raise FileNotFoundError("mlxtend is not installed; pass an IDX file instead") from e
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    images = dest / "mnist5k-images-idx3-ubyte.gz"
    labels = dest / "mnist5k-labels-idx1-ubyte.gz"
    write_idx(images, table[:, :-1].reshape(-1, 28, 28), compress=True)
    write_idx(labels, table[:, -1], compress=True)
    return images, labels
