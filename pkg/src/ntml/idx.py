"""IDX (MNIST-style) reading and writing for :class:`~ntml.poisoning.Dataset`.

A dataset directory holds four unsigned-byte IDX files::

    images.idx           rank 4, N x C x H x W
    labels.idx           rank 1, N
    original_labels.idx  rank 1, N
    poisoned.idx         rank 1, N  (0/1)

Each file is ``00 00 08 <ndim>``, ``ndim`` big-endian u32 sizes, then the raw
payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .poisoning import Dataset

UBYTE = 0x08
FILES = {"images": 4, "labels": 1, "original_labels": 1, "poisoned": 1}


def save_uint8(data: np.ndarray, path) -> None:
    data = np.ascontiguousarray(data, dtype=np.uint8)
    header = struct.pack("BBBB", 0, 0, UBYTE, data.ndim)
    header += struct.pack(">" + "I" * data.ndim, *data.shape)
    Path(path).write_bytes(header + data.tobytes())


def load_uint8(path, ndim: int | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    zero0, zero1, dtype, nd = struct.unpack("BBBB", buf[:4])
    if zero0 or zero1 or dtype != UBYTE:
        raise FormatError(f"{path}: bad magic {buf[:4].hex()}")
    if ndim is not None and nd != ndim:
        raise FormatError(f"{path}: expected {ndim} dimensions, header says {nd}")
    end = 4 + 4 * nd
    if len(buf) < end:
        raise FormatError(f"{path}: truncated dimension list")
    shape = struct.unpack(">" + "I" * nd, buf[4:end])
    size = int(np.prod(shape, dtype=np.int64))
    if len(buf) - end != size:
        raise FormatError(f"{path}: payload has {len(buf) - end} bytes, dims need {size}")
    return np.frombuffer(buf, dtype=np.uint8, offset=end).reshape(shape).copy()


def write_idx(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if len(ds) and max(ds.labels.max(), ds.original_labels.max()) > 255:
        raise FormatError("labels above 255 do not fit an unsigned-byte IDX file")
    save_uint8(ds.images, d / "images.idx")
    save_uint8(ds.labels, d / "labels.idx")
    save_uint8(ds.original_labels, d / "original_labels.idx")
    save_uint8(ds.poisoned.astype(np.uint8), d / "poisoned.idx")


def read_idx(directory) -> Dataset:
    d = Path(directory)
    arrays = {}
    for name, nd in FILES.items():
        path = d / f"{name}.idx"
        if not path.exists():
            raise FormatError(f"{path} missing")
        arrays[name] = load_uint8(path, nd)
    n = arrays["images"].shape[0]
    for name in ("labels", "original_labels", "poisoned"):
        if arrays[name].shape[0] != n:
            raise FormatError(f"{name}.idx has {arrays[name].shape[0]} entries, images has {n}")
    if np.any(arrays["poisoned"] > 1):
        raise FormatError("poisoned flags must be 0 or 1")
    try:
        return Dataset(arrays["images"], arrays["labels"], arrays["original_labels"],
                       arrays["poisoned"].astype(bool))
    except ValueError as exc:
        raise FormatError(f"{d}: {exc}") from exc
