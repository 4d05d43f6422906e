"""Reader/writer for the MPAC array interchange format.

Independent implementation of the toolkit's container layout (magic, u32-LE
header length, JSON header, raw little-endian payload); this package talks
to the processing toolkit only through files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MPAC"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save(path, array: np.ndarray, labels=None) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _TAGS:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = {
        "dtype": _TAGS[arr.dtype],
        "shape": list(arr.shape),
        "order": "row-major",
        "endian": "LE",
    }
    if labels:
        header["labels"] = list(labels)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MPAC container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[8 + hlen :]
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(
        dtype.newbyteorder("="), copy=True
    )
