"""Array containers, masks, value rescaling and the MPAC interchange format.

MPAC is a magic-tagged binary layout for bit-exact exchange of float arrays:

    bytes 0-3    magic ``MPAC``
    bytes 4-7    unsigned 32-bit little-endian header length L
    bytes 8..8+L UTF-8 JSON: {"dtype": "f32"|"f64", "shape": [...],
                              "order": "row-major", "endian": "LE",
                              "labels": [...]}   (labels optional)
    remainder    raw little-endian values, row-major, no padding
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, ParameterError, UnsupportedDtypeError

MAGIC = b"MPAC"

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

N_CHANNELS = 16


@dataclass(frozen=True)
class ArrayField:
    """A dense float array plus optional per-axis semantic labels."""

    data: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.dtype not in _TAG_FOR_KIND:
            raise UnsupportedDtypeError(f"unsupported dtype {arr.dtype}, need float32/float64")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype


@dataclass(frozen=True)
class IntensityTensor:
    """H x W x 16 field of polarisation-state intensities.

    Channel ``4*(i-1) + (j-1)`` holds the intensity for analyser state i and
    generator state j (1-based).  ``signed`` tracks the value-range state:
    False for camera counts in [0, 1], True after rescaling to [-1, 1].
    """

    values: np.ndarray
    signed: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.values)
        if v.ndim != 3 or v.shape[2] != N_CHANNELS:
            raise FormatError(f"intensity tensor must be (H, W, {N_CHANNELS}), got {v.shape}")
        if v.dtype not in _TAG_FOR_KIND:
            raise UnsupportedDtypeError(f"unsupported dtype {v.dtype}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def channel_index(analyser_state: int, generator_state: int) -> int:
    """Map 1-based (analyser, generator) state indices to the channel axis."""
    if not (1 <= analyser_state <= 4 and 1 <= generator_state <= 4):
        raise ParameterError("state indices are 1-based in 1..4")
    return 4 * (analyser_state - 1) + (generator_state - 1)


def save_array(field: ArrayField | np.ndarray, path, labels=None) -> None:
    """Write an MPAC container; the written file re-loads bit-identically."""
    if isinstance(field, np.ndarray):
        field = ArrayField(field, tuple(labels) if labels else None)
    header = {
        "dtype": _TAG_FOR_KIND[field.dtype],
        "shape": list(field.shape),
        "order": "row-major",
        "endian": "LE",
    }
    if field.labels:
        header["labels"] = list(field.labels)
    blob = json.dumps(header).encode("utf-8")
    payload = np.ascontiguousarray(field.data, dtype=field.data.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_array(path, allow_nonfinite: bool = False) -> ArrayField:
    """Read an MPAC container, verifying magic, header and payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an MPAC container (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise CorruptionError(f"{path}: header truncated")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    dtype_tag = header.get("dtype")
    if dtype_tag not in _DTYPE_TAGS:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype tag {dtype_tag!r}")
    if header.get("order", "row-major") != "row-major":
        raise FormatError(f"{path}: unsupported element order {header.get('order')!r}")
    if header.get("endian", "LE") != "LE":
        raise FormatError(f"{path}: unsupported endianness {header.get('endian')!r}")
    shape = tuple(int(n) for n in header.get("shape", []))
    dtype = _DTYPE_TAGS[dtype_tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[8 + header_len :]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    data = data.astype(dtype.newbyteorder("="), copy=True)
    if not allow_nonfinite and not np.all(np.isfinite(data)):
        raise CorruptionError(f"{path}: payload contains non-finite values")
    labels = header.get("labels")
    return ArrayField(data, tuple(labels) if labels else None)


def save_intensity(tensor: IntensityTensor, path) -> None:
    save_array(tensor.values, path, labels=("intensity",))


def load_intensity(path) -> IntensityTensor:
    field = load_array(path)
    if field.data.ndim != 3 or field.data.shape[2] != N_CHANNELS:
        raise FormatError(f"{path}: expected (H, W, {N_CHANNELS}) intensities, got {field.shape}")
    return IntensityTensor(field.data)


def save_mask(mask: np.ndarray, path) -> None:
    save_array(mask.astype(np.float32), path, labels=("mask",))


def load_mask(path) -> np.ndarray:
    return load_array(path).data > 0.5


def rescale_to_signed_unit(tensor: IntensityTensor, lo: float, hi: float) -> IntensityTensor:
    """Affine map sending lo -> -1 and hi -> +1 (the network's input range)."""
    if not hi > lo:
        raise ParameterError(f"degenerate rescale range: lo={lo}, hi={hi}")
    v = tensor.values
    out = (2.0 * v - (lo + hi)) / (hi - lo)
    return IntensityTensor(out.astype(v.dtype, copy=False), signed=True)


def rescale_from_signed_unit(tensor: IntensityTensor, lo: float, hi: float) -> IntensityTensor:
    """Inverse of :func:`rescale_to_signed_unit`."""
    if not hi > lo:
        raise ParameterError(f"degenerate rescale range: lo={lo}, hi={hi}")
    v = tensor.values
    out = (v * (hi - lo) + (lo + hi)) / 2.0
    return IntensityTensor(out.astype(v.dtype, copy=False), signed=False)


def mask_reflections(tensor: IntensityTensor, threshold: float = 0.98) -> np.ndarray:
    """True where a pixel stays below the saturation threshold in all channels.

    False marks supra-threshold reflections that must be excluded from
    statistics and passed through denoising untouched.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"reflection threshold must be in (0, 1], got {threshold}")
    if tensor.signed:
        raise ParameterError("mask_reflections expects the [0, 1] range state")
    return ~(tensor.values >= threshold).any(axis=2)


def _binary_open_cross(mask: np.ndarray) -> np.ndarray:
    """One erosion + one dilation with a 3x3 cross, mirror border."""
    padded = np.pad(mask, 1, mode="symmetric")
    c = padded[1:-1, 1:-1]
    n = padded[:-2, 1:-1]
    s = padded[2:, 1:-1]
    w = padded[1:-1, :-2]
    e = padded[1:-1, 2:]
    eroded = c & n & s & w & e
    padded = np.pad(eroded, 1, mode="symmetric")
    c = padded[1:-1, 1:-1]
    n = padded[:-2, 1:-1]
    s = padded[2:, 1:-1]
    w = padded[1:-1, :-2]
    e = padded[1:-1, 2:]
    return c | n | s | w | e


def compute_roi(tensor: IntensityTensor, bg_threshold: float) -> np.ndarray:
    """Tissue/background separation: threshold on the unpolarised channel.

    The channel for analyser state 1 / generator state 1 is thresholded and
    the raw mask is opened (3x3 cross) to drop speckle.
    """
    if tensor.signed:
        raise ParameterError("compute_roi expects the [0, 1] range state")
    raw = tensor.values[:, :, channel_index(1, 1)] > bg_threshold
    return _binary_open_cross(raw)
