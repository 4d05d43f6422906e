"""Portable image emitters for parameter maps.

Gray maps go to 16-bit binary PGM (big-endian sample words, as the format
requires); azimuth maps go to 8-bit binary PPM with hue = twice the axial
angle, so 0 and 180 degrees share a colour.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ParameterError


def write_pgm16(path, values: np.ndarray, vmin: float, vmax: float) -> None:
    """Affine map [vmin, vmax] -> [0, 65535], clipped, 16-bit binary PGM."""
    if values.ndim != 2:
        raise FormatError(f"PGM needs a 2D map, got shape {values.shape}")
    if not vmax > vmin:
        raise ParameterError(f"degenerate display range [{vmin}, {vmax}]")
    scaled = (np.asarray(values, np.float64) - vmin) / (vmax - vmin) * 65535.0
    gray = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm_azimuth(path, phi_deg: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Axial angle to hue wheel: full saturation, dark where invalid."""
    if phi_deg.ndim != 2:
        raise FormatError(f"PPM needs a 2D map, got shape {phi_deg.shape}")
    hue = (2.0 * np.asarray(phi_deg, np.float64)) % 360.0
    value = np.ones_like(hue) if valid is None else valid.astype(np.float64)
    rgb = _hsv_to_rgb(hue, np.ones_like(hue), value)
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = phi_deg.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _hsv_to_rgb(h_deg, s, v):
    h6 = (h_deg / 60.0) % 6.0
    i = np.floor(h6).astype(int)
    f = h6 - i
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    out = np.zeros(h_deg.shape + (3,))
    for idx, (r, g, b) in enumerate([(v, t, p), (q, v, p), (p, v, t),
                                     (p, q, v), (t, p, v), (v, p, q)]):
        sel = i == idx
        out[sel, 0] = np.broadcast_to(r, h_deg.shape)[sel]
        out[sel, 1] = np.broadcast_to(g, h_deg.shape)[sel]
        out[sel, 2] = np.broadcast_to(b, h_deg.shape)[sel]
    return out


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise FormatError("unexpected image magic")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise FormatError("truncated image header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(v) for v in text.split())
    return fields  # width, height, maxval


def read_pgm16(path):
    """Parse the binary 16-bit PGM written by write_pgm16."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 65535:
            raise FormatError(f"expected 16-bit PGM, maxval={maxval}")
        data = np.frombuffer(fh.read(), dtype=">u2")
    if data.size != w * h:
        raise FormatError("PGM payload size mismatch")
    return data.reshape(h, w).astype(np.uint16)


def read_ppm8(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise FormatError(f"expected 8-bit PPM, maxval={maxval}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError("PPM payload size mismatch")
    return data.reshape(h, w, 3)
