"""Polar factorisation of the Mueller field and the scalar biomarker maps.

The factorisation follows the product-of-three-elements scheme: a
diattenuator is peeled off first, the remainder splits into a depolariser
(symmetric square-root factor) and a rotational retarder.  Fully
depolarising pixels with a singular remainder take a Moore-Penrose path and
lose their validity flag instead of aborting the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend, _kernels_np
from .containers import ArrayField, IntensityTensor, save_array, load_array
from .errors import FormatError
from .mueller import CalibrationField, MuellerField, compute_mueller, normalize_mueller

_D_MAX = 1.0 - 1e-9
_AZIMUTH_EPS = 1e-12


@dataclass
class DecomposedField:
    """Per-pixel factor matrices: M = depolariser @ retarder @ diattenuator."""

    diattenuator: np.ndarray  # (H, W, 4, 4)
    retarder: np.ndarray
    depolariser: np.ndarray
    valid: np.ndarray  # (H, W) bool, cleared on degenerate pixels
    degenerate: np.ndarray  # (H, W) bool, pseudo-inverse path taken
    sign_flags: np.ndarray  # (H, W) int8, sign of det of the retained 3x3
    diatt_clamped: np.ndarray  # (H, W) bool, |D| hit the < 1 clamp


@dataclass
class PolarParamMaps:
    """Scalar biomarker maps in their physical ranges."""

    diattenuation: np.ndarray  # [0, 1]
    depolarization: np.ndarray  # [0, 1]
    retardance_deg: np.ndarray  # [0, 180]
    azimuth_deg: np.ndarray  # [0, 180)
    valid: np.ndarray
    azimuth_defined: np.ndarray
    retardance_clamp_count: int = 0
    depolarization_clamp_count: int = 0


def _decompose_degenerate(m_px: np.ndarray):
    """LAPACK-backed factorisation for near-singular remainders.

    Operates on an (N, 4, 4) pixel batch in float64; shared by both
    backends so degenerate pixels agree bit-for-bit across them.
    """
    m = m_px.astype(np.float64, copy=False)
    dvec = m[:, 0, 1:].copy()
    mag = np.linalg.norm(dvec, axis=1)
    over = mag >= _D_MAX
    dvec[over] *= (_D_MAX / mag[over])[:, None]
    mag2 = np.minimum(mag, _D_MAX) ** 2

    a = np.sqrt(1.0 - mag2)
    safe = np.where(mag2 > 0, mag2, 1.0)
    proj = np.where(
        (mag2 > 0)[:, None, None],
        dvec[:, :, None] * dvec[:, None, :] / safe[:, None, None],
        0.0,
    )
    md = np.zeros_like(m)
    md[:, 0, 0] = 1.0
    md[:, 0, 1:] = dvec
    md[:, 1:, 0] = dvec
    md[:, 1:, 1:] = a[:, None, None] * np.eye(3) + (1.0 - a)[:, None, None] * proj

    m_prime = m @ np.linalg.inv(md)
    small = m_prime[:, 1:, 1:]
    gram = small @ np.transpose(small, (0, 2, 1))
    w, v = np.linalg.eigh(gram)
    w = np.clip(w, 0.0, None)
    sqrt_gram = (v * np.sqrt(w)[:, None, :]) @ np.transpose(v, (0, 2, 1))
    sign = np.where(np.linalg.det(small) < 0.0, -1.0, 1.0)
    small_delta = sign[:, None, None] * sqrt_gram
    small_r = np.linalg.pinv(small_delta) @ small

    m_delta = np.zeros_like(m)
    m_delta[:, 0, 0] = 1.0
    m_delta[:, 1:, 0] = m_prime[:, 1:, 0]
    m_delta[:, 1:, 1:] = small_delta
    m_r = np.zeros_like(m)
    m_r[:, 0, 0] = 1.0
    m_r[:, 1:, 1:] = small_r
    return md, m_r, m_delta, sign.astype(np.int8)


def lu_chipman(mueller: MuellerField, threads: int | None = None) -> DecomposedField:
    """Factor a normalized Mueller field into its three optical components."""
    values = mueller.values
    h, w = values.shape[:2]
    valid_in = np.ascontiguousarray(mueller.valid, dtype=np.uint8)

    if backend.use_compiled():
        from . import _kernels

        values_c = np.ascontiguousarray(values)
        md = np.empty_like(values_c)
        mr = np.empty_like(values_c)
        mdelta = np.empty_like(values_c)
        sign = np.empty((h, w), dtype=np.int8)
        degen = np.empty((h, w), dtype=np.uint8)
        dclamp = np.empty((h, w), dtype=np.uint8)
        _kernels.decompose_lu_chipman(
            values_c, valid_in, md, mr, mdelta, sign, degen, dclamp,
            backend.resolve_threads(threads),
        )
        degenerate = degen.astype(bool)
        d_clamped = dclamp.astype(bool)
    else:
        md, mr, mdelta, sign, degenerate, d_clamped = _kernels_np.decompose_lu_chipman(
            values, mueller.valid
        )

    if degenerate.any():
        rows, cols = np.nonzero(degenerate)
        sel_md, sel_mr, sel_mdelta, sel_sign = _decompose_degenerate(
            values[rows, cols].reshape(-1, 4, 4)
        )
        dtype = values.dtype
        md[rows, cols] = sel_md.astype(dtype)
        mr[rows, cols] = sel_mr.astype(dtype)
        mdelta[rows, cols] = sel_mdelta.astype(dtype)
        sign[rows, cols] = sel_sign

    return DecomposedField(
        diattenuator=md,
        retarder=mr,
        depolariser=mdelta,
        valid=mueller.valid & ~degenerate,
        degenerate=degenerate,
        sign_flags=sign,
        diatt_clamped=d_clamped,
    )


def diattenuation_map(dec: DecomposedField) -> np.ndarray:
    """Total diattenuation from the first row of the diattenuator."""
    row = dec.diattenuator[..., 0, 1:]
    return np.sqrt(np.einsum("...k,...k->...", row, row))


def depolarization_map(dec: DecomposedField, count_clamps: bool = False):
    """One minus the mean absolute action of the depolarising block."""
    block_trace = (
        dec.depolariser[..., 1, 1] + dec.depolariser[..., 2, 2] + dec.depolariser[..., 3, 3]
    )
    raw = 1.0 - np.abs(block_trace) / 3.0
    out = np.clip(raw, 0.0, 1.0)
    if count_clamps:
        return out, int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    return out


def retardance_map(dec: DecomposedField, count_clamps: bool = False):
    """Scalar retardance in degrees; arccos argument clamped into [-1, 1]."""
    mr = dec.retarder
    trace_term = mr[..., 1, 1] + mr[..., 2, 2]
    skew_term = mr[..., 2, 1] - mr[..., 1, 2]
    arg = np.sqrt(trace_term**2 + skew_term**2) - 1.0
    clipped = np.clip(arg, -1.0, 1.0)
    out = np.degrees(np.arccos(clipped))
    if count_clamps:
        return out, int(np.count_nonzero(arg != clipped))
    return out


def azimuth_map(dec: DecomposedField, with_defined: bool = False):
    """Optical-axis azimuth in [0, 180) degrees; axial (period 180)."""
    y = dec.retarder[..., 1, 3]
    x = dec.retarder[..., 3, 2]
    phi = np.degrees(0.5 * np.arctan2(y, x)) % 180.0
    defined = (np.abs(y) >= _AZIMUTH_EPS) | (np.abs(x) >= _AZIMUTH_EPS)
    if with_defined:
        return phi, defined
    return phi


def param_maps_from_decomposition(dec: DecomposedField) -> PolarParamMaps:
    depol, depol_clamps = depolarization_map(dec, count_clamps=True)
    ret, ret_clamps = retardance_map(dec, count_clamps=True)
    phi, defined = azimuth_map(dec, with_defined=True)
    return PolarParamMaps(
        diattenuation=diattenuation_map(dec),
        depolarization=depol,
        retardance_deg=ret,
        azimuth_deg=phi,
        valid=dec.valid.copy(),
        azimuth_defined=defined,
        retardance_clamp_count=ret_clamps,
        depolarization_clamp_count=depol_clamps,
    )


def derive_all(
    intensities: IntensityTensor,
    cal: CalibrationField,
    tile: int = 128,
    threads: int | None = None,
) -> PolarParamMaps:
    """Full derivation chain: solve, normalize, factor, extract maps.

    Composes the stage functions directly, so the output is identical to
    running them one by one.
    """
    m = compute_mueller(intensities, cal, tile=tile, threads=threads)
    m = normalize_mueller(m)
    dec = lu_chipman(m, threads=threads)
    return param_maps_from_decomposition(dec)


_MAP_LABELS = {
    "D": "diattenuation",
    "Delta": "depolarization",
    "R_deg": "retardance_deg",
    "phi_deg": "azimuth_deg",
}


def save_param_maps(maps: PolarParamMaps, out_dir, stem: str = "") -> dict:
    """Write the four scalar maps plus the mask as MPAC containers."""
    import os

    prefix = f"{stem}_" if stem else ""
    paths = {}
    for label, attr in _MAP_LABELS.items():
        path = os.path.join(out_dir, f"{prefix}{label}.mpac")
        save_array(ArrayField(getattr(maps, attr), (label,)), path)
        paths[label] = path
    mask_path = os.path.join(out_dir, f"{prefix}mask.mpac")
    save_array(ArrayField(maps.valid.astype(np.float32), ("mask",)), mask_path)
    paths["mask"] = mask_path
    return paths


def load_param_maps(paths: dict) -> PolarParamMaps:
    arrays = {}
    for label in _MAP_LABELS:
        if label not in paths:
            raise FormatError(f"missing parameter map {label!r}")
        arrays[label] = load_array(paths[label]).data
    valid = load_array(paths["mask"]).data > 0.5
    return PolarParamMaps(
        diattenuation=arrays["D"],
        depolarization=arrays["Delta"],
        retardance_deg=arrays["R_deg"],
        azimuth_deg=arrays["phi_deg"],
        valid=valid,
        azimuth_defined=np.ones_like(valid),
    )
