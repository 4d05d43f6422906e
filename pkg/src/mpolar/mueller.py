"""Calibration handling and the per-pixel Mueller coefficient solve.

The camera measures 16 intensities per pixel; stacking them as a 4x4 matrix
(row = analyser state, column = generator state) the coefficients follow
from two matrix products with the precomputed calibration inverses.  The
same kernels run the forward model used by the phantom and the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend, _kernels_np
from .containers import ArrayField, IntensityTensor, load_array
from .errors import CalibrationError, FormatError

DEFAULT_COND_CAP = 1e6


@dataclass(frozen=True)
class CalibrationField:
    """Analyser/generator matrices with precomputed inverses.

    Arrays are float64 and either (4, 4) (global) or (H, W, 4, 4).
    ``valid`` is None for global calibration, else an (H, W) bool plane.
    """

    analyser: np.ndarray
    generator: np.ndarray
    analyser_inv: np.ndarray
    generator_inv: np.ndarray
    cond_analyser: np.ndarray
    cond_generator: np.ndarray
    valid: np.ndarray | None = None

    @property
    def per_pixel(self) -> bool:
        return self.analyser.ndim == 4

    def valid_for(self, shape2d) -> np.ndarray:
        if self.valid is not None:
            return self.valid
        return np.ones(shape2d, dtype=bool)


@dataclass
class MuellerField:
    """H x W x 4 x 4 Mueller coefficients plus validity plane."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _cond_and_inv(mats: np.ndarray, cond_cap: float):
    """Inverses and 2-norm condition numbers for a (..., 4, 4) stack."""
    svals = np.linalg.svd(mats, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = svals[..., 0] / svals[..., -1]
    cond = np.where(np.isfinite(cond), cond, np.inf)
    ok = cond <= cond_cap
    inv = np.zeros_like(mats)
    if mats.ndim == 2:
        if ok:
            inv = np.linalg.inv(mats)
    else:
        flat = mats.reshape(-1, 4, 4)
        okf = ok.reshape(-1)
        if okf.any():
            inv.reshape(-1, 4, 4)[okf] = np.linalg.inv(flat[okf])
    return inv, cond, ok


def make_calibration(
    analyser: np.ndarray, generator: np.ndarray, cond_cap: float = DEFAULT_COND_CAP
) -> CalibrationField:
    """Build a calibration field from raw matrices, flagging bad pixels."""
    a = np.ascontiguousarray(analyser, dtype=np.float64)
    g = np.ascontiguousarray(generator, dtype=np.float64)
    for name, arr in (("analyser", a), ("generator", g)):
        if arr.shape[-2:] != (4, 4) or arr.ndim not in (2, 4):
            raise FormatError(f"{name} calibration must be (4,4) or (H,W,4,4), got {arr.shape}")
    if a.ndim != g.ndim or (a.ndim == 4 and a.shape[:2] != g.shape[:2]):
        raise FormatError("analyser and generator calibrations must share their layout")

    ainv, cond_a, ok_a = _cond_and_inv(a, cond_cap)
    ginv, cond_g, ok_g = _cond_and_inv(g, cond_cap)
    if a.ndim == 2:
        if not (ok_a and ok_g):
            raise CalibrationError(
                f"global calibration ill-conditioned (cond_A={cond_a:.3g}, cond_G={cond_g:.3g},"
                f" cap={cond_cap:.3g})"
            )
        valid = None
    else:
        valid = np.asarray(ok_a & ok_g)
    return CalibrationField(a, g, ainv, ginv, np.asarray(cond_a), np.asarray(cond_g), valid)


def load_calibration(path_analyser, path_generator, cond_cap: float = DEFAULT_COND_CAP):
    """Load the two MPAC calibration containers and precompute inverses."""
    try:
        field_a = load_array(path_analyser)
        field_g = load_array(path_generator)
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration: {exc}") from exc
    return make_calibration(field_a.data, field_g.data, cond_cap)


def save_calibration(cal: CalibrationField, path_analyser, path_generator) -> None:
    from .containers import save_array

    save_array(ArrayField(cal.analyser, ("analyser",)), path_analyser)
    save_array(ArrayField(cal.generator, ("generator",)), path_generator)


def _run_pair_kernel(kind: str, image: np.ndarray, left: np.ndarray, right: np.ndarray,
                     tile: int, threads: int | None) -> np.ndarray:
    h, w = image.shape[:2]
    nthreads = backend.resolve_threads(threads)
    if backend.use_compiled():
        from . import _kernels

        per_pixel = 1 if left.ndim == 4 else 0
        left3 = np.ascontiguousarray(left.reshape(-1, 4, 4))
        right3 = np.ascontiguousarray(right.reshape(-1, 4, 4))
        image = np.ascontiguousarray(image)
        if kind == "solve":
            out = np.empty((h, w, 4, 4), dtype=image.dtype)
            _kernels.solve_mueller(image, left3, right3, out, per_pixel, tile, nthreads)
        else:
            out = np.empty((h, w, 16), dtype=image.dtype)
            _kernels.forward_mueller(image, left3, right3, out, per_pixel, tile, nthreads)
        return out
    if kind == "solve":
        return _kernels_np.solve_mueller(image, left, right)
    return _kernels_np.forward_mueller(image, left, right)


def compute_mueller(
    intensities: IntensityTensor,
    cal: CalibrationField,
    tile: int = 128,
    threads: int | None = None,
) -> MuellerField:
    """Invert the acquisition: per pixel Ainv @ I @ Ginv.

    Pixels with unusable calibration come back flagged invalid; their
    coefficients are still written (branch-free kernels).
    """
    _check_compatible(intensities.values.shape[:2], cal)
    values = _run_pair_kernel(
        "solve", intensities.values, cal.analyser_inv, cal.generator_inv, tile, threads
    )
    return MuellerField(values, cal.valid_for(intensities.values.shape[:2]).copy())


def forward_intensities(
    mueller: MuellerField,
    cal: CalibrationField,
    tile: int = 128,
    threads: int | None = None,
) -> IntensityTensor:
    """Forward model A @ M @ G, flattened to the 16-channel layout."""
    _check_compatible(mueller.values.shape[:2], cal)
    values = _run_pair_kernel(
        "forward", mueller.values, cal.analyser, cal.generator, tile, threads
    )
    return IntensityTensor(values)


def _check_compatible(shape2d, cal: CalibrationField) -> None:
    if cal.per_pixel and tuple(cal.analyser.shape[:2]) != tuple(shape2d):
        raise CalibrationError(
            f"calibration covers {cal.analyser.shape[:2]}, image is {tuple(shape2d)}"
        )


def normalize_mueller(field: MuellerField) -> MuellerField:
    """Divide every coefficient by the pixel's M11; requires M11 > 0.

    Pixels with M11 <= 0 are flagged invalid and left untouched.
    """
    m11 = field.values[..., 0, 0]
    ok = m11 > 0
    safe = np.where(ok, m11, 1.0)
    out = field.values / safe[..., None, None].astype(field.values.dtype)
    out = np.where(ok[..., None, None], out, field.values)
    return MuellerField(out.astype(field.values.dtype, copy=False), field.valid & ok)
