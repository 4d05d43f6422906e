"""Reference and baseline denoisers: multi-shot averaging and three
deterministic filters (median, Gaussian blur, gradient anisotropic
diffusion), all channel-independent and shape-preserving.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .containers import IntensityTensor
from .errors import FormatError, ParameterError

GRAD_DT_LIMIT = 0.25  # explicit-Euler stability bound for the 2D 4-neighbour stencil


def multishot_average(shots: list[IntensityTensor]) -> IntensityTensor:
    """Arithmetic mean over shots, accumulated in float64, shot order fixed."""
    if not shots:
        raise ParameterError("need at least one shot")
    shape = shots[0].values.shape
    for s in shots[1:]:
        if s.values.shape != shape:
            raise FormatError(f"shot shapes differ: {s.values.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for s in shots:
        acc += s.values
    acc /= len(shots)
    return IntensityTensor(acc.astype(shots[0].values.dtype), signed=shots[0].signed)


def median_filter(tensor: IntensityTensor, k: int = 3) -> IntensityTensor:
    """Channel-wise spatial median over a k x k window, mirror border."""
    if k % 2 == 0 or k < 1:
        raise ParameterError(f"median kernel width must be odd, got {k}")
    out = np.empty_like(tensor.values)
    for c in range(tensor.values.shape[2]):
        ndimage.median_filter(tensor.values[:, :, c], size=k, mode="reflect", output=out[:, :, c])
    return IntensityTensor(out, signed=tensor.signed)


def gaussian_kernel1d(k: int, sigma: float) -> np.ndarray:
    """Sampled Gaussian taps, normalized to unit sum."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(tensor: IntensityTensor, k: int = 5, sigma: float = 1.0) -> IntensityTensor:
    """Separable channel-wise Gaussian blur, mirror border."""
    if k % 2 == 0 or k < 1:
        raise ParameterError(f"blur kernel width must be odd, got {k}")
    taps = gaussian_kernel1d(k, sigma)
    vals = tensor.values.astype(np.float64, copy=False)
    out = ndimage.convolve1d(vals, taps, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, taps, axis=1, mode="reflect")
    return IntensityTensor(out.astype(tensor.values.dtype), signed=tensor.signed)


def grad_aniso_diffusion(
    tensor: IntensityTensor,
    steps: int = 5,
    conductance: float = 1.0,
    dt: float = 0.125,
) -> IntensityTensor:
    """Edge-stopping diffusion with exponential conductance, explicit Euler.

    Zero-flux (mirrored ghost cell) boundaries keep the per-channel total
    intensity conserved.
    """
    if dt > GRAD_DT_LIMIT or dt <= 0:
        raise ParameterError(f"dt must be in (0, {GRAD_DT_LIMIT}] for stability, got {dt}")
    if conductance <= 0:
        raise ParameterError(f"conductance must be positive, got {conductance}")
    x = tensor.values.astype(np.float64, copy=True)
    inv_k2 = 1.0 / (conductance * conductance)
    for _ in range(steps):
        # One-sided differences to the four neighbours; border flux is zero.
        d_n = np.zeros_like(x)
        d_s = np.zeros_like(x)
        d_w = np.zeros_like(x)
        d_e = np.zeros_like(x)
        d_n[1:, :] = x[:-1, :] - x[1:, :]
        d_s[:-1, :] = x[1:, :] - x[:-1, :]
        d_w[:, 1:] = x[:, :-1] - x[:, 1:]
        d_e[:, :-1] = x[:, 1:] - x[:, :-1]
        flux = (
            d_n * np.exp(-(d_n * d_n) * inv_k2)
            + d_s * np.exp(-(d_s * d_s) * inv_k2)
            + d_w * np.exp(-(d_w * d_w) * inv_k2)
            + d_e * np.exp(-(d_e * d_e) * inv_k2)
        )
        x += dt * flux
    return IntensityTensor(x.astype(tensor.values.dtype), signed=tensor.signed)


CLASSIC_FILTERS = {
    "medf": lambda t: median_filter(t, 3),
    "gblr": lambda t: gaussian_blur(t, 5, 1.0),
    "grad": lambda t: grad_aniso_diffusion(t, 5, 1.0, 0.125),
}
