"""Markov-chain noise model: schedule tables, forward corruption, reverse
sampling and the single-pass denoiser for intensity tensors.

Time-points are 1-based (t in 1..T); index 0 of the cumulative table is the
clean state.  The reverse variance is the posterior one, which vanishes at
t = 1 and makes the terminal denoising step deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .containers import IntensityTensor, rescale_from_signed_unit
from .errors import ParameterError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance tables; beta[t-1] is the step-t variance, alpha_bar[t] the
    cumulative signal fraction with alpha_bar[0] = 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    def check_t(self, t: int, lowest: int = 1) -> int:
        t = int(t)
        if not lowest <= t <= self.num_steps:
            raise ParameterError(f"time-point {t} outside [{lowest}, {self.num_steps}]")
        return t


def build_schedule(
    num_steps: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Linear beta ramp plus the derived alpha / cumulative / posterior tables."""
    if num_steps < 1:
        raise ParameterError(f"need at least one time-point, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    prev = alpha_bar[:-1]
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar[1:]) * beta
    return DiffusionSchedule(beta, alpha, alpha_bar, posterior_var)


def noise_like(shape, seed: int | np.random.SeedSequence, dtype=np.float32) -> np.ndarray:
    """Reproducible i.i.d. standard-normal tensor."""
    gen = np.random.Generator(np.random.PCG64(seed))
    return gen.standard_normal(shape).astype(dtype, copy=False)


def tile_seed(seed: int, tile_index: int, step: int = 0) -> np.random.SeedSequence:
    """Per-tile (and per-step) noise stream, independent of scheduling order."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(tile_index, step))


def forward_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Closed-form jump to state t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = sched.check_t(t, lowest=0)
    abar = sched.alpha_bar[t]
    x0 = np.asarray(x0)
    out = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps)
    return out.astype(x0.dtype, copy=False)


def forward_step(x_prev, t: int, eps, sched: DiffusionSchedule):
    """Single chain step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    t = sched.check_t(t)
    beta = sched.beta[t - 1]
    x_prev = np.asarray(x_prev)
    out = np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * np.asarray(eps)
    return out.astype(x_prev.dtype, copy=False)


def reverse_step(x_t, t: int, model: Callable, sched: DiffusionSchedule, eps=None):
    """One learned denoising step.

    The predicted noise sets the posterior mean; the added noise term uses
    the posterior variance, which is zero at t = 1 (deterministic step).
    """
    t = sched.check_t(t)
    x_t = np.asarray(x_t)
    predicted = np.asarray(model(x_t, t))
    if predicted.shape != x_t.shape:
        raise ParameterError(
            f"noise predictor returned shape {predicted.shape}, expected {x_t.shape}"
        )
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t]
    mean = (x_t - (beta / np.sqrt(1.0 - abar)) * predicted) / np.sqrt(alpha)
    var = sched.posterior_var[t - 1]
    if var > 0.0:
        if eps is None:
            raise ParameterError(f"reverse step at t={t} needs a noise sample (variance > 0)")
        mean = mean + np.sqrt(var) * np.asarray(eps)
    return mean.astype(x_t.dtype, copy=False)


def pick_time_point(sched: DiffusionSchedule, background_var: float) -> int:
    """Smallest-mismatch time-point for a measured background noise variance."""
    if background_var < 0:
        raise ParameterError("variance must be non-negative")
    mismatch = np.abs((1.0 - sched.alpha_bar[1:]) - background_var)
    return int(np.argmin(mismatch)) + 1


def patchwise_apply(
    values: np.ndarray,
    op: Callable[[np.ndarray, int], np.ndarray],
    patch: int = 128,
    overlap: int = 16,
) -> np.ndarray:
    """Tile a frame, run ``op(tile, tile_index)`` per tile, blend overlaps.

    Tiles are laid out on a stride of patch - overlap with mirror padding at
    the far edges; ramped weights are renormalized so they sum to one
    everywhere.  Accumulation order is fixed (raster tile order), so output
    does not depend on how tiles are scheduled.
    """
    if overlap < 0 or overlap >= patch:
        raise ParameterError(f"overlap must be in [0, patch), got {overlap} vs {patch}")
    h, w = values.shape[:2]
    if h <= patch and w <= patch:
        out = op(_pad_to(values, patch), 0)[:h, :w]
        return np.ascontiguousarray(out)

    stride = patch - overlap
    ramp = _ramp_profile(patch, overlap)
    weight2d = np.minimum.outer(ramp, ramp)

    origins = [
        (r, c)
        for r in _origins(h, patch, stride)
        for c in _origins(w, patch, stride)
    ]
    acc = np.zeros(values.shape, dtype=np.float64)
    wacc = np.zeros((h, w), dtype=np.float64)
    for index, (r0, c0) in enumerate(origins):
        tile = _extract(values, r0, c0, patch)
        result = np.asarray(op(tile, index), dtype=np.float64)
        rows = min(patch, h - r0)
        cols = min(patch, w - c0)
        wblock = weight2d[:rows, :cols]
        acc[r0 : r0 + rows, c0 : c0 + cols] += result[:rows, :cols] * wblock[..., None]
        wacc[r0 : r0 + rows, c0 : c0 + cols] += wblock
    out = acc / wacc[..., None]
    return out.astype(values.dtype, copy=False)


def _origins(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, max(extent - patch, 0) + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch if extent >= patch else 0)
    return starts


def _ramp_profile(patch: int, overlap: int) -> np.ndarray:
    ramp = np.ones(patch)
    if overlap > 0:
        up = (np.arange(overlap) + 1.0) / (overlap + 1.0)
        ramp[:overlap] = up
        ramp[-overlap:] = up[::-1]
    return ramp


def _pad_to(values: np.ndarray, patch: int) -> np.ndarray:
    h, w = values.shape[:2]
    if h >= patch and w >= patch:
        return values
    pad = [(0, max(patch - h, 0)), (0, max(patch - w, 0))] + [(0, 0)] * (values.ndim - 2)
    return np.pad(values, pad, mode="symmetric")


def _extract(values: np.ndarray, r0: int, c0: int, patch: int) -> np.ndarray:
    tile = values[r0 : r0 + patch, c0 : c0 + patch]
    if tile.shape[0] == patch and tile.shape[1] == patch:
        return tile
    pad = [(0, patch - tile.shape[0]), (0, patch - tile.shape[1])]
    pad += [(0, 0)] * (values.ndim - 2)
    return np.pad(tile, pad, mode="symmetric")


def denoise_single_pass(
    tensor: IntensityTensor,
    model: Callable,
    sched: DiffusionSchedule,
    t_infer: int = 1,
    mask: np.ndarray | None = None,
    lo: float = 0.0,
    hi: float = 1.0,
    patch: int = 128,
    overlap: int = 16,
    seed: int = 0,
    clamp_counter: list | None = None,
) -> IntensityTensor:
    """Treat the rescaled input as state t_infer and walk the chain to zero.

    Masked-out pixels (reflections) bypass the model but share the
    unrescaling path, so they come back bit-identical to the plainly
    unrescaled input.  Output is clamped into [lo, hi]; clamp events are
    appended to ``clamp_counter`` when given.
    """
    if not tensor.signed:
        raise ParameterError("denoise_single_pass expects the [-1, 1] range state")
    sched.check_t(t_infer)
    values = tensor.values

    def run_chain(tile: np.ndarray, tile_index: int) -> np.ndarray:
        x = tile
        for t in range(t_infer, 0, -1):
            eps = None
            if sched.posterior_var[t - 1] > 0.0:
                eps = noise_like(x.shape, tile_seed(seed, tile_index, t), dtype=x.dtype)
            x = reverse_step(x, t, model, sched, eps=eps)
        return x

    denoised = patchwise_apply(values, run_chain, patch=patch, overlap=overlap)
    out = rescale_from_signed_unit(IntensityTensor(denoised, signed=True), lo, hi)
    overflow = (out.values < lo) | (out.values > hi)
    clipped = np.clip(out.values, lo, hi)
    if mask is not None:
        passthrough = rescale_from_signed_unit(tensor, lo, hi).values
        clipped = np.where(mask[..., None], clipped, passthrough)
        overflow &= mask[..., None]
    if clamp_counter is not None:
        clamp_counter.append(int(np.count_nonzero(overflow)))
    return IntensityTensor(clipped.astype(values.dtype, copy=False))
