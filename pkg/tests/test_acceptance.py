"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run pytest with -s to see them inline).

Accuracy criteria run on the float64 reference path; the performance
criteria run the float32 pipeline on the default (compiled when built)
backend.
"""

import os
import time

import numpy as np
import pytest

import mpolar
from mpolar import optics
from mpolar.bench import time_stage
from mpolar.containers import IntensityTensor, compute_roi, rescale_to_signed_unit
from mpolar.decompose import derive_all, lu_chipman, param_maps_from_decomposition
from mpolar.diffusion import (
    build_schedule,
    denoise_single_pass,
    forward_sample,
    forward_step,
    reverse_step,
)
from mpolar.filters import gaussian_blur, median_filter
from mpolar.metrics import (
    circ_std_map,
    ssim,
    wilcoxon_rank_sum,
    wrap_axial_difference,
)
from mpolar.mueller import (
    MuellerField,
    compute_mueller,
    forward_intensities,
    make_calibration,
    normalize_mueller,
)
from mpolar.phantom import (
    add_acquisition_noise,
    default_calibration,
    default_phantom_spec,
    generate_phantom,
)

from test_filters import mirror_index
from test_metrics import ssim_brute_force


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def _well_conditioned(rng, max_cond=10.0):
    while True:
        m = np.eye(4) + 0.4 * rng.standard_normal((4, 4))
        if np.linalg.cond(m) < max_cond:
            return m


def test_eq1_round_trip():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        cal = make_calibration(_well_conditioned(rng), _well_conditioned(rng))
        m = MuellerField(rng.uniform(-1, 1, (16, 16, 4, 4)), np.ones((16, 16), bool))
        back = compute_mueller(forward_intensities(m, cal), cal)
        worst = max(worst, float(np.abs(back.values - m.values).max()))
    elapsed = time.perf_counter() - start
    _report(
        "eq1-round-trip",
        worst < 1e-10 and elapsed < 10.0,
        f"max abs err {worst:.3e} (tol 1e-10), runtime {elapsed:.2f}s (limit 10s)",
    )


def test_lu_chipman_recovery():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    h, w = 25, 40  # 1000 pixels

    direction = rng.standard_normal((h, w, 3))
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    dvec = direction * rng.uniform(0.0, 0.9, (h, w))[..., None]
    delta = rng.uniform(0.0, 180.0, (h, w))
    axis = rng.uniform(0.0, 180.0, (h, w))
    diag = rng.uniform(0.2, 1.0, (h, w, 3))

    md = optics.diattenuator_from_vector(dvec)
    mr = optics.linear_retarder(delta, axis)
    mdel = optics.diagonal_depolarizer(diag)
    m = np.einsum("hwij,hwjk,hwkl->hwil", mdel, mr, md)

    dec = lu_chipman(MuellerField(m, np.ones((h, w), bool)))
    recon = np.einsum(
        "hwij,hwjk,hwkl->hwil", dec.depolariser, dec.retarder, dec.diattenuator
    )
    factor_err = max(
        float(np.abs(dec.diattenuator - md).max()),
        float(np.abs(dec.retarder - mr).max()),
        float(np.abs(dec.depolariser - mdel).max()),
    )
    recon_err = float(np.abs(recon - m).max())

    maps = param_maps_from_decomposition(dec)
    d_err = float(np.abs(maps.diattenuation - np.linalg.norm(dvec, axis=2)).max())
    delta_err = float(np.abs(maps.depolarization - (1.0 - diag.mean(axis=2))).max())
    r_err = float(np.abs(maps.retardance_deg - delta).max())
    defined = maps.azimuth_defined
    phi_err = float(np.abs(wrap_axial_difference(maps.azimuth_deg, axis))[defined].max())
    elapsed = time.perf_counter() - start

    ok = (
        factor_err < 1e-8
        and recon_err < 1e-8
        and d_err < 1e-6
        and delta_err < 1e-6
        and r_err < 1e-4
        and phi_err < 1e-4
        and elapsed < 30.0
    )
    _report(
        "lu-chipman-recovery",
        ok,
        f"factors {factor_err:.2e}, recon {recon_err:.2e} (tol 1e-8); "
        f"D {d_err:.2e}, Delta {delta_err:.2e} (tol 1e-6); "
        f"R {r_err:.2e}, phi {phi_err:.2e} deg (tol 1e-4); {elapsed:.2f}s (limit 30s)",
    )


def test_azimuth_sweep():
    angles = np.arange(0.0, 180.0, 5.0)
    worst = 0.0
    for theta in angles:
        dec = lu_chipman(
            MuellerField(
                optics.linear_retarder(90.0, theta)[None, None], np.ones((1, 1), bool)
            )
        )
        maps = param_maps_from_decomposition(dec)
        err = abs(float(wrap_axial_difference(maps.azimuth_deg[0, 0], theta)))
        worst = max(worst, err)
    _report(
        "azimuth-sweep",
        worst < 1e-6,
        f"36 axes incl. 90 deg quadrant, max |phi - theta| {worst:.2e} deg (tol 1e-6)",
    )


def test_diffusion_identities():
    sched = build_schedule()
    rng = np.random.default_rng(303)

    # exact inversion of the terminal step with the oracle noise
    x0 = rng.uniform(-1, 1, (64, 64, 16)).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x1 = forward_sample(x0, 1, eps, sched)
    inv_err = float(np.abs(reverse_step(x1, 1, lambda x, t: eps, sched) - x0).max())

    # sequential chain vs closed-form marginal moments at t = 50
    n = 100_000
    t_check = 50
    x = np.full(n, 0.7)
    for step in range(1, t_check + 1):
        x = forward_step(x, step, rng.standard_normal(n), sched)
    abar = sched.alpha_bar[t_check]
    mean_gap = abs(x.mean() - np.sqrt(abar) * 0.7)
    var_gap = abs(x.var() - (1 - abar))
    mean_limit = 3 * np.sqrt((1 - abar) / n)
    var_limit = 3 * (1 - abar) * np.sqrt(2.0 / (n - 1))

    recurrence_exact = np.array_equal(
        sched.alpha_bar[:-1] * sched.alpha, sched.alpha_bar[1:]
    )

    ok = (
        inv_err < 1e-6
        and mean_gap < mean_limit
        and var_gap < var_limit
        and recurrence_exact
    )
    _report(
        "diffusion-identities",
        ok,
        f"t=1 inversion {inv_err:.2e} (tol 1e-6); chain moments at t=50: "
        f"mean gap {mean_gap:.2e} < {mean_limit:.2e}, var gap {var_gap:.2e} < "
        f"{var_limit:.2e}; cumulative recurrence exact: {recurrence_exact}",
    )


def test_phantom_csd_phenomenology():
    spec = default_phantom_spec(96, 128, noise_sigma=0.02)
    field, _, labels = generate_phantom(spec, seed=404)
    cal = default_calibration()
    clean = forward_intensities(field, cal)
    clean = IntensityTensor(clean.values.astype(np.float32))
    noisy = add_acquisition_noise(clean, spec.noise_sigma, "gaussian", seed=405)
    denoised = gaussian_blur(noisy)

    csd_noisy = circ_std_map(derive_all(noisy, cal).azimuth_deg)
    csd_denoised = circ_std_map(derive_all(denoised, cal).azimuth_deg)

    fibre = labels == 1
    lesion = labels == 2
    med_fibre = float(np.median(csd_denoised[fibre]))
    med_lesion = float(np.median(csd_denoised[lesion]))
    med_fibre_noisy = float(np.median(csd_noisy[fibre]))
    p_value = wilcoxon_rank_sum(csd_denoised[fibre], csd_denoised[lesion])

    ok = med_fibre < med_lesion and med_fibre < med_fibre_noisy and p_value < 0.01
    _report(
        "phantom-csd-phenomenology",
        ok,
        f"median csd: fibre {med_fibre:.2f} < lesion {med_lesion:.2f} deg; "
        f"denoised fibre {med_fibre:.2f} < noisy fibre {med_fibre_noisy:.2f} deg; "
        f"rank-sum p {p_value:.2e} < 0.01",
    )


def test_metric_oracles():
    rng = np.random.default_rng(505)
    a = rng.random((32, 32))
    ref = rng.random((32, 32))
    mask = np.ones((32, 32), bool)
    ssim_gap = abs(ssim(a, ref, mask) - ssim_brute_force(a, ref, mask))

    img = rng.random((32, 32))
    filtered = median_filter(
        IntensityTensor(np.repeat(img[:, :, None], 16, axis=2)), k=3
    ).values[:, :, 0]
    expected = np.empty_like(img)
    for r in range(32):
        for c in range(32):
            window = sorted(
                img[mirror_index(r + dr, 32), mirror_index(c + dc, 32)]
                for dr in (-1, 0, 1)
                for dc in (-1, 0, 1)
            )
            expected[r, c] = window[4]
    median_gap = float(np.abs(filtered - expected).max())

    p_exact = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])

    ok = ssim_gap < 1e-10 and median_gap < 1e-10 and abs(p_exact - 0.1) < 1e-12
    _report(
        "metric-oracles",
        ok,
        f"ssim vs brute force {ssim_gap:.2e}, median vs brute force {median_gap:.2e} "
        f"(tol 1e-10); exact rank-sum p {p_exact} (expected 0.1)",
    )


def test_performance_budget():
    cores = os.cpu_count() or 1
    cal = default_calibration()
    rng = np.random.default_rng(606)

    patch = IntensityTensor((0.2 + 0.6 * rng.random((128, 128, 16))).astype(np.float32))
    frame = IntensityTensor((0.2 + 0.6 * rng.random((512, 384, 16))).astype(np.float32))

    res_patch = time_stage(
        "derivation",
        lambda: derive_all(patch, cal, threads=cores),
        (128, 128, 16),
        repeats=20,
        warmups=3,
    )
    gate_threads = min(4, cores)
    res_gate = time_stage(
        "derivation",
        lambda: derive_all(patch, cal, threads=gate_threads),
        (128, 128, 16),
        repeats=20,
        warmups=3,
    )
    res_frame = time_stage(
        "derivation",
        lambda: derive_all(frame, cal, threads=cores),
        (512, 384, 16),
        repeats=10,
        warmups=2,
    )

    hard_ok = res_gate.mean_ms <= 100.0 and res_frame.mean_ms <= 500.0
    soft_detail = f"patch {res_patch.mean_ms:.1f} ms on {cores} cores (soft target 40 ms"
    if cores >= 8:
        hard_ok = hard_ok and res_patch.mean_ms <= 40.0
        soft_detail += ", enforced)"
    else:
        soft_detail += f", informative below 8 cores)"

    # full frame is ~12x the patch pixel count; allow 3x scheduling slack
    ratio = res_frame.mean_ms / res_patch.mean_ms
    scaling_ok = 12.0 / 3.0 <= ratio <= 12.0 * 3.0
    _report(
        "performance-budget",
        hard_ok and scaling_ok,
        f"{soft_detail}; gate {res_gate.mean_ms:.1f} ms on {gate_threads} threads "
        f"(limit 100 ms); full frame {res_frame.mean_ms:.1f} ms (limit 500 ms); "
        f"frame/patch ratio {ratio:.1f} (must be within 3x of 12)",
    )


def test_determinism_tiles_and_threads():
    cores = os.cpu_count() or 1
    cal = default_calibration()
    rng = np.random.default_rng(707)
    tensor = IntensityTensor((0.2 + 0.6 * rng.random((96, 112, 16))).astype(np.float32))

    reference = derive_all(tensor, cal, tile=8, threads=1)
    identical = True
    for tile in (8, 32, 128):
        for threads in (1, 2, cores):
            out = derive_all(tensor, cal, tile=tile, threads=threads)
            for attr in ("diattenuation", "depolarization", "retardance_deg",
                         "azimuth_deg"):
                if not np.array_equal(getattr(out, attr), getattr(reference, attr)):
                    identical = False

    sched = build_schedule()
    signed = rescale_to_signed_unit(tensor, 0.0, 1.0)
    den_ref = denoise_single_pass(signed, lambda x, t: 0.1 * x, sched, seed=1)
    den_again = denoise_single_pass(signed, lambda x, t: 0.1 * x, sched, seed=1)
    identical = identical and np.array_equal(den_ref.values, den_again.values)

    _report(
        "determinism",
        identical,
        f"derive bit-identical over tiles (8,32,128) x threads (1,2,{cores}); "
        "single-pass denoise bit-identical across runs",
    )


def test_oracle_denoising_improves_azimuth_ssim():
    """Single-pass denoising at the terminal step with the oracle noise
    predictor must beat the raw noisy instance on azimuth similarity
    (runs without any trained weights)."""
    sched = build_schedule()
    # patch-sized frame: the tiler hands the oracle the whole image unpadded
    spec = default_phantom_spec(128, 128, noise_sigma=0.005)
    field, truth, labels = generate_phantom(spec, seed=808)
    cal = default_calibration()
    clean = forward_intensities(field, cal)
    clean = IntensityTensor(clean.values.astype(np.float32))

    noisy = add_acquisition_noise(clean, spec.noise_sigma, "gaussian", seed=809)
    signed = rescale_to_signed_unit(noisy, 0.0, 1.0)
    signed_clean = rescale_to_signed_unit(clean, 0.0, 1.0).values

    def oracle(x, t):
        return (x - np.sqrt(sched.alpha_bar[t]) * signed_clean) / np.sqrt(
            1.0 - sched.alpha_bar[t]
        )

    denoised = denoise_single_pass(signed, oracle, sched, t_infer=1)

    maps_noisy = derive_all(noisy, cal)
    maps_denoised = derive_all(denoised, cal)
    roi = compute_roi(clean, 0.05)
    mask = roi & maps_noisy.valid & maps_denoised.valid

    ssim_noisy = ssim(maps_noisy.azimuth_deg, truth.azimuth_deg, mask)
    ssim_denoised = ssim(maps_denoised.azimuth_deg, truth.azimuth_deg, mask)
    _report(
        "terminal-step-denoising-ordering",
        ssim_denoised > ssim_noisy,
        f"azimuth SSIM vs truth: denoised {100 * ssim_denoised:.1f}% > "
        f"noisy {100 * ssim_noisy:.1f}%",
    )
