"""Held-out evaluation: single-pass denoising vs the Gaussian-blur baseline.

All processing (denoising, map derivation) runs through the toolkit's
command-line interface; this package only reads the resulting containers
and scores the azimuth maps against the phantom ground truth.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

import numpy as np
from scipy import ndimage

from . import mpac
from .data import load_manifest

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def toolkit_command() -> list[str]:
    exe = shutil.which("mpolar")
    if exe:
        return [exe]
    return [sys.executable, "-m", "mpolar.cli"]


def run_toolkit(*args: str) -> None:
    result = subprocess.run(
        [*toolkit_command(), *map(str, args)], capture_output=True, text=True
    )
    if result.returncode != 0:
        raise RuntimeError(
            f"toolkit call failed ({result.returncode}): {' '.join(map(str, args))}\n"
            f"{result.stderr}"
        )


def ssim_axial_map(candidate: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Structural similarity of two maps over a mask (gaussian window)."""
    offs = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    taps = np.exp(-0.5 * (offs / SSIM_SIGMA) ** 2)
    window = np.outer(taps, taps)
    window /= window.sum()

    def smooth(img):
        return ndimage.correlate(img.astype(np.float64), window, mode="reflect")

    ref_vals = reference[mask]
    drange = float(ref_vals.max() - ref_vals.min())
    c1 = (SSIM_K1 * drange) ** 2
    c2 = (SSIM_K2 * drange) ** 2
    mu_x = smooth(candidate)
    mu_y = smooth(reference)
    var_x = smooth(candidate * candidate) - mu_x**2
    var_y = smooth(reference * reference) - mu_y**2
    cov = smooth(candidate * reference) - mu_x * mu_y
    local = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(local[mask].mean())


def rmse_axial(candidate: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    diff = (candidate - reference + 90.0) % 180.0 - 90.0
    return float(np.sqrt(np.mean(diff[mask] ** 2)))


def _derive_phi(intensity_path, cal_a, cal_g, out_dir):
    run_toolkit(
        "derive", "--in", intensity_path, "--cal-a", cal_a, "--cal-g", cal_g,
        "--out-dir", out_dir, "--dtype", "f32",
    )
    phi = mpac.load(os.path.join(out_dir, "phi_deg.mpac"))
    valid = mpac.load(os.path.join(out_dir, "mask.mpac")) > 0.5
    return phi, valid


def evaluate(dataset_manifest, model_manifest, out_json=None, t_infer: int = 1,
             limit: int | None = None) -> dict:
    """Score model-denoised, blur-denoised and raw azimuth maps vs truth.

    The dataset directory must contain the synthetic calibration containers
    (emit the dataset with --emit-calibration).
    """
    manifest = load_manifest(dataset_manifest)
    base = manifest["_dir"]
    cal_a = os.path.join(base, "cal_a.mpac")
    cal_g = os.path.join(base, "cal_g.mpac")
    if not (os.path.exists(cal_a) and os.path.exists(cal_g)):
        raise FileNotFoundError("dataset lacks cal_a/cal_g containers")

    records = []
    pairs = manifest["pairs"][:limit] if limit else manifest["pairs"]
    with tempfile.TemporaryDirectory() as tmp:
        for entry in pairs:
            lq = os.path.join(base, entry["lq_path"])
            truth = mpac.load(os.path.join(base, entry["gt_paths"]["params"]))
            labels = mpac.load(os.path.join(base, entry["labels_path"]))
            phi_truth = truth[..., 3]
            foreground = labels > 0.5

            # windows must not straddle the background, whose azimuth is
            # noise (undefined axis) and would contaminate boundary scores
            foreground = ndimage.binary_erosion(
                foreground, structure=np.ones((3, 3), bool), iterations=SSIM_WINDOW // 2 + 1
            )

            tag = f"{entry['pair_id']:03d}"
            model_out = os.path.join(tmp, f"model_{tag}.mpac")
            blur_out = os.path.join(tmp, f"blur_{tag}.mpac")
            run_toolkit("denoise", "--in", lq, "--model", model_manifest,
                        "--t-infer", t_infer, "--out", model_out)
            run_toolkit("denoise", "--in", lq, "--filter", "gblr", "--out", blur_out)

            scores = {}
            for name, path in (("model", model_out), ("baseline", blur_out), ("lq", lq)):
                out_dir = os.path.join(tmp, f"maps_{name}_{tag}")
                phi, valid = _derive_phi(path, cal_a, cal_g, out_dir)
                mask = foreground & valid
                scores[name] = {
                    "ssim_phi": ssim_axial_map(phi, phi_truth, mask),
                    "rmse_phi_deg": rmse_axial(phi, phi_truth, mask),
                }
            records.append({"pair_id": entry["pair_id"], "scores": scores})

    def median(name, key):
        return float(np.median([r["scores"][name][key] for r in records]))

    summary = {
        name: {
            "median_ssim_phi": median(name, "ssim_phi"),
            "median_rmse_phi_deg": median(name, "rmse_phi_deg"),
        }
        for name in ("model", "baseline", "lq")
    }
    result = {"pairs": records, "summary": summary, "t_infer": t_infer,
              "model": str(model_manifest)}
    if out_json:
        with open(out_json, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=1)
    return result
