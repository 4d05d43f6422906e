"""Image-quality scores, axial statistics and the rank-sum significance test.

Angular quantities are axial with period 180 degrees: differences wrap into
[-90, 90) and dispersion runs through angle doubling.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import MetricError, ParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

QUANTITIES = ("I", "M", "D", "Delta", "R", "phi")
ANGULAR_QUANTITIES = frozenset({"R", "phi"})


def _flat_masked(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if a.shape[:2] != mask.shape:
        raise MetricError(f"mask shape {mask.shape} does not match map {a.shape}")
    if a.ndim == 2:
        return a[mask]
    return a[mask].ravel()


def wrap_axial_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Signed axial difference in degrees, wrapped into [-90, 90)."""
    return (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64) + 90.0) % 180.0 - 90.0


def rmse(a: np.ndarray, ref: np.ndarray, mask: np.ndarray, angular: bool = False) -> float:
    """Root-mean-squared error over the mask; axial wrap when angular."""
    if a.shape != ref.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {ref.shape}")
    if not mask.any():
        raise MetricError("empty evaluation mask")
    if angular:
        diff = _flat_masked(wrap_axial_difference(a, ref), mask)
    else:
        diff = _flat_masked(np.asarray(a, np.float64) - np.asarray(ref, np.float64), mask)
    return float(np.sqrt(np.mean(diff**2)))


def npsnr(a: np.ndarray, ref: np.ndarray, mask: np.ndarray, angular: bool = False) -> float:
    """Peak signal-to-noise ratio normalised by the reference dynamic range.

    Returns +inf when the error vanishes; negative values mean the error
    exceeds the reference range.
    """
    ref_vals = _flat_masked(np.asarray(ref, np.float64), mask)
    peak = float(ref_vals.max() - ref_vals.min())
    if peak <= 0.0:
        raise MetricError("reference has zero dynamic range within the mask")
    err = rmse(a, ref, mask, angular=angular)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / err**2))


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    offsets = np.arange(SSIM_WINDOW) - half
    taps = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    w = np.outer(taps, taps)
    return w / w.sum()


def ssim(a: np.ndarray, ref: np.ndarray, mask: np.ndarray) -> float:
    """Mean local structural similarity over the mask, in [-1, 1].

    Gaussian 11x11 window, mirror borders; the dynamic range is taken from
    the reference inside the mask (documented asymmetry).
    """
    if a.shape != ref.shape or a.ndim != 2:
        raise MetricError(f"ssim expects matching 2D maps, got {a.shape} vs {ref.shape}")
    if not mask.any():
        raise MetricError("empty evaluation mask")
    ref_vals = ref[mask]
    drange = float(ref_vals.max() - ref_vals.min())
    if drange <= 0.0:
        raise MetricError("reference has zero dynamic range within the mask")

    x = np.asarray(a, np.float64)
    y = np.asarray(ref, np.float64)
    w = _ssim_window()

    def smooth(img):
        return ndimage.correlate(img, w, mode="reflect")

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x**2
    var_y = smooth(y * y) - mu_y**2
    cov = smooth(x * y) - mu_x * mu_y

    c1 = (SSIM_K1 * drange) ** 2
    c2 = (SSIM_K2 * drange) ** 2
    local = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(local[mask].mean())


def circ_std_map(phi_deg: np.ndarray, window: int = 5, cap_deg: float = 90.0) -> np.ndarray:
    """Local circular standard deviation of an axial angle map, in degrees.

    Angles are doubled, the window-mean resultant length feeds the Fisher
    dispersion, and the result is halved back.  Windows with no resultant
    (antipodal content) saturate at the cap.
    """
    if window % 2 == 0 or window < 1:
        raise ParameterError(f"window must be odd, got {window}")
    psi = np.deg2rad(2.0 * np.asarray(phi_deg, np.float64))
    mean_cos = ndimage.uniform_filter(np.cos(psi), size=window, mode="reflect")
    mean_sin = ndimage.uniform_filter(np.sin(psi), size=window, mode="reflect")
    rbar = np.hypot(mean_cos, mean_sin)
    safe = np.clip(rbar, 1e-300, 1.0)
    csd = 0.5 * np.sqrt(-2.0 * np.log(safe))
    csd_deg = np.degrees(csd)
    csd_deg = np.where(rbar < 1e-12, cap_deg, csd_deg)
    return np.minimum(csd_deg, cap_deg)


def _exact_rank_sum_counts(n: int, m: int) -> np.ndarray:
    """Distribution of the Mann-Whitney statistic: counts[u] over 0..n*m.

    Classic recurrence N(u; i, j) = N(u - j; i - 1, j) + N(u; i, j - 1).
    """
    size = n * m + 1
    counts = np.zeros((n + 1, m + 1, size))
    counts[0, :, 0] = 1.0
    counts[:, 0, 0] = 1.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            shifted = np.zeros(size)
            shifted[j:] = counts[i - 1, j, : size - j]
            counts[i, j] = shifted + counts[i, j - 1]
    return counts[n, m]


def wilcoxon_rank_sum(x, y) -> float:
    """Two-sided rank-sum p-value.

    Exact enumeration of the statistic's distribution when the smaller
    sample has at most 10 values and there are no ties; otherwise the
    normal approximation with tie and continuity corrections.
    """
    x = np.asarray(x, np.float64).ravel()
    y = np.asarray(y, np.float64).ravel()
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise MetricError("both samples must be non-empty")

    combined = np.concatenate([x, y])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(n + m, np.float64)
    sorted_vals = combined[order]
    # average ranks for ties
    i = 0
    tie_sizes = []
    while i < n + m:
        j = i
        while j + 1 < n + m and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        if j > i:
            tie_sizes.append(j - i + 1)
        i = j + 1

    rank_sum_x = ranks[:n].sum()
    u_stat = rank_sum_x - n * (n + 1) / 2.0

    has_ties = bool(tie_sizes)
    if min(n, m) <= 10 and not has_ties:
        counts = _exact_rank_sum_counts(n, m)
        total = counts.sum()
        u_int = int(round(u_stat))
        p_low = counts[: u_int + 1].sum() / total
        p_high = counts[u_int:].sum() / total
        return float(min(1.0, 2.0 * min(p_low, p_high)))

    total_n = n + m
    mean_u = n * m / 2.0
    tie_term = sum(t**3 - t for t in tie_sizes)
    var_u = n * m / 12.0 * ((total_n + 1) - tie_term / (total_n * (total_n - 1)))
    if var_u <= 0:
        return 1.0
    z = (abs(u_stat - mean_u) - 0.5) / math.sqrt(var_u)
    z = max(z, 0.0)
    return float(math.erfc(z / math.sqrt(2.0)))


def quartiles(values) -> tuple[float, float, float]:
    """q1/median/q3 with the interpolating (n+1)-position convention."""
    arr = np.asarray(values, np.float64)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return (math.nan, math.nan, math.nan)
    q = np.quantile(finite, [0.25, 0.5, 0.75], method="weibull")
    return (float(q[0]), float(q[1]), float(q[2]))


@dataclass
class QualityReport:
    """Per-instance score records plus quartile summaries per quantity."""

    records: list = field(default_factory=list)

    def add(self, modality: str, quantity: str, rmse_val: float, npsnr_db: float,
            ssim_pct: float, n_pixels: int) -> None:
        self.records.append(
            {
                "modality": modality,
                "quantity": quantity,
                "rmse": rmse_val,
                "npsnr_db": npsnr_db,
                "ssim_pct": ssim_pct,
                "n_pixels": n_pixels,
            }
        )

    def summary(self) -> dict:
        out: dict = {}
        for quantity in sorted({r["quantity"] for r in self.records}):
            rows = [r for r in self.records if r["quantity"] == quantity]
            out[quantity] = {
                score: quartiles([r[score] for r in rows])
                for score in ("rmse", "npsnr_db", "ssim_pct")
            }
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["modality", "quantity", "rmse", "npsnr_db", "ssim_pct",
                                "n_pixels"]
            )
            writer.writeheader()
            writer.writerows(self.records)

    def write_json(self, path) -> None:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        doc = {
            "records": [{k: clean(v) for k, v in r.items()} for r in self.records],
            "quartiles": {
                q: {s: [clean(v) for v in t] for s, t in block.items()}
                for q, block in self.summary().items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)


def score_quantity(candidate: np.ndarray, reference: np.ndarray, mask: np.ndarray,
                   angular: bool) -> tuple[float, float, float]:
    """(rmse, npsnr, ssim) for one quantity.

    Multi-channel SSIM averages the per-channel scores; channels whose
    reference is constant within the mask (e.g. the normalised leading
    Mueller coefficient) carry no structure and are skipped.
    """
    rm = rmse(candidate, reference, mask, angular=angular)
    ps = npsnr(candidate, reference, mask, angular=angular)
    if candidate.ndim == 2:
        ss = ssim(candidate, reference, mask)
    else:
        chans = candidate.reshape(candidate.shape[0], candidate.shape[1], -1)
        refs = reference.reshape(chans.shape)
        scores = []
        for c in range(chans.shape[2]):
            ref_c = refs[..., c][mask]
            if ref_c.max() - ref_c.min() <= 0:
                continue
            scores.append(ssim(chans[..., c], refs[..., c], mask))
        if not scores:
            raise MetricError("no channel has reference dynamic range within the mask")
        ss = float(np.mean(scores))
    return rm, ps, ss


def quality_report(pairs, mask: np.ndarray, modality: str = "candidate") -> QualityReport:
    """Score instance pairs for every pipeline quantity.

    ``pairs`` is a list of (candidate, reference) dicts keyed by QUANTITIES;
    multi-channel entries (I, M) are scored jointly for RMSE/nPSNR and
    channel-averaged for SSIM.
    """
    report = QualityReport()
    n_pixels = int(mask.sum())
    for candidate, reference in pairs:
        for quantity in QUANTITIES:
            if quantity not in candidate or quantity not in reference:
                continue
            rm, ps, ss = score_quantity(
                np.asarray(candidate[quantity]),
                np.asarray(reference[quantity]),
                mask,
                angular=quantity in ANGULAR_QUANTITIES,
            )
            report.add(modality, quantity, rm, ps, 100.0 * ss, n_pixels)
    return report
