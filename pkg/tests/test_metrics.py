import itertools
import json
import math

import numpy as np
import pytest

from mpolar.errors import MetricError, ParameterError
from mpolar.metrics import (
    circ_std_map,
    npsnr,
    quality_report,
    quartiles,
    rmse,
    ssim,
    wilcoxon_rank_sum,
    wrap_axial_difference,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
)


def full_mask(shape):
    return np.ones(shape, dtype=bool)


class TestRmse:
    def test_identical(self, rng):
        a = rng.random((8, 8))
        assert rmse(a, a, full_mask(a.shape)) == 0.0

    def test_constant_offset(self, rng):
        a = rng.random((8, 8))
        assert rmse(a + 0.1, a, full_mask(a.shape)) == pytest.approx(0.1, abs=1e-12)

    def test_axial_wrap(self):
        a = np.full((4, 4), 179.0)
        b = np.full((4, 4), 1.0)
        assert rmse(a, b, full_mask(a.shape), angular=True) == pytest.approx(2.0, abs=1e-12)

    def test_axial_invariance_under_180(self, rng):
        a = rng.uniform(0, 180, (6, 6))
        b = rng.uniform(0, 180, (6, 6))
        m = full_mask(a.shape)
        base = rmse(a, b, m, angular=True)
        assert rmse(a + 180.0, b, m, angular=True) == pytest.approx(base, abs=1e-9)
        assert rmse(a, b + 180.0, m, angular=True) == pytest.approx(base, abs=1e-9)

    def test_empty_mask(self, rng):
        a = rng.random((4, 4))
        with pytest.raises(MetricError):
            rmse(a, a, np.zeros((4, 4), bool))


class TestNpsnr:
    def test_zero_db_when_error_equals_range(self, rng):
        ref = rng.random((8, 8))
        peak = ref.max() - ref.min()
        assert npsnr(ref + peak, ref, full_mask(ref.shape)) == pytest.approx(0.0, abs=1e-9)

    def test_twenty_db(self, rng):
        ref = rng.random((8, 8))
        peak = ref.max() - ref.min()
        assert npsnr(ref + peak / 10, ref, full_mask(ref.shape)) == pytest.approx(
            20.0, abs=1e-9
        )

    def test_negative_db_when_error_exceeds_range(self, rng):
        ref = rng.random((8, 8))
        peak = ref.max() - ref.min()
        assert npsnr(ref + 2 * peak, ref, full_mask(ref.shape)) < 0.0

    def test_infinite_sentinel(self, rng):
        ref = rng.random((8, 8))
        assert math.isinf(npsnr(ref, ref, full_mask(ref.shape)))

    def test_zero_range_rejected(self):
        flat = np.full((4, 4), 0.5)
        with pytest.raises(MetricError):
            npsnr(flat, flat, full_mask(flat.shape))


def ssim_brute_force(a, ref, mask):
    """Direct windowed evaluation with explicit mirror indexing."""
    h, w = a.shape
    half = (SSIM_WINDOW - 1) // 2
    offs = np.arange(SSIM_WINDOW) - half
    taps = np.exp(-0.5 * (offs / SSIM_SIGMA) ** 2)
    kernel = np.outer(taps, taps)
    kernel /= kernel.sum()

    def mirror(i, n):
        period = 2 * n
        i %= period
        if i < 0:
            i += period
        return i if i < n else period - 1 - i

    rv = ref[mask]
    drange = rv.max() - rv.min()
    c1 = (SSIM_K1 * drange) ** 2
    c2 = (SSIM_K2 * drange) ** 2
    local = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            ax = np.empty((SSIM_WINDOW, SSIM_WINDOW))
            ay = np.empty((SSIM_WINDOW, SSIM_WINDOW))
            for i in range(SSIM_WINDOW):
                for j in range(SSIM_WINDOW):
                    ax[i, j] = a[mirror(r + i - half, h), mirror(c + j - half, w)]
                    ay[i, j] = ref[mirror(r + i - half, h), mirror(c + j - half, w)]
            mx = (kernel * ax).sum()
            my = (kernel * ay).sum()
            vx = (kernel * ax * ax).sum() - mx * mx
            vy = (kernel * ay * ay).sum() - my * my
            cxy = (kernel * ax * ay).sum() - mx * my
            local[r, c] = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
                (mx * mx + my * my + c1) * (vx + vy + c2)
            )
    return local[mask].mean()


class TestSsim:
    def test_identical(self, rng):
        a = rng.random((16, 16))
        assert ssim(a, a, full_mask(a.shape)) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated_negative(self, rng):
        ref = rng.random((32, 32))
        a = -ref + 1.0
        score = ssim(a, ref, full_mask(ref.shape))
        oracle = ssim_brute_force(a, ref, full_mask(ref.shape))
        assert score < 0.0
        assert score == pytest.approx(oracle, abs=1e-10)

    def test_matches_brute_force(self, rng):
        a = rng.random((32, 32))
        ref = rng.random((32, 32))
        mask = full_mask((32, 32))
        assert ssim(a, ref, mask) == pytest.approx(ssim_brute_force(a, ref, mask), abs=1e-10)

    def test_masked_region_only(self, rng):
        a = rng.random((32, 32))
        ref = rng.random((32, 32))
        mask = np.zeros((32, 32), bool)
        mask[4:20, 6:28] = True
        assert ssim(a, ref, mask) == pytest.approx(
            ssim_brute_force(a, ref, mask), abs=1e-10
        )

    def test_zero_range_rejected(self, rng):
        with pytest.raises(MetricError):
            ssim(rng.random((8, 8)), np.zeros((8, 8)), full_mask((8, 8)))


class TestCircStd:
    def test_constant_field(self):
        phi = np.full((12, 12), 37.0)
        np.testing.assert_allclose(circ_std_map(phi), 0.0, atol=1e-9)

    def test_vanishing_resultant_capped(self):
        # Every 5x5 window sees all 25 residues of (5r + c) mod 25, so the
        # doubled angles are the 25th roots of unity and the resultant is zero
        # (the balanced-antipodal situation, exact instead of approximate).
        r, c = np.mgrid[:15, :15]
        phi = ((5 * r + c) % 25) * (180.0 / 25.0)
        out = circ_std_map(phi, window=5)
        interior = out[2:-2, 2:-2]
        np.testing.assert_allclose(interior, 90.0, atol=1e-9)

    def test_uniform_monte_carlo(self, rng):
        field = rng.uniform(0.0, 180.0, (200, 200))
        observed = float(np.median(circ_std_map(field, window=5)))
        # independent MC oracle: windows of 25 i.i.d. axial draws
        trials = 20000
        draws = rng.uniform(0.0, 2.0 * np.pi, (trials, 25))
        rbar = np.hypot(np.cos(draws).mean(axis=1), np.sin(draws).mean(axis=1))
        oracle = np.median(np.minimum(np.degrees(0.5 * np.sqrt(-2 * np.log(rbar))), 90.0))
        assert abs(observed - oracle) < 0.05 * oracle

    def test_global_rotation_invariance(self, rng):
        phi = rng.uniform(0, 180, (24, 24))
        base = circ_std_map(phi)
        rotated = circ_std_map((phi + 67.0) % 180.0)
        np.testing.assert_allclose(base, rotated, atol=1e-9)

    def test_even_window_rejected(self):
        with pytest.raises(ParameterError):
            circ_std_map(np.zeros((8, 8)), window=4)


def exact_two_sided_oracle(x, y):
    """Enumerate every rank placement (tie-free) and fold the tails."""
    n, m = len(x), len(y)
    combined = sorted(list(x) + list(y))
    assert len(set(combined)) == n + m, "oracle needs tie-free data"
    u_obs = sum(1 for xi in x for yi in y if xi > yi)
    dist = {}
    for positions in itertools.combinations(range(n + m), n):
        u = sum(p - k for k, p in enumerate(sorted(positions)))
        dist[u] = dist.get(u, 0) + 1
    total = sum(dist.values())
    p_low = sum(c for u, c in dist.items() if u <= u_obs) / total
    p_high = sum(c for u, c in dist.items() if u >= u_obs) / total
    return min(1.0, 2.0 * min(p_low, p_high))


class TestWilcoxon:
    def test_spec_exact_case(self):
        assert wilcoxon_rank_sum([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1, abs=1e-12)

    def test_identical_samples(self):
        assert wilcoxon_rank_sum([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)

    def test_matches_enumeration_oracle(self, rng):
        for n, m in [(3, 3), (3, 5), (4, 4), (5, 6)]:
            x = rng.standard_normal(n)
            y = rng.standard_normal(m) + 0.4
            ours = wilcoxon_rank_sum(x, y)
            assert ours == pytest.approx(exact_two_sided_oracle(list(x), list(y)), abs=1e-12)

    def test_exact_and_approx_agree(self, rng):
        # exact path vs the normal approximation, n = 10 tie-free samples
        for _ in range(5):
            x = rng.standard_normal(10)
            y = rng.standard_normal(10) + 0.3
            exact = wilcoxon_rank_sum(x, y)
            assert abs(exact - _normal_approx_reference(x, y)) < 0.01

    def test_large_shift(self, rng):
        x = rng.standard_normal(200)
        y = rng.standard_normal(200) + 1.0
        assert wilcoxon_rank_sum(x, y) < 1e-6

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            wilcoxon_rank_sum([], [1.0])

    def test_p_in_unit_interval(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 30))
            m = int(rng.integers(2, 30))
            p = wilcoxon_rank_sum(rng.standard_normal(n), rng.standard_normal(m))
            assert 0.0 <= p <= 1.0


def _normal_approx_reference(x, y):
    """Textbook normal approximation with continuity correction (no ties)."""
    n, m = len(x), len(y)
    u = sum(1 for xi in x for yi in y if xi > yi)
    mean = n * m / 2
    var = n * m * (n + m + 1) / 12
    z = max((abs(u - mean) - 0.5), 0.0) / math.sqrt(var)
    return math.erfc(z / math.sqrt(2))


def test_quartile_convention():
    assert quartiles([1, 2, 3, 4, 5]) == pytest.approx((1.5, 3.0, 4.5))


class TestQualityReport:
    def test_identical_pair(self, rng, tmp_path):
        maps = {"D": rng.random((16, 16)), "phi": rng.uniform(0, 180, (16, 16))}
        report = quality_report([(maps, maps)], full_mask((16, 16)), modality="self")
        by_q = {r["quantity"]: r for r in report.records}
        assert by_q["D"]["rmse"] == 0.0
        assert math.isinf(by_q["D"]["npsnr_db"])
        assert by_q["D"]["ssim_pct"] == pytest.approx(100.0, abs=1e-9)
        csv_path = tmp_path / "r.csv"
        json_path = tmp_path / "r.json"
        report.write_csv(csv_path)
        report.write_json(json_path)
        header = csv_path.read_text().splitlines()[0]
        assert header == "modality,quantity,rmse,npsnr_db,ssim_pct,n_pixels"
        doc = json.loads(json_path.read_text())
        assert doc["records"][0]["npsnr_db"] is None  # inf sentinel mirrored as null
        assert "quartiles" in doc

    def test_multichannel_scoring(self, rng):
        cand = {"I": rng.random((12, 12, 16))}
        ref = {"I": rng.random((12, 12, 16))}
        report = quality_report([(cand, ref)], full_mask((12, 12)))
        rec = report.records[0]
        assert rec["quantity"] == "I"
        assert rec["rmse"] > 0
