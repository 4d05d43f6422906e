import json
import os

import numpy as np
import pytest

from mpolar.containers import IntensityTensor, load_array
from mpolar.decompose import derive_all
from mpolar.errors import ParameterError
from mpolar.filters import gaussian_blur
from mpolar.metrics import circ_std_map, wilcoxon_rank_sum, wrap_axial_difference
from mpolar.mueller import forward_intensities
from mpolar.phantom import (
    PhantomSpec,
    RegionSpec,
    add_acquisition_noise,
    default_calibration,
    default_phantom_spec,
    emit_dataset,
    generate_phantom,
)


def identity_region_spec(h=24, w=24):
    region = RegionSpec(
        name="background",
        geometry={"kind": "full"},
        azimuth={"kind": "constant", "deg": 0.0},
        depolarizing_diag=(1.0, 1.0, 1.0),
        transmittance=1.0,
    )
    return PhantomSpec(h, w, (region,), noise_sigma=0.0)


class TestGeneratePhantom:
    def test_identity_optics(self):
        field, truth, labels = generate_phantom(identity_region_spec(), seed=0)
        np.testing.assert_allclose(
            field.values, np.broadcast_to(np.eye(4), field.values.shape), atol=1e-15
        )
        assert truth.diattenuation.max() == 0.0
        assert truth.depolarization.max() == 0.0
        assert truth.retardance_deg.max() == 0.0
        assert (labels == 0).all()

    def test_constant_fibre_round_trip(self):
        regions = (
            RegionSpec(
                name="background",
                geometry={"kind": "full"},
                azimuth={"kind": "constant", "deg": 0.0},
                depolarizing_diag=(0.4, 0.4, 0.4),
                transmittance=0.2,
            ),
            RegionSpec(
                name="fibre-tract",
                geometry={"kind": "band", "row0": 0.25, "row1": 0.75},
                azimuth={"kind": "constant", "deg": 40.0},
                retardance_deg=60.0,
                depolarizing_diag=(0.9, 0.9, 0.9),
                transmittance=0.6,
            ),
        )
        spec = PhantomSpec(32, 32, regions, noise_sigma=0.0)
        field, truth, labels = generate_phantom(spec, seed=1)
        cal = default_calibration()
        maps = derive_all(forward_intensities(field, cal), cal)
        fibre = labels == 1
        dphi = wrap_axial_difference(maps.azimuth_deg[fibre], 40.0)
        assert np.abs(dphi).max() < 1e-4
        assert np.abs(maps.retardance_deg[fibre] - 60.0).max() < 1e-4

    def test_region_labels_cover_geometry(self):
        spec = default_phantom_spec(64, 64)
        _, _, labels = generate_phantom(spec, seed=3)
        # lesion disk present and inside the frame
        assert (labels == 2).sum() > 0
        assert (labels == 3).sum() > 0
        assert set(np.unique(labels)) == {0, 1, 2, 3}

    def test_ground_truth_ranges(self):
        _, truth, _ = generate_phantom(default_phantom_spec(48, 48), seed=5)
        assert truth.diattenuation.min() >= 0 and truth.diattenuation.max() < 1
        assert truth.depolarization.min() >= 0 and truth.depolarization.max() <= 1
        assert truth.retardance_deg.min() >= 0 and truth.retardance_deg.max() <= 180
        assert truth.azimuth_deg.min() >= 0 and truth.azimuth_deg.max() < 180

    def test_invalid_spec_rejected(self):
        region = RegionSpec(
            name="background",
            geometry={"kind": "full"},
            azimuth={"kind": "constant", "deg": 0.0},
            transmittance=1.2,
        )
        with pytest.raises(ParameterError):
            PhantomSpec(32, 32, (region,)).validate()

    def test_rendered_intensities_in_unit_range(self):
        spec = default_phantom_spec(48, 64)
        field, _, _ = generate_phantom(spec, seed=7)
        cal = default_calibration()
        clean = forward_intensities(field, cal)
        assert clean.values.min() >= 0.0
        assert clean.values.max() <= 1.0


class TestAcquisitionNoise:
    def test_sigma_zero_identity(self, rng):
        t = IntensityTensor(rng.random((8, 8, 16)))
        out = add_acquisition_noise(t, 0.0, "gaussian", seed=1)
        np.testing.assert_array_equal(out.values, t.values)

    def test_gaussian_std_monte_carlo(self):
        t = IntensityTensor(np.full((250, 250, 16), 0.5))
        out = add_acquisition_noise(t, 0.05, "gaussian", seed=2)
        resid = out.values - 0.5
        assert abs(resid.std() - 0.05) < 0.01 * 0.05
        assert abs(resid.mean()) < 3 * 0.05 / np.sqrt(resid.size)

    def test_heavy_tailed_variance_and_kurtosis(self):
        t = IntensityTensor(np.full((250, 250, 16), 0.5))
        out = add_acquisition_noise(t, 0.05, "heavy-tailed", seed=3)
        resid = (out.values - 0.5).ravel()
        assert abs(resid.std() - 0.05) < 0.02 * 0.05
        # scaled Student-t with 8 dof has excess kurtosis 1.5
        kurt = ((resid - resid.mean()) ** 4).mean() / resid.var() ** 2 - 3.0
        assert 1.0 < kurt < 2.0

    def test_clamp_events_counted_and_rare(self):
        t = IntensityTensor(np.full((100, 100, 16), 0.5))
        counter = []
        out = add_acquisition_noise(t, 0.05, "gaussian", seed=4, clamp_counter=counter)
        assert counter[0] / out.values.size < 1e-3
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_mean_preserved(self):
        t = IntensityTensor(np.full((200, 200, 16), 0.5))
        out = add_acquisition_noise(t, 0.02, "gaussian", seed=5)
        assert abs(out.values.mean() - 0.5) < 3 * 0.02 / np.sqrt(out.values.size)


class TestEmitDataset:
    def test_noise_free_pair_identical(self, tmp_path):
        spec = default_phantom_spec(32, 32, noise_sigma=0.0)
        manifest_path = emit_dataset(spec, 1, tmp_path, seed=0)
        manifest = json.loads(open(manifest_path).read())
        entry = manifest["pairs"][0]
        lq = load_array(tmp_path / entry["lq_path"]).data
        hq = load_array(tmp_path / entry["hq_path"]).data
        assert lq.tobytes() == hq.tobytes()

    def test_averaging_reduces_noise_by_sqrt_shots(self, tmp_path):
        spec = default_phantom_spec(64, 64, noise_sigma=0.03)
        manifest_path = emit_dataset(spec, 2, tmp_path, seed=1)
        manifest = json.loads(open(manifest_path).read())
        ratios = []
        for entry in manifest["pairs"]:
            lq = load_array(tmp_path / entry["lq_path"]).data
            hq = load_array(tmp_path / entry["hq_path"]).data
            clean = load_array(tmp_path / entry["gt_paths"]["clean"]).data
            ratios.append((hq - clean).std() / (lq - clean).std())
        assert abs(np.mean(ratios) - 1 / np.sqrt(spec.shots)) < 0.1 / np.sqrt(spec.shots)

    def test_manifest_file_inventory(self, tmp_path):
        count = 3
        manifest_path = emit_dataset(default_phantom_spec(24, 24), count, tmp_path, seed=2)
        manifest = json.loads(open(manifest_path).read())
        assert len(manifest["pairs"]) == count
        n_files = 0
        for entry in manifest["pairs"]:
            for path in (
                entry["lq_path"],
                entry["hq_path"],
                entry["gt_paths"]["params"],
                entry["gt_paths"]["clean"],
                entry["labels_path"],
            ):
                full = tmp_path / path
                assert full.exists()
                load_array(full)  # must parse as a container
                n_files += 1
        assert n_files == 2 * count + 3 * count


class TestRegionPhenomenology:
    def test_lesion_core_disrupts_azimuth_more_than_fibre(self):
        spec = default_phantom_spec(96, 128, noise_sigma=0.02)
        field, _, labels = generate_phantom(spec, seed=9)
        cal = default_calibration()
        clean = forward_intensities(field, cal)
        noisy = add_acquisition_noise(clean, spec.noise_sigma, "gaussian", seed=10)
        denoised = gaussian_blur(noisy)
        maps = derive_all(denoised, cal)
        csd = circ_std_map(maps.azimuth_deg)
        fibre = csd[labels == 1]
        lesion = csd[labels == 2]
        assert np.median(lesion) > np.median(fibre)
        assert wilcoxon_rank_sum(fibre, lesion) < 0.01
