import json
import os
import time

import numpy as np
import pytest

from polartrain import mpac
from polartrain.data import PatchSampler
from polartrain.training import TrainConfig, train


@pytest.fixture
def single_patch_image(rng=None):
    gen = np.random.default_rng(7)
    base = gen.random((64, 64, 1)).astype(np.float32) * 0.5 + 0.2
    return [np.repeat(base, 16, axis=2)]


def test_overfit_smoke(tmp_path, single_patch_image):
    """One fixed patch must be memorised within the wall-clock budget."""
    config = TrainConfig(
        patch_size=64,
        batch_size=4,
        num_steps=500,
        learning_rate=1e-3,
        augment=False,
        seed=0,
    )
    started = time.time()
    log = train(None, tmp_path, config, log_every=0, images=single_patch_image)
    elapsed = time.time() - started
    tail = float(np.mean(log["losses"][-50:]))
    print(f"overfit smoke: tail L1 {tail:.4f}, {elapsed:.0f}s")
    assert elapsed < 300.0
    assert tail < 0.05

    # exported artifacts exist and parse
    doc = json.loads(open(log["manifest"]).read())
    assert doc["layers"]
    blob = mpac.load(log["manifest"].replace(".pddn.json", ".pddn.blob"))
    assert blob.size > 0
    fixture = log["fixture_dir"]
    assert mpac.load(os.path.join(fixture, "input.mpac")).shape == (128, 128, 16)
    assert mpac.load(os.path.join(fixture, "reference_output.mpac")).shape == (128, 128, 16)
    assert int(open(os.path.join(fixture, "t.txt")).read()) >= 1


def test_divergence_aborts(tmp_path, single_patch_image):
    config = TrainConfig(patch_size=32, batch_size=2, num_steps=30,
                         learning_rate=1e10, augment=False, seed=0)
    with pytest.raises(RuntimeError, match="diverged"):
        train(None, tmp_path, config, log_every=0, images=single_patch_image)


def test_patch_sampler_augmentation_determinism(single_patch_image):
    a = PatchSampler(single_patch_image, 32, seed=3)
    b = PatchSampler(single_patch_image, 32, seed=3)
    xa, ka = a.batch(4)
    xb, kb = b.batch(4)
    np.testing.assert_array_equal(xa, xb)
    np.testing.assert_array_equal(ka, kb)
    assert xa.min() >= -1.0 and xa.max() <= 1.0


def test_patch_sampler_rejects_empty_pool():
    with pytest.raises(ValueError):
        PatchSampler([], 32)
