import json

import numpy as np
import pytest
import torch

from polartrain import mpac
from polartrain.model import build_model, export_manifest, sinusoidal_embedding, unet_graph


def test_graph_uses_four_depth_multipliers():
    graph = unet_graph(base=16)
    downs = [e for e in graph if e["kind"] == "downsample"]
    assert [d["params"]["out_channels"] for d in downs] == [32, 64, 128]
    kinds = {e["kind"] for e in graph}
    assert kinds == {
        "time_embedding", "conv2d", "residual_block", "downsample", "upsample",
        "skip_concat", "group_norm", "silu",
    }


def test_forward_shape_and_determinism():
    torch.manual_seed(0)
    model = build_model(base=8).eval()
    x = torch.randn(2, 16, 32, 32)
    t = torch.tensor([1, 500])
    with torch.no_grad():
        a = model(x, t)
        b = model(x, t)
    assert a.shape == (2, 16, 32, 32)
    assert torch.equal(a, b)


def test_export_blob_bit_exact(tmp_path):
    torch.manual_seed(1)
    model = build_model(base=8).eval()
    path = tmp_path / "m.pddn.json"
    export_manifest(model, path)

    doc = json.loads(path.read_text())
    assert doc["input_channels"] == 16
    assert doc["output_channels"] == 16
    blob = mpac.load(tmp_path / "m.pddn.blob")
    assert blob.dtype == np.float32

    stem_meta = next(e for e in doc["layers"] if e["id"] == "stem")["weights"]["weight"]
    stem_torch = model.modules_by_id["stem"].conv.weight.detach().numpy()
    stored = blob[stem_meta["offset"] : stem_meta["offset"] + stem_meta["count"]]
    assert stored.tobytes() == stem_torch.astype(np.float32).ravel().tobytes()

    # offsets tile the blob exactly
    total = sum(
        w["count"] for e in doc["layers"] for w in e.get("weights", {}).values()
    )
    assert total == blob.size


def test_sinusoid_matches_reference_formula():
    emb = sinusoidal_embedding(torch.tensor([5.0]), 8)[0].numpy()
    half = 4
    for i in range(half):
        freq = np.exp(-np.log(10000.0) * i / (half - 1))
        assert emb[i] == pytest.approx(np.sin(5 * freq), abs=1e-6)
        assert emb[half + i] == pytest.approx(np.cos(5 * freq), abs=1e-6)


def test_cross_stack_parity_random_weights(tmp_path):
    """The toolkit's inference engine must reproduce the training stack's
    forward pass from the exported manifest."""
    load_weight_manifest = pytest.importorskip("mpolar.network").load_weight_manifest
    torch.manual_seed(2)
    model = build_model(base=16).eval()
    path = tmp_path / "m.pddn.json"
    export_manifest(model, path)
    predictor = load_weight_manifest(path)

    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (64, 64, 16)).astype(np.float32)
    for t in (1, 250, 1000):
        with torch.no_grad():
            ref = model(torch.from_numpy(x).permute(2, 0, 1)[None], torch.tensor([t]))
        ref = ref[0].permute(1, 2, 0).numpy()
        assert np.abs(predictor(x, t) - ref).max() < 1e-4
