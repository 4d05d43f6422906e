#!/usr/bin/env python3
"""Regenerate the repo-shipped identity fixture manifest.

A single 16->16 convolution whose kernels are centered deltas: the loaded
predictor is the identity map.  Used by loader tests and the CLI without
any training artifacts.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mpolar.network import save_weight_manifest  # noqa: E402


def main():
    weight = np.zeros((16, 16, 3, 3), dtype=np.float32)
    for c in range(16):
        weight[c, c, 1, 1] = 1.0
    layers = [
        {
            "id": "identity_conv",
            "kind": "conv2d",
            "params": {"in_channels": 16, "out_channels": 16},
            "inputs": ["input"],
            "weights": {"weight": weight, "bias": np.zeros(16, dtype=np.float32)},
        }
    ]
    out = os.path.join(os.path.dirname(__file__), "..", "fixtures", "identity.pddn.json")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    save_weight_manifest(out, layers, input_channels=16, output_channels=16, time_embed_dim=0)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
