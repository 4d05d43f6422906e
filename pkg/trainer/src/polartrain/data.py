"""Dataset access and patch sampling with augmentation.

Consumes the dataset manifest JSON plus MPAC containers emitted by the
processing toolkit.  Patches are augmented with right-angle rotations,
flips and random crops over a mirror-padded canvas, rescaled to [-1, 1],
and carry a supra-threshold reflection mask for loss exclusion.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import mpac

REFLECTION_THRESHOLD = 0.98


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def hq_images(manifest: dict) -> list[np.ndarray]:
    """High-quality (multi-shot averaged) intensity tensors, float32."""
    return [
        mpac.load(os.path.join(manifest["_dir"], entry["hq_path"])).astype(np.float32)
        for entry in manifest["pairs"]
    ]


class PatchSampler:
    """Draws augmented patches from a pool of images."""

    def __init__(self, images: list[np.ndarray], patch_size: int, seed: int = 0,
                 augment: bool = True):
        if not images:
            raise ValueError("empty image pool")
        self.patch = patch_size
        self.augment = augment
        self.rng = np.random.default_rng(seed)
        pad = patch_size // 2
        # mirror-padded canvases so crops may extend past the frame
        self.canvases = [
            np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")
            for img in images
        ]

    def sample(self) -> np.ndarray:
        canvas = self.canvases[self.rng.integers(len(self.canvases))]
        h, w = canvas.shape[:2]
        r0 = int(self.rng.integers(0, h - self.patch + 1))
        c0 = int(self.rng.integers(0, w - self.patch + 1))
        tile = canvas[r0 : r0 + self.patch, c0 : c0 + self.patch].copy()
        if self.augment:
            k = int(self.rng.integers(4))
            if k:
                tile = np.rot90(tile, k, axes=(0, 1))
            if self.rng.integers(2):
                tile = tile[::-1, :, :]
            if self.rng.integers(2):
                tile = tile[:, ::-1, :]
        return np.ascontiguousarray(tile)

    def batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(patches NHWC in [-1, 1], keep-mask NHW) for one step."""
        tiles = np.stack([self.sample() for _ in range(n)])
        keep = ~(tiles >= REFLECTION_THRESHOLD).any(axis=3)
        return (2.0 * tiles - 1.0).astype(np.float32), keep
