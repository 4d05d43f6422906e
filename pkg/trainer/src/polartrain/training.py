"""Training loop: self-supervised noise prediction on high-quality patches.

Per step: sample augmented patches, draw per-sample time-points uniformly,
corrupt with the closed-form forward jump, and minimise the L1 gap between
predicted and injected noise (reflection-masked).  Exports the portable
weight manifest plus a parity fixture holding one reference forward pass.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import mpac
from .data import PatchSampler, hq_images, load_manifest
from .model import build_model, export_manifest


@dataclass
class TrainConfig:
    patch_size: int = 128
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "l1"
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_steps: int = 5000  # desk-scale default
    min_timestep_sampled: int = 1
    max_timestep_sampled: int = 1000
    base_channels: int = 16
    time_embed_dim: int = 32
    time_embed_hidden: int = 128
    groups: int = 8
    head_gain: float = 1.0
    cosine_lr_decay: bool = False
    augment: bool = True
    seed: int = 0


def _schedule(config: TrainConfig):
    beta = np.linspace(config.beta_start, config.beta_end, config.num_timesteps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return torch.from_numpy(np.sqrt(alpha_bar)).float(), torch.from_numpy(
        np.sqrt(1.0 - alpha_bar)
    ).float()


def train(manifest_path, out_dir, config: TrainConfig, log_every: int = 50,
          images: list | None = None) -> dict:
    """Fit the predictor and write manifest, parity fixture and run log.

    Returns a dict with artifact paths and the loss trace.
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    torch.set_num_threads(os.cpu_count() or 1)

    if images is None:
        images = hq_images(load_manifest(manifest_path))
    sampler = PatchSampler(images, config.patch_size, seed=config.seed,
                           augment=config.augment)
    model = build_model(config.base_channels, config.time_embed_dim,
                        config.time_embed_hidden, config.groups,
                        head_gain=config.head_gain)
    if config.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {config.optimizer!r}")
    if config.loss != "l1":
        raise ValueError(f"unsupported loss {config.loss!r}")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = None
    if config.cosine_lr_decay:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.num_steps
        )
    sqrt_ab, sqrt_1mab = _schedule(config)
    t_cap = min(config.max_timestep_sampled, config.num_timesteps)
    t_floor = max(1, min(config.min_timestep_sampled, t_cap))

    generator = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    started = time.time()
    model.train()
    for step in range(config.num_steps):
        patches, keep = sampler.batch(config.batch_size)
        x0 = torch.from_numpy(patches).permute(0, 3, 1, 2)  # NCHW
        keep_t = torch.from_numpy(keep)[:, None, :, :]
        t = torch.randint(t_floor, t_cap + 1, (config.batch_size,), generator=generator)
        eps = torch.randn(x0.shape, generator=generator)
        x_t = sqrt_ab[t][:, None, None, None] * x0 + sqrt_1mab[t][:, None, None, None] * eps

        predicted = model(x_t, t)
        gap = torch.abs(predicted - eps) * keep_t
        loss = gap.sum() / (keep_t.sum() * x0.shape[1])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()

        value = float(loss.detach())
        if not math.isfinite(value):
            raise RuntimeError(f"training diverged (non-finite loss) at step {step}")
        losses.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  l1 {value:.4f}  ({time.time() - started:.0f}s)")

    model.eval()
    manifest_out = os.path.join(out_dir, "desk.pddn.json")
    export_manifest(model, manifest_out, channels=16, temb_dim=config.time_embed_dim)

    fixture_dir = os.path.join(out_dir, "parity_fixture")
    os.makedirs(fixture_dir, exist_ok=True)
    # fixture patch at the inference tile size, so CLI-level runs see the
    # very same tensor (no tiler padding)
    fixture_sampler = PatchSampler(images, 128, seed=config.seed + 1, augment=False)
    fixture_patch, _ = fixture_sampler.batch(1)
    fixture_t = 1
    with torch.no_grad():
        reference = model(
            torch.from_numpy(fixture_patch).permute(0, 3, 1, 2),
            torch.tensor([fixture_t]),
        )
    mpac.save(os.path.join(fixture_dir, "input.mpac"), fixture_patch[0],
              labels=["intensity"])
    with open(os.path.join(fixture_dir, "t.txt"), "w") as fh:
        fh.write(f"{fixture_t}\n")
    mpac.save(
        os.path.join(fixture_dir, "reference_output.mpac"),
        reference[0].permute(1, 2, 0).numpy().astype(np.float32),
        labels=["epsilon"],
    )

    run_log = {
        "config": asdict(config),
        "losses": losses,
        "wall_seconds": time.time() - started,
        "manifest": manifest_out,
        "fixture_dir": fixture_dir,
    }
    with open(os.path.join(out_dir, "run_log.json"), "w", encoding="utf-8") as fh:
        json.dump(run_log, fh, indent=1)
    return run_log
