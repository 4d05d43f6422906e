"""Noise-predictor network: a small four-depth U-Net built from the portable
layer vocabulary, instantiated in torch for training and exported to the
JSON-graph + float32-blob manifest executed by the processing toolkit.

Semantics are pinned to the manifest contract: reflect padding (edge
excluded) around 3x3 convolutions, group normalisation with eps 1e-5, SiLU
activations, nearest-neighbour upsampling, residual blocks with an additive
per-channel time injection.
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

GROUP_NORM_EPS = 1e-5


def unet_graph(base: int = 16, temb_dim: int = 32, temb_hidden: int = 128,
               groups: int = 8, channels: int = 16) -> list[dict]:
    """Ordered layer descriptors for the (1, 2, 4, 8) multiplier U-Net."""
    c1, c2, c4, c8 = base, 2 * base, 4 * base, 8 * base

    def layer(lid, kind, params, inputs):
        return {"id": lid, "kind": kind, "params": params, "inputs": inputs}

    def block(lid, cin, cout, source):
        return layer(
            lid, "residual_block",
            {"in_channels": cin, "out_channels": cout, "groups": groups},
            [source, "temb"],
        )

    return [
        layer("temb", "time_embedding", {"dim": temb_dim, "hidden": temb_hidden},
              ["time"]),
        layer("stem", "conv2d", {"in_channels": channels, "out_channels": c1},
              ["input"]),
        block("enc1", c1, c1, "stem"),
        layer("down1", "downsample", {"in_channels": c1, "out_channels": c2}, ["enc1"]),
        block("enc2", c2, c2, "down1"),
        layer("down2", "downsample", {"in_channels": c2, "out_channels": c4}, ["enc2"]),
        block("enc3", c4, c4, "down2"),
        layer("down3", "downsample", {"in_channels": c4, "out_channels": c8}, ["enc3"]),
        block("mid", c8, c8, "down3"),
        layer("up3", "upsample", {"in_channels": c8, "out_channels": c4}, ["mid"]),
        layer("cat3", "skip_concat", {}, ["enc3", "up3"]),
        block("dec3", c8, c4, "cat3"),
        layer("up2", "upsample", {"in_channels": c4, "out_channels": c2}, ["dec3"]),
        layer("cat2", "skip_concat", {}, ["enc2", "up2"]),
        block("dec2", c4, c2, "cat2"),
        layer("up1", "upsample", {"in_channels": c2, "out_channels": c1}, ["dec2"]),
        layer("cat1", "skip_concat", {}, ["enc1", "up1"]),
        block("dec1", c2, c1, "cat1"),
        layer("head_norm", "group_norm", {"groups": groups, "channels": c1}, ["dec1"]),
        layer("head_act", "silu", {}, ["head_norm"]),
        layer("head", "conv2d", {"in_channels": c1, "out_channels": channels},
              ["head_act"]),
    ]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / (half - 1))
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.float32)


class ReflectConv(nn.Module):
    """3x3 reflect-padded conv; ``gain`` scales the effective weights.

    A gain > 1 reparametrises training of large-amplitude outputs (the noise
    estimate is ~100x the terminal-step residual) so bounded L1 gradients do
    not have to grow the raw weights step by linear step; exported manifests
    receive the effective (gain-multiplied) weights and stay plain convs.
    """

    def __init__(self, cin, cout, stride=1, gain=1.0):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=0)
        self.gain = float(gain)

    def forward(self, x):
        out = self.conv(F.pad(x, (1, 1, 1, 1), mode="reflect"))
        return out * self.gain if self.gain != 1.0 else out

    def effective_weight(self):
        return self.conv.weight * self.gain

    def effective_bias(self):
        return self.conv.bias * self.gain


class Downsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = ReflectConv(cin, cout, stride=2)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = ReflectConv(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class TimeEmbedding(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.dim = dim
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, t):
        code = sinusoidal_embedding(t, self.dim)
        return self.lin2(F.silu(self.lin1(code)))


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, groups, temb_hidden):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin, eps=GROUP_NORM_EPS)
        self.conv1 = ReflectConv(cin, cout)
        self.time_proj = nn.Linear(temb_hidden, cout)
        self.norm2 = nn.GroupNorm(groups, cout, eps=GROUP_NORM_EPS)
        self.conv2 = ReflectConv(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class NoisePredictor(nn.Module):
    """Executes the layer graph; input NCHW float32 in [-1, 1]."""

    def __init__(self, graph: list[dict], temb_hidden: int, head_gain: float = 1.0):
        super().__init__()
        self.graph = graph
        self.modules_by_id = nn.ModuleDict()
        last_id = graph[-1]["id"]
        for entry in graph:
            kind, params, lid = entry["kind"], entry["params"], entry["id"]
            if kind == "conv2d":
                gain = head_gain if lid == last_id else 1.0
                mod = ReflectConv(params["in_channels"], params["out_channels"],
                                  gain=gain)
                if lid == last_id:
                    # start at the zero predictor; the gain feeds growth
                    nn.init.zeros_(mod.conv.weight)
                    nn.init.zeros_(mod.conv.bias)
            elif kind == "downsample":
                mod = Downsample(params["in_channels"], params["out_channels"])
            elif kind == "upsample":
                mod = Upsample(params["in_channels"], params["out_channels"])
            elif kind == "group_norm":
                mod = nn.GroupNorm(params["groups"], params["channels"],
                                   eps=GROUP_NORM_EPS)
            elif kind == "time_embedding":
                mod = TimeEmbedding(params["dim"], params["hidden"])
            elif kind == "residual_block":
                mod = ResidualBlock(params["in_channels"], params["out_channels"],
                                    params["groups"], temb_hidden)
            elif kind in ("silu", "skip_concat"):
                mod = nn.Identity()
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            self.modules_by_id[lid] = mod

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        values: dict[str, torch.Tensor] = {"input": x}
        temb_cache: torch.Tensor | None = None
        for entry in self.graph:
            lid, kind, inputs = entry["id"], entry["kind"], entry["inputs"]
            mod = self.modules_by_id[lid]
            if kind == "time_embedding":
                temb_cache = mod(t)
                values[lid] = temb_cache
            elif kind == "residual_block":
                values[lid] = mod(values[inputs[0]], values[inputs[1]])
            elif kind == "silu":
                values[lid] = F.silu(values[inputs[0]])
            elif kind == "skip_concat":
                values[lid] = torch.cat([values[r] for r in inputs], dim=1)
            else:
                values[lid] = mod(values[inputs[0]])
        return values[self.graph[-1]["id"]]


def build_model(base: int = 16, temb_dim: int = 32, temb_hidden: int = 128,
                groups: int = 8, head_gain: float = 1.0) -> NoisePredictor:
    return NoisePredictor(unet_graph(base, temb_dim, temb_hidden, groups), temb_hidden,
                          head_gain=head_gain)


def compact_graph(width: int = 32, groups: int = 4, channels: int = 16) -> list[dict]:
    """Minimal vocabulary-conformant stack (no encoder/decoder), used by the
    overfit smoke test of the training machinery."""

    def layer(lid, kind, params, inputs):
        return {"id": lid, "kind": kind, "params": params, "inputs": inputs}

    return [
        layer("c1", "conv2d", {"in_channels": channels, "out_channels": width},
              ["input"]),
        layer("n1", "group_norm", {"groups": groups, "channels": width}, ["c1"]),
        layer("a1", "silu", {}, ["n1"]),
        layer("c2", "conv2d", {"in_channels": width, "out_channels": width}, ["a1"]),
        layer("a2", "silu", {}, ["c2"]),
        layer("head", "conv2d", {"in_channels": width, "out_channels": channels},
              ["a2"]),
    ]


def build_compact_model(width: int = 32, groups: int = 4,
                        head_gain: float = 1.0) -> NoisePredictor:
    return NoisePredictor(compact_graph(width, groups), temb_hidden=width,
                          head_gain=head_gain)


def _layer_weights(entry: dict, module: nn.Module) -> dict[str, np.ndarray]:
    kind = entry["kind"]

    def npy(t):
        return t.detach().cpu().numpy().astype(np.float32)

    if kind in ("conv2d", "downsample", "upsample"):
        rconv = module.conv if kind != "conv2d" else module
        return {"weight": npy(rconv.effective_weight()),
                "bias": npy(rconv.effective_bias())}
    if kind == "group_norm":
        return {"scale": npy(module.weight), "bias": npy(module.bias)}
    if kind == "time_embedding":
        return {
            "w1": npy(module.lin1.weight),
            "b1": npy(module.lin1.bias),
            "w2": npy(module.lin2.weight),
            "b2": npy(module.lin2.bias),
        }
    if kind == "residual_block":
        out = {
            "norm1_scale": npy(module.norm1.weight),
            "norm1_bias": npy(module.norm1.bias),
            "conv1_weight": npy(module.conv1.conv.weight),
            "conv1_bias": npy(module.conv1.conv.bias),
            "time_weight": npy(module.time_proj.weight),
            "time_bias": npy(module.time_proj.bias),
            "norm2_scale": npy(module.norm2.weight),
            "norm2_bias": npy(module.norm2.bias),
            "conv2_weight": npy(module.conv2.conv.weight),
            "conv2_bias": npy(module.conv2.conv.bias),
        }
        if module.skip is not None:
            out["skip_weight"] = npy(module.skip.weight)
            out["skip_bias"] = npy(module.skip.bias)
        return out
    return {}


def export_manifest(model: NoisePredictor, path, channels: int = 16,
                    temb_dim: int = 32) -> None:
    """Write the JSON graph plus one concatenated float32 blob (MPAC)."""
    from . import mpac

    base = str(path)
    if base.endswith(".pddn.json"):
        base = base[: -len(".pddn.json")]
    chunks: list[np.ndarray] = []
    offset = 0
    entries = []
    for entry in model.graph:
        weights_meta = {}
        for name, arr in _layer_weights(entry, model.modules_by_id[entry["id"]]).items():
            weights_meta[name] = {
                "offset": offset,
                "count": int(arr.size),
                "shape": list(arr.shape),
            }
            chunks.append(arr.ravel())
            offset += arr.size
        entries.append({**entry, "weights": weights_meta})
    blob = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    mpac.save(base + ".pddn.blob", blob.astype(np.float32), labels=["weights"])
    doc = {
        "layers": entries,
        "input_channels": channels,
        "output_channels": channels,
        "time_embed_dim": temb_dim,
    }
    with open(base + ".pddn.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def reload_blob(path) -> np.ndarray:
    from . import mpac

    return mpac.load(path)
