"""Loader and executor for the portable noise-predictor weight manifest.

A manifest is a JSON graph (``<name>.pddn.json``) plus one MPAC blob of
concatenated float32 weights (``<name>.pddn.blob``).  Layers execute in
list order; inputs may only reference earlier layers or the reserved ids
``input`` (the image tensor) and ``time`` (the scalar time-point), which
makes the graph acyclic by construction.

Tensors are (H, W, C) float32 throughout.  Convolutions pad by edge-excluded
reflection, matching the training stack's reflect padding.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .containers import load_array, save_array
from .errors import ManifestError

GROUP_NORM_EPS = 1e-5
MANIFEST_SUFFIX = ".pddn.json"
BLOB_SUFFIX = ".pddn.blob"

LAYER_KINDS = (
    "conv2d",
    "group_norm",
    "silu",
    "downsample",
    "upsample",
    "skip_concat",
    "time_embedding",
    "residual_block",
)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 convolution on (H, W, C), reflect padding, optional stride 2."""
    xpad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    win = sliding_window_view(xpad, (3, 3), axis=(0, 1))
    if stride == 2:
        win = win[::2, ::2]
    h, w = win.shape[:2]
    cols = np.ascontiguousarray(win).reshape(h * w, -1)
    wmat = weight.reshape(weight.shape[0], -1)
    out = cols @ wmat.T + bias
    return out.reshape(h, w, weight.shape[0])


def _conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    wmat = weight.reshape(weight.shape[0], weight.shape[1])
    return x @ wmat.T + bias


def _group_norm(x: np.ndarray, groups: int, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    grouped = x.reshape(h, w, groups, c // groups)
    mean = grouped.mean(axis=(0, 1, 3), keepdims=True)
    var = grouped.var(axis=(0, 1, 3), keepdims=True)
    normed = (grouped - mean) / np.sqrt(var + GROUP_NORM_EPS)
    return normed.reshape(h, w, c) * scale + bias


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Transformer-style position code for a scalar time-point."""
    half = dim // 2
    if half < 2:
        return np.zeros(dim, dtype=np.float32)
    freqs = np.exp(np.arange(half, dtype=np.float64) * (-np.log(10000.0) / (half - 1)))
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


@dataclass
class _Layer:
    id: str
    kind: str
    params: dict
    inputs: list
    weights: dict  # name -> ndarray


class EpsilonPredictor:
    """Callable graph: (H x W x C image in [-1, 1], time-point) -> noise map."""

    def __init__(self, layers: list[_Layer], input_channels: int, output_channels: int,
                 time_embed_dim: int):
        self.layers = layers
        self.input_channels = input_channels
        self.output_channels = output_channels
        self.time_embed_dim = time_embed_dim

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != self.input_channels:
            raise ManifestError(
                f"predictor input must be (H, W, {self.input_channels}), got {x.shape}"
            )
        values: dict[str, np.ndarray] = {"input": x}
        time_code = sinusoidal_embedding(t, self.time_embed_dim)
        for layer in self.layers:
            args = [time_code if ref == "time" else values[ref] for ref in layer.inputs]
            values[layer.id] = _EXECUTORS[layer.kind](layer, args)
        return values[self.layers[-1].id].astype(np.float32, copy=False)


def _exec_conv2d(layer, args):
    return _conv2d(args[0], layer.weights["weight"], layer.weights["bias"])


def _exec_group_norm(layer, args):
    return _group_norm(
        args[0], int(layer.params["groups"]), layer.weights["scale"], layer.weights["bias"]
    )


def _exec_silu(layer, args):
    return _silu(args[0])


def _exec_downsample(layer, args):
    return _conv2d(args[0], layer.weights["weight"], layer.weights["bias"], stride=2)


def _exec_upsample(layer, args):
    x = np.repeat(np.repeat(args[0], 2, axis=0), 2, axis=1)
    return _conv2d(x, layer.weights["weight"], layer.weights["bias"])


def _exec_skip_concat(layer, args):
    return np.concatenate(args, axis=2)


def _exec_time_embedding(layer, args):
    code = args[0]
    w = layer.weights
    hidden = _silu(code @ w["w1"].T + w["b1"])
    return hidden @ w["w2"].T + w["b2"]


def _exec_residual_block(layer, args):
    x, temb = args
    w = layer.weights
    groups = int(layer.params["groups"])
    h = _group_norm(x, groups, w["norm1_scale"], w["norm1_bias"])
    h = _conv2d(_silu(h), w["conv1_weight"], w["conv1_bias"])
    h = h + (temb @ w["time_weight"].T + w["time_bias"])
    h = _group_norm(h, groups, w["norm2_scale"], w["norm2_bias"])
    h = _conv2d(_silu(h), w["conv2_weight"], w["conv2_bias"])
    if "skip_weight" in w:
        x = _conv1x1(x, w["skip_weight"], w["skip_bias"])
    return h + x


_EXECUTORS = {
    "conv2d": _exec_conv2d,
    "group_norm": _exec_group_norm,
    "silu": _exec_silu,
    "downsample": _exec_downsample,
    "upsample": _exec_upsample,
    "skip_concat": _exec_skip_concat,
    "time_embedding": _exec_time_embedding,
    "residual_block": _exec_residual_block,
}

# weight name -> shape template, by kind; C_in/C_out/G/E resolved per layer
_WEIGHT_SPECS = {
    "conv2d": {"weight": ("out", "in", 3, 3), "bias": ("out",)},
    "downsample": {"weight": ("out", "in", 3, 3), "bias": ("out",)},
    "upsample": {"weight": ("out", "in", 3, 3), "bias": ("out",)},
    "group_norm": {"scale": ("ch",), "bias": ("ch",)},
    "time_embedding": {
        "w1": ("hidden", "dim"),
        "b1": ("hidden",),
        "w2": ("hidden", "hidden"),
        "b2": ("hidden",),
    },
}


def _shape_of(template, layer_params, temb_dim):
    lookup = {
        "in": layer_params.get("in_channels"),
        "out": layer_params.get("out_channels"),
        "ch": layer_params.get("channels"),
        "dim": layer_params.get("dim"),
        "hidden": layer_params.get("hidden"),
        "temb": temb_dim,
    }
    return tuple(int(lookup[s]) if isinstance(s, str) else int(s) for s in template)


def _take(blob: np.ndarray, layer_id: str, name: str, ref: dict, expected_shape) -> np.ndarray:
    offset = int(ref.get("offset", -1))
    count = int(ref.get("count", -1))
    shape = tuple(int(v) for v in ref.get("shape", ()))
    if count != int(np.prod(shape, dtype=np.int64)):
        raise ManifestError(f"layer {layer_id!r}: weight {name!r} count does not match shape")
    if offset < 0 or offset + count > blob.size:
        raise ManifestError(f"layer {layer_id!r}: weight {name!r} points outside the blob")
    if expected_shape is not None and shape != expected_shape:
        raise ManifestError(
            f"layer {layer_id!r}: weight {name!r} has shape {shape}, expected {expected_shape}"
        )
    return blob[offset : offset + count].reshape(shape)


def _residual_weight_shapes(params, temb_dim):
    cin = int(params["in_channels"])
    cout = int(params["out_channels"])
    shapes = {
        "norm1_scale": (cin,),
        "norm1_bias": (cin,),
        "conv1_weight": (cout, cin, 3, 3),
        "conv1_bias": (cout,),
        "time_weight": (cout, temb_dim),
        "time_bias": (cout,),
        "norm2_scale": (cout,),
        "norm2_bias": (cout,),
        "conv2_weight": (cout, cout, 3, 3),
        "conv2_bias": (cout,),
    }
    if cin != cout:
        shapes["skip_weight"] = (cout, cin, 1, 1)
        shapes["skip_bias"] = (cout,)
    return shapes


def _infer_signature(layer: _Layer, in_sigs: list, temb_dim: int):
    """Validate wiring and return the output signature ('image'/'vector', size)."""
    kind, params, lid = layer.kind, layer.params, layer.id

    def need_image(pos=0):
        tag, size = in_sigs[pos]
        if tag != "image":
            raise ManifestError(f"layer {lid!r}: input {pos} must be an image tensor")
        return size

    if kind in ("conv2d", "downsample", "upsample"):
        cin = int(params["in_channels"])
        if need_image() != cin:
            raise ManifestError(f"layer {lid!r}: expects {cin} channels, gets {in_sigs[0][1]}")
        return ("image", int(params["out_channels"]))
    if kind == "group_norm":
        ch = int(params["channels"])
        if need_image() != ch:
            raise ManifestError(f"layer {lid!r}: channels mismatch ({in_sigs[0][1]} vs {ch})")
        if ch % int(params["groups"]) != 0:
            raise ManifestError(f"layer {lid!r}: channels not divisible by groups")
        return ("image", ch)
    if kind == "silu":
        return in_sigs[0]
    if kind == "skip_concat":
        return ("image", sum(need_image(i) for i in range(len(in_sigs))))
    if kind == "time_embedding":
        if in_sigs[0][0] != "time":
            raise ManifestError(f"layer {lid!r}: time_embedding must consume 'time'")
        if int(params.get("dim", 0)) != temb_dim:
            raise ManifestError(f"layer {lid!r}: dim must equal the manifest time_embed_dim")
        if temb_dim < 4 or temb_dim % 2:
            raise ManifestError(f"layer {lid!r}: time_embed_dim must be even and >= 4")
        return ("vector", int(params["hidden"]))
    if kind == "residual_block":
        cin = int(params["in_channels"])
        if need_image() != cin:
            raise ManifestError(f"layer {lid!r}: expects {cin} channels, gets {in_sigs[0][1]}")
        if in_sigs[1][0] != "vector":
            raise ManifestError(f"layer {lid!r}: second input must be a time embedding vector")
        return ("image", int(params["out_channels"]))
    raise ManifestError(f"layer {lid!r}: unknown kind {kind!r}")


def load_weight_manifest(path) -> EpsilonPredictor:
    """Parse, validate and bind a manifest; returns the callable predictor."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    blob_path = doc.get("blob")
    if blob_path is None:
        base = str(path)
        if base.endswith(MANIFEST_SUFFIX):
            blob_path = base[: -len(MANIFEST_SUFFIX)] + BLOB_SUFFIX
        else:
            blob_path = os.path.splitext(base)[0] + BLOB_SUFFIX
    elif not os.path.isabs(blob_path):
        blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), blob_path)
    try:
        blob_field = load_array(blob_path)
    except Exception as exc:
        raise ManifestError(f"cannot read weight blob: {exc}") from exc
    blob = blob_field.data.ravel()
    if blob.dtype != np.float32:
        raise ManifestError(f"weight blob must be float32, found {blob.dtype}")

    input_channels = int(doc.get("input_channels", 0))
    output_channels = int(doc.get("output_channels", 0))
    temb_dim = int(doc.get("time_embed_dim", 0))
    if input_channels < 1 or output_channels < 1:
        raise ManifestError("manifest must declare input_channels and output_channels")

    raw_layers = doc.get("layers")
    if not raw_layers:
        raise ManifestError("manifest has no layers")

    layers: list[_Layer] = []
    signature: dict[str, tuple] = {
        "input": ("image", input_channels),
        "time": ("time", temb_dim),
    }
    for entry in raw_layers:
        lid = entry.get("id")
        kind = entry.get("kind")
        if not lid or lid in signature:
            raise ManifestError(f"layer id {lid!r} is missing or duplicated")
        if kind not in LAYER_KINDS:
            raise ManifestError(f"layer {lid!r}: unknown kind {kind!r}")
        inputs = entry.get("inputs", [])
        if kind == "skip_concat":
            if len(inputs) < 2:
                raise ManifestError(f"layer {lid!r}: skip_concat needs at least two inputs")
        elif len(inputs) != (2 if kind == "residual_block" else 1):
            raise ManifestError(f"layer {lid!r}: wrong input arity")
        for ref in inputs:
            if ref not in signature:
                raise ManifestError(f"layer {lid!r}: input {ref!r} is undefined (or later)")
        params = entry.get("params", {})

        if kind == "residual_block":
            if signature[inputs[1]][0] != "vector":
                raise ManifestError(
                    f"layer {lid!r}: second input must be a time embedding vector"
                )
            shapes = _residual_weight_shapes(params, signature[inputs[1]][1])
        elif kind in _WEIGHT_SPECS:
            shapes = {
                name: _shape_of(tpl, params, temb_dim)
                for name, tpl in _WEIGHT_SPECS[kind].items()
            }
        else:
            shapes = {}
        declared = entry.get("weights", {})
        missing = set(shapes) - set(declared)
        if missing:
            raise ManifestError(f"layer {lid!r}: missing weights {sorted(missing)}")
        bound = {
            name: _take(blob, lid, name, declared[name], shapes.get(name))
            for name in declared
        }

        layer = _Layer(lid, kind, params, list(inputs), bound)
        signature[lid] = _infer_signature(layer, [signature[r] for r in inputs], temb_dim)
        layers.append(layer)

    last = layers[-1]
    if signature[last.id] != ("image", output_channels):
        raise ManifestError(
            f"layer {last.id!r}: final output is {signature[last.id]},"
            f" manifest declares image with {output_channels} channels"
        )
    return EpsilonPredictor(layers, input_channels, output_channels, temb_dim)


def save_weight_manifest(path, layers: list[dict], input_channels: int = 16,
                         output_channels: int = 16, time_embed_dim: int = 0) -> None:
    """Write the JSON + blob pair; layer weights are given as ndarrays."""
    base = str(path)
    if base.endswith(MANIFEST_SUFFIX):
        base = base[: -len(MANIFEST_SUFFIX)]
    chunks: list[np.ndarray] = []
    offset = 0
    entries = []
    for layer in layers:
        weights_meta = {}
        for name, arr in layer.get("weights", {}).items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            weights_meta[name] = {
                "offset": offset,
                "count": int(arr.size),
                "shape": list(arr.shape),
            }
            chunks.append(arr.ravel())
            offset += arr.size
        entries.append(
            {
                "id": layer["id"],
                "kind": layer["kind"],
                "params": layer.get("params", {}),
                "inputs": layer.get("inputs", ["input"]),
                "weights": weights_meta,
            }
        )
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    save_array(blob.astype(np.float32), base + BLOB_SUFFIX, labels=["weights"])
    doc = {
        "layers": entries,
        "input_channels": input_channels,
        "output_channels": output_channels,
        "time_embed_dim": time_embed_dim,
    }
    with open(base + MANIFEST_SUFFIX, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
