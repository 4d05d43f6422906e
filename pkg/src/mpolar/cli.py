"""Command-line entry point: derivation, denoising, benchmarks, rendering,
phantom generation and quality reports.

Exit codes: 0 success, 2 usage/format errors, 3 calibration errors,
4 model-manifest validation errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import backend, bench
from .containers import (
    IntensityTensor,
    load_array,
    load_intensity,
    mask_reflections,
    compute_roi,
    rescale_to_signed_unit,
    save_array,
    save_intensity,
)
from .decompose import derive_all, lu_chipman, param_maps_from_decomposition, save_param_maps
from .diffusion import build_schedule, denoise_single_pass
from .errors import (
    CalibrationError,
    ManifestError,
    MetricError,
    MpolarError,
    ParameterError,
)
from .filters import CLASSIC_FILTERS, multishot_average
from .metrics import quality_report
from .mueller import compute_mueller, load_calibration, normalize_mueller
from .network import load_weight_manifest
from .phantom import (
    default_calibration,
    default_phantom_spec,
    emit_dataset,
    smooth_phantom_spec,
)
from .render import write_pgm16, write_ppm_azimuth

REFLECTION_THRESHOLD = 0.98


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpolar", description="Mueller polarimetric image processing toolkit"
    )
    parser.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive", help="derive parameter maps from an intensity container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--cal-a", required=True, help="analyser calibration container")
    p.add_argument("--cal-g", required=True, help="generator calibration container")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--stem", default="", help="prefix for output map files")

    p = sub.add_parser("denoise", help="denoise an intensity container")
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="input container (repeat for --filter avg)")
    p.add_argument("--model", help="weight manifest (.pddn.json)")
    p.add_argument("--filter", dest="classic", choices=(*CLASSIC_FILTERS, "avg"))
    p.add_argument("--out", required=True)
    p.add_argument("--t-infer", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reflection-threshold", type=float, default=REFLECTION_THRESHOLD)
    p.add_argument("--no-reflection-mask", action="store_true")

    p = sub.add_parser("bench", help="time the denoise and derive stages")
    p.add_argument("--shape", choices=("patch", "full"), default="patch")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--warmups", type=int, default=3)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--model", default=None, help="weight manifest; identity fixture if unset")
    p.add_argument("--compare", action="store_true",
                   help="bench both backends when the compiled one is built")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSON path")

    p = sub.add_parser("render", help="render a 2D map container to PGM/PPM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("gray", "azimuth"), default="gray")
    p.add_argument("--min", type=float, default=None)
    p.add_argument("--max", type=float, default=None)
    p.add_argument("--mask", default=None, help="validity mask container (azimuth kind)")

    p = sub.add_parser("phantom", help="emit a synthetic paired dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--kind", choices=("gaussian", "heavy-tailed"), default="gaussian")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smooth", action="store_true",
                   help="resolvable flow azimuth in all foreground regions")
    p.add_argument("--emit-calibration", action="store_true",
                   help="also write the synthetic calibration containers")

    p = sub.add_parser("report", help="score candidate intensities against references")
    p.add_argument("--manifest", required=True, help="phantom dataset manifest.json")
    p.add_argument("--denoised-dir", default=None,
                   help="directory of denoised containers named like the lq files")
    p.add_argument("--tag", default="lq", help="modality tag for the records")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--roi-threshold", type=float, default=0.05)
    return parser


def cmd_derive(args) -> int:
    cal = load_calibration(args.cal_a, args.cal_g)
    tensor = load_intensity(args.input)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    tensor = IntensityTensor(tensor.values.astype(dtype))
    maps = derive_all(tensor, cal, tile=args.tile, threads=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = save_param_maps(maps, args.out_dir, stem=args.stem)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return 0


def cmd_denoise(args) -> int:
    if (args.model is None) == (args.classic is None):
        raise ParameterError("select exactly one of --model or --filter")
    tensors = [load_intensity(p) for p in args.inputs]
    if args.classic != "avg" and len(tensors) != 1:
        raise ParameterError("this method takes exactly one --in container")
    base = tensors[0]
    mask = None
    if not args.no_reflection_mask:
        mask = mask_reflections(base, args.reflection_threshold)

    if args.classic == "avg":
        out = multishot_average(tensors)
        if mask is not None:
            out = IntensityTensor(
                np.where(mask[..., None], out.values, base.values), signed=False
            )
    elif args.classic is not None:
        out = CLASSIC_FILTERS[args.classic](base)
        if mask is not None:
            out = IntensityTensor(
                np.where(mask[..., None], out.values, base.values), signed=False
            )
    else:
        predictor = load_weight_manifest(args.model)
        sched = build_schedule()
        signed = rescale_to_signed_unit(base, 0.0, 1.0)
        out = denoise_single_pass(
            signed, predictor, sched, t_infer=args.t_infer, mask=mask, seed=args.seed
        )
    save_intensity(out, args.out)
    return 0


def _bench_shape(name: str):
    return (128, 128, 16) if name == "patch" else (512, 384, 16)


def _bench_one_backend(args, records: list) -> None:
    shape = _bench_shape(args.shape)
    rng = np.random.default_rng(args.seed)
    tensor = IntensityTensor((0.2 + 0.6 * rng.random(shape)).astype(np.float32))
    cal = default_calibration()
    model_path = args.model
    if model_path is None:
        model_path = os.path.join(
            os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
            "fixtures",
            "identity.pddn.json",
        )
    predictor = load_weight_manifest(model_path)
    sched = build_schedule()
    signed = rescale_to_signed_unit(tensor, 0.0, 1.0)
    mask = mask_reflections(tensor)

    def denoise_stage():
        denoise_single_pass(signed, predictor, sched, mask=mask, seed=args.seed)

    def derive_stage():
        derive_all(tensor, cal, tile=args.tile, threads=args.threads)

    def total_stage():
        out = denoise_single_pass(signed, predictor, sched, mask=mask, seed=args.seed)
        derive_all(out, cal, tile=args.tile, threads=args.threads)

    label = backend.active_backend()
    for stage, fn in (("denoising", denoise_stage), ("derivation", derive_stage),
                      ("total", total_stage)):
        result = bench.time_stage(stage, fn, shape, args.repeats, args.warmups)
        record = result.to_record()
        record["backend"] = label
        record["threads"] = backend.resolve_threads(args.threads)
        records.append(record)
        print(
            f"[{label}] {stage:10s} {shape}: "
            f"{result.mean_ms:8.2f} ms +- {result.sd_ms:.2f}",
            file=sys.stderr,
        )


def cmd_bench(args) -> int:
    records: list = []
    if args.compare and backend.HAVE_COMPILED:
        for choice in ("compiled", "python"):
            backend.set_backend(choice)
            try:
                _bench_one_backend(args, records)
            finally:
                backend.set_backend("auto")
    else:
        _bench_one_backend(args, records)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
    return 0


def cmd_render(args) -> int:
    field = load_array(args.input)
    if field.data.ndim != 2:
        raise ParameterError(f"render needs a 2D map, got shape {field.shape}")
    if args.kind == "gray":
        vmin = args.min if args.min is not None else float(field.data.min())
        vmax = args.max if args.max is not None else float(field.data.max())
        write_pgm16(args.out, field.data, vmin, vmax)
    else:
        valid = None
        if args.mask:
            valid = load_array(args.mask).data > 0.5
        write_ppm_azimuth(args.out, field.data, valid)
    return 0


def cmd_phantom(args) -> int:
    builder = smooth_phantom_spec if args.smooth else default_phantom_spec
    spec = builder(args.height, args.width, args.sigma, args.kind)
    manifest = emit_dataset(spec, args.count, args.out_dir, seed=args.seed)
    if args.emit_calibration:
        cal = default_calibration()
        save_array(cal.analyser, os.path.join(args.out_dir, "cal_a.mpac"),
                   labels=["analyser"])
        save_array(cal.generator, os.path.join(args.out_dir, "cal_g.mpac"),
                   labels=["generator"])
    print(manifest)
    return 0


def _instance_quantities(tensor: IntensityTensor, cal, tile, threads) -> dict:
    mueller = normalize_mueller(compute_mueller(tensor, cal, tile=tile, threads=threads))
    maps = param_maps_from_decomposition(lu_chipman(mueller, threads=threads))
    h, w = tensor.values.shape[:2]
    return {
        "I": tensor.values,
        "M": mueller.values.reshape(h, w, 16),
        "D": maps.diattenuation,
        "Delta": maps.depolarization,
        "R": maps.retardance_deg,
        "phi": maps.azimuth_deg,
        "_valid": maps.valid,
    }


def cmd_report(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    cal = default_calibration()
    pairs = []
    mask_total = None
    for entry in manifest["pairs"]:
        hq = load_intensity(os.path.join(base_dir, entry["hq_path"]))
        lq_name = entry["lq_path"]
        if args.denoised_dir:
            candidate_path = os.path.join(args.denoised_dir, os.path.basename(lq_name))
        else:
            candidate_path = os.path.join(base_dir, lq_name)
        candidate = load_intensity(candidate_path)
        if candidate.values.shape != hq.values.shape:
            raise MetricError(
                f"candidate and reference shapes differ: "
                f"{candidate.values.shape} vs {hq.values.shape}"
            )
        cand_q = _instance_quantities(candidate, cal, args.tile, args.threads)
        ref_q = _instance_quantities(hq, cal, args.tile, args.threads)
        mask = (
            compute_roi(hq, args.roi_threshold)
            & mask_reflections(hq)
            & cand_q.pop("_valid")
            & ref_q.pop("_valid")
        )
        mask_total = mask if mask_total is None else (mask_total & mask)
        pairs.append((cand_q, ref_q))
    report = quality_report(pairs, mask_total, modality=args.tag)
    if args.format in ("csv", "both"):
        report.write_csv(args.out_prefix + ".csv")
    if args.format in ("json", "both"):
        report.write_json(args.out_prefix + ".json")
    return 0


_HANDLERS = {
    "derive": cmd_derive,
    "denoise": cmd_denoise,
    "bench": cmd_bench,
    "render": cmd_render,
    "phantom": cmd_phantom,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        backend.set_backend(args.backend)
        try:
            return _HANDLERS[args.command](args)
        finally:
            backend.set_backend("auto")
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return 3
    except ManifestError as exc:
        print(f"model validation error: {exc}", file=sys.stderr)
        return 4
    except (MpolarError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
