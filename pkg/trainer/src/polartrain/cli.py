"""Command-line front end for training and evaluating the noise predictor."""

from __future__ import annotations

import argparse
import json
import sys

from .evaluate import evaluate, run_toolkit
from .training import TrainConfig, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polartrain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="emit a phantom dataset via the toolkit CLI")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smooth", action="store_true")

    p = sub.add_parser("train", help="fit the predictor and export the manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=128)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--t-cap", type=int, default=1000,
                   help="upper bound for sampled time-points")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="score the model vs the blur baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-infer", type=int, default=1)
    p.add_argument("--limit", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "make-data":
        flags = ["phantom", "--out-dir", args.out_dir, "--count", args.count,
                 "--height", args.height, "--width", args.width, "--sigma", args.sigma,
                 "--seed", args.seed, "--emit-calibration"]
        if args.smooth:
            flags.append("--smooth")
        run_toolkit(*flags)
        return 0
    if args.command == "train":
        config = TrainConfig(
            patch_size=args.patch,
            batch_size=args.batch,
            learning_rate=args.lr,
            num_steps=args.steps,
            max_timestep_sampled=args.t_cap,
            base_channels=args.base_channels,
            seed=args.seed,
        )
        log = train(args.manifest, args.out, config)
        print(json.dumps({"manifest": log["manifest"], "final_l1": log["losses"][-1]}))
        return 0
    if args.command == "evaluate":
        result = evaluate(args.manifest, args.model, out_json=args.out,
                          t_infer=args.t_infer, limit=args.limit)
        print(json.dumps(result["summary"], indent=1))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
