"""Export CLI.

    sdexport export --root DIR --out DIR/recorded --timestep 400 \
        --alpha 1.0 [--model mock|sd21] [--weights PATH] [--seed N]
"""

from __future__ import annotations

import argparse
import logging
import sys

from .adapters import MockAdapter, ModelLoadError, StableDiffusionAdapter
from .export import export_batch


def build_adapter(args):
    if args.model == "mock":
        return MockAdapter()
    if args.model == "sd21":
        return StableDiffusionAdapter(weights=args.weights, device=args.device,
                                      image_size=args.image_size)
    raise SystemExit(f"unknown model {args.model!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdexport",
        description="Export mask-injected one-step generations and features "
                    "for the refinement engine's recorded backends.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export a dataset")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--out", help="output run directory (default <root>/recorded)")
    p.add_argument("--timestep", type=int, default=400)
    p.add_argument("--alpha", type=float, default=1.0,
                   help="injection weight (multiplier on sqrt(d))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=("sd21", "mock"), default="sd21")
    p.add_argument("--weights", help="local pretrained weights path")
    p.add_argument("--device", default="cpu")
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--no-resume", action="store_true",
                   help="re-export even when a valid manifest exists")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        adapter = build_adapter(args)
    except ModelLoadError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    out = args.out or f"{args.root}/recorded"
    summary = export_batch(args.root, out, adapter, t_s=args.timestep,
                           alpha_inject=args.alpha, seed=args.seed,
                           resume=not args.no_resume)
    print(f"exported {len(summary['exported'])} sample(s), "
          f"skipped {len(summary['skipped'])}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
