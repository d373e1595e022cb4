"""Command-line entry points.

    maskrefine refine --root DIR [--config FILE] [--set k=v] [--workers N]
    maskrefine sweep  --root DIR --steps 100,200,400 [...]
    maskrefine diag   --root DIR --sample ID [--points 15] [...]
    maskrefine eval   --pred DIR --gt DIR --classes N [--json FILE]
    maskrefine demo   --root DIR

Exit code 0 on full success, 2 when any sample failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import mean_iou
from .pipeline import DatasetLayout, RunConfig, dump_diagnostics, run_refinement, \
    timestep_sweep
from .toydata import make_toy_dataset
from .types import ClassIndexMask
from .vocpng import read_indexed_png


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_file(args.config, args.set or [])
    else:
        cfg = RunConfig.from_pairs(
            dict(item.split("=", 1) for item in (args.set or []))
        )
    if getattr(args, "workers", None):
        cfg = cfg.with_overrides(workers=args.workers)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="maskrefine",
        description="Refine coarse segmentation masks by comparing each image "
                    "with its mask-conditioned one-step reconstruction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_refine = sub.add_parser("refine", help="refine a dataset's coarse masks")
    _add_common(p_refine)
    p_refine.add_argument("--workers", type=int, help="worker thread count")

    p_sweep = sub.add_parser("sweep", help="rerun refinement over timesteps")
    _add_common(p_sweep)
    p_sweep.add_argument("--steps", required=True,
                         help="comma-separated noising timesteps")

    p_diag = sub.add_parser("diag", help="dump correspondence diagnostics")
    _add_common(p_diag)
    p_diag.add_argument("--sample", required=True)
    p_diag.add_argument("--points", type=int, default=15,
                        help="number of correspondence arrows")

    p_eval = sub.add_parser("eval", help="score predicted masks against ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--classes", type=int, required=True,
                        help="class count including background")
    p_eval.add_argument("--json", help="also write the report as JSON")

    p_demo = sub.add_parser("demo", help="write a small synthetic dataset")
    p_demo.add_argument("--root", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "refine":
        cfg = _load_config(args)
        result = run_refinement(DatasetLayout.open(args.root), cfg)
        _print_run(result)
        return 0 if result.ok else 2

    if args.command == "sweep":
        cfg = _load_config(args)
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
        rows = timestep_sweep(DatasetLayout.open(args.root), cfg, steps)
        for row in rows:
            print(f"t={row['t_s']:>4}  initial={_fmt(row['initial_miou'])}  "
                  f"refined={_fmt(row['refined_miou'])}  failures={row['failures']}")
        return 0 if all(r["failures"] == 0 for r in rows) else 2

    if args.command == "diag":
        cfg = _load_config(args)
        out = dump_diagnostics(DatasetLayout.open(args.root), cfg, args.sample,
                               n_points=args.points)
        print(f"diagnostics written to {out}")
        return 0

    if args.command == "eval":
        return _eval(args)

    if args.command == "demo":
        root = make_toy_dataset(args.root)
        print(f"toy dataset written to {root}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds, gts = [], []
    for pred_path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / pred_path.name
        if not gt_path.is_file():
            print(f"warning: no ground truth for {pred_path.name}", file=sys.stderr)
            continue
        preds.append(ClassIndexMask(read_indexed_png(pred_path)))
        gts.append(ClassIndexMask(read_indexed_png(gt_path)))
    if not preds:
        print("no mask pairs found", file=sys.stderr)
        return 2
    report = mean_iou(preds, gts, args.classes)
    print(report.format_table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2,
                                              sort_keys=True))
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _print_run(result) -> None:
    for sample_id, error in result.failures:
        print(f"FAILED {sample_id}: {error}", file=sys.stderr)
    if result.initial_report and result.refined_report:
        print(f"initial mIoU: {result.initial_report.mean_iou:.4f}")
        print(f"refined mIoU: {result.refined_report.mean_iou:.4f}")
    if result.gain_report:
        print(result.gain_report.format_table())
    ok = len(result.outcomes) - len(result.failures)
    print(f"{ok}/{len(result.outcomes)} samples refined")


if __name__ == "__main__":
    sys.exit(main())
