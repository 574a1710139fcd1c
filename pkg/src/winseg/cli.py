"""Command-line front end.

Subcommands:
    grid           print window count and origins for a tiling spec
    segment        run the attention pipeline over a feature bundle
    eval           mean IoU (and boundary error rate, given a grid) of a
                   predicted label map against ground truth
    gen-synthetic  write a synthetic feature bundle with planted labels

Exit codes: 0 success, 1 computation error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .attention import NormConfig, ProxyConfig
from .metrics import ber, iou_table, miou, miou_report
from .segmenter import (
    BundleError,
    SegmenterConfig,
    load_bundle,
    read_label_map,
    segment,
    write_label_map,
)
from .synthetic import SyntheticSpec, generate_bundle
from .tensor_io import TensorFormatError
from .window_grid import GridSpec, GridSpecError, build_window_grid


def _cmd_grid(args) -> int:
    spec = GridSpec(args.height, args.width, args.crop, args.stride, args.patch)
    grid = build_window_grid(spec)
    if args.json:
        print(json.dumps({"L": grid.num_windows, "origins": [list(o) for o in grid.windows]},
                         separators=(",", ":")))
    else:
        print(f"L={grid.num_windows}")
        for y0, x0 in grid.windows:
            print(f"{y0} {x0}")
    return 0


def _cmd_segment(args) -> int:
    bundle = load_bundle(args.bundle)
    norm = NormConfig(
        mode=args.norm,
        beta=args.beta,
        gamma=args.gamma,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
    )
    proxy = ProxyConfig(rho=args.rho, steps=args.steps)
    cfg = SegmenterConfig(
        proxy=proxy,
        norm=norm,
        smoothing=args.smoothing,
        background_threshold=args.bg_threshold,
        logit_scale=args.logit_scale,
        collapse=args.collapse,
        threads=args.threads,
    )
    result = segment(bundle, cfg)
    write_label_map(result.label_map, args.out)
    if args.logits:
        from . import tensor_io

        tensor_io.write_tensor(result.fused_logits, args.logits)
    s = result.stats
    print(f"windows  {s['windows']}")
    print(f"tokens   {s['tokens_per_window']}")
    print(f"seconds  {s['seconds']:.3f}")
    print(f"peak_mb  {s['peak_bytes'] / 1e6:.2f}")
    print(f"wrote    {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred = read_label_map(args.pred, args.ignore)
    gt = read_label_map(args.gt, args.ignore)
    per_class, mean = miou(pred, gt, args.classes)
    print(iou_table(per_class, mean))
    print(f"mIoU {mean:.6f}")
    report = miou_report(per_class, mean)
    if args.grid:
        h, w, crop, stride = args.grid
        grid = build_window_grid(GridSpec(h, w, crop, stride, patch=1))
        b = ber(pred, gt, grid)
        print(f"BER {b.ber:.6f}")
        print(f"boundary_pairs same_gt={b.same_gt_pairs} disagree={b.disagreeing_pairs}")
        report["ber"] = b.to_dict()
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    return 0


def _cmd_gen_synthetic(args) -> int:
    layout = []
    if args.layout_json:
        with open(args.layout_json) as f:
            from .synthetic import Rect

            layout = [Rect(*row) for row in json.load(f)]
    spec = SyntheticSpec(
        image_h=args.height,
        image_w=args.width,
        crop=args.crop,
        stride=args.stride,
        patch=args.patch,
        num_classes=args.classes,
        spread=args.spread,
        seed=args.seed,
        layout=layout,
    )
    out = generate_bundle(spec, args.out)
    print(f"wrote    {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="winseg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", help="window count and origins for a tiling spec")
    g.add_argument("--height", type=int, required=True)
    g.add_argument("--width", type=int, required=True)
    g.add_argument("--crop", type=int, required=True)
    g.add_argument("--stride", type=int, required=True)
    g.add_argument("--patch", type=int, default=16)
    g.add_argument("--json", action="store_true")
    g.set_defaults(func=_cmd_grid)

    s = sub.add_parser("segment", help="segment a feature bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--logits", help="also write fused logits as .glat")
    s.add_argument("--norm", choices=("fixed", "dynamic"), default="dynamic")
    s.add_argument("--rho", type=float, default=0.6)
    s.add_argument("--steps", type=int, default=2)
    s.add_argument("--lambda1", type=float, default=0.3)
    s.add_argument("--lambda2", type=float, default=30.0)
    s.add_argument("--beta", type=float, default=1.2)
    s.add_argument("--gamma", type=float, default=3.0)
    s.add_argument("--bg-threshold", type=float, default=None)
    s.add_argument("--smoothing", action="store_true")
    s.add_argument("--logit-scale", type=float, default=100.0)
    s.add_argument("--collapse", choices=("max", "mean"), default="max")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=_cmd_segment)

    e = sub.add_parser("eval", help="score a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--classes", type=int, required=True)
    e.add_argument("--grid", type=int, nargs=4, metavar=("H", "W", "CROP", "STRIDE"),
                   help="image and tiling geometry; enables the boundary error rate")
    e.add_argument("--ignore", type=int, default=255)
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=_cmd_eval)

    n = sub.add_parser("gen-synthetic", help="generate a synthetic bundle")
    n.add_argument("--out", required=True)
    n.add_argument("--height", type=int, default=448)
    n.add_argument("--width", type=int, default=448)
    n.add_argument("--crop", type=int, default=224)
    n.add_argument("--stride", type=int, default=112)
    n.add_argument("--patch", type=int, default=16)
    n.add_argument("--classes", type=int, default=4)
    n.add_argument("--spread", type=float, default=0.0)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--layout-json", help="JSON list of [y0, x0, y1, x1, class] rows")
    n.set_defaults(func=_cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, BundleError, TensorFormatError, GridSpecError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
