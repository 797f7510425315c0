"""Command-line surface.

Subcommands: generate, train, gridsearch, infer, render, eval. Exit codes:
0 success, 2 validation or configuration error (including malformed inputs),
3 I/O error (missing or unreadable/unwritable files), 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import numcore as nc
from .dataset import generate_dataset, load_dataset, read_ppm
from .errors import (CheckpointError, ConfigError, DatasetFormatError,
                     NumericAbortError, ValidationError)
from .infer import (DEFAULT_CONF_THRESHOLD, DEFAULT_MATCH_IOU,
                    DEFAULT_NMS_THRESHOLD, evaluate_model, infer_model)
from .model import load_checkpoint
from .render import render_bev
from .trainer import TrainConfig, grid_search, train


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mosaicbev",
        description="Camera-mosaic to bird's-eye-view vehicle detection.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--tile-size", type=int, default=64)
    g.add_argument("--min-vehicles", type=int, default=1)
    g.add_argument("--max-vehicles", type=int, default=4)

    t = sub.add_parser("train", help="train per a JSON config file")
    t.add_argument("--config", required=True)

    gs = sub.add_parser("gridsearch", help="learning-rate sweep")
    gs.add_argument("--config", required=True)
    gs.add_argument("--lrs", default="0.1,0.01,0.001",
                    help="comma-separated learning rates")

    i = sub.add_parser("infer", help="detections for one frame, CSV on stdout")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frame", required=True)
    i.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    i.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESHOLD)

    r = sub.add_parser("render", help="render detections to a BEV image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--frame", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--side-by-side", action="store_true",
                   help="add a ground-truth panel (frame must live in a dataset)")
    r.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    r.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESHOLD)

    e = sub.add_parser("eval", help="dataset metrics report (JSON + CSV + figure)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    e.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESHOLD)
    e.add_argument("--iou-min", type=float, default=DEFAULT_MATCH_IOU)
    return p


def _cmd_generate(args) -> int:
    generate_dataset(args.frames, args.seed, args.out, tile_size=args.tile_size,
                     min_vehicles=args.min_vehicles, max_vehicles=args.max_vehicles)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    res = train(cfg)
    last = res.runlog[-1]
    print(f"finished {last['step']} steps, final loss {last['total']:.6f}, "
          f"checkpoint {res.checkpoint_path}")
    return 0


def _cmd_gridsearch(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    try:
        lrs = [float(tok) for tok in args.lrs.split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --lrs value: {e}") from e
    result = grid_search(cfg, lrs)
    print("lr,final_loss,final_mean_iou,status")
    for row in result.rows:
        print(f"{row.lr:g},{row.final_loss:.9g},{row.final_mean_iou:.9g},{row.status}")
    print(f"best lr: {result.best_lr}")
    return 0


def _cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    dets = infer_model(model, read_ppm(args.frame), args.conf, args.nms)
    print("cx,cy,width,height,theta,confidence,scale,m,n")
    for d in dets:
        b = d.box
        print(f"{b.cx:.9g},{b.cy:.9g},{b.width:.9g},{b.height:.9g},{b.theta:.9g},"
              f"{d.confidence:.9g},{d.scale_index},{d.cell[0]},{d.cell[1]}")
    return 0


def _cmd_render(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    dets = infer_model(model, read_ppm(args.frame), args.conf, args.nms)
    gt = None
    if args.side_by_side:
        frame_path = Path(args.frame)
        label_path = frame_path.parent.parent / "labels" / (frame_path.stem + ".json")
        if not label_path.exists():
            raise ValidationError(
                f"--side-by-side needs a dataset label at {label_path}"
            )
        from .dataset import _parse_label, gt_raster
        gt = gt_raster(_parse_label(label_path))
    render_bev(dets, gt, args.out)
    print(f"wrote {args.out} ({len(dets)} detections)")
    return 0


def _cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.dataset)
    report = evaluate_model(model, ds, args.conf, args.nms, args.iou_min)
    report_path = Path(args.report)
    if report_path.parent and not report_path.parent.exists():
        report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    d = report.to_dict()
    cols = list(d)
    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        fh.write(",".join(str(d[c]) for c in cols) + "\n")
    try:
        from .plots import eval_figure
        eval_figure(report, report_path.with_suffix(".png"))
    except Exception:
        pass  # figures are best-effort reporting
    print(f"precision {report.precision:.3f} recall {report.recall:.3f} "
          f"mean IoU {report.mean_iou:.3f} "
          f"({report.n_matched}/{report.n_gt} matched, {report.n_pred} predictions)")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "gridsearch": _cmd_gridsearch,
    "infer": _cmd_infer,
    "render": _cmd_render,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        # The stdout reader (e.g. `... | head`) closed the pipe mid-stream;
        # for CSV-on-stdout commands that is a normal way to stop early.
        try:
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        except OSError:
            pass
        return 0
    except (ValidationError, ConfigError, DatasetFormatError,
            nc.ContractError, nc.DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, nc.SerializationError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except NumericAbortError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
