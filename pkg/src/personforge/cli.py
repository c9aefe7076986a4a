"""`forge` command line: pipeline runs and the auxiliary procedures.

Subcommands:
    forge run            staged pipeline from a JSON config (flags override keys)
    forge train-refiner  train the linear crop classifier
    forge noise          translate a fraction of a dataset's boxes
    forge eval           DET curve + log-average miss rate for detections vs. gt
    forge audit serve    HTTP API (and optional static UI) for labeling sessions
    forge audit report   print the class breakdown of a session file
    forge stats          recompute and print an emitted dataset's stats

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import audit as audit_mod
from . import emit
from .evaluation import (
    DEFAULT_IOU_THRESH,
    DEFAULT_MIN_HEIGHT,
    compute_det_curve,
    load_eval_boxes,
    write_curve_csv,
    write_curve_summary,
)
from .noiselab import DEFAULT_MAX_TRIES, NoiseSpec, inject_noise, write_noise_log
from .pipeline import ConfigError, StageFailure, load_config, run_pipeline
from .refine import (
    DEFAULT_EPOCHS,
    DEFAULT_LAMBDA,
    DEFAULT_SEED,
    builtin_features,
    generate_negative_crops,
    load_feature_file,
    save_model,
    train_svm,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    overrides = {}
    for key in (
        "manifest", "cities", "detections", "model", "images_root",
        "output", "stats_output", "report_output",
    ):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = Path(value)
    for key in (
        "manifest_format", "feature_source", "min_city_count",
        "min_separation_km", "score_threshold", "workers", "seed",
    ):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    result = run_pipeline(cfg)
    for stage, entry in result.report.items():
        line = f"{stage}: in={entry.n_in} out={entry.n_out} dropped={entry.dropped}"
        print(line)
        for warning in entry.warnings:
            print(f"  warning: {warning}")
    print(f"dataset: {cfg.output}")
    return EXIT_OK


def _cmd_train_refiner(args: argparse.Namespace) -> int:
    from_files = args.positives is not None or args.negatives is not None
    from_dataset = args.dataset is not None
    if from_files == from_dataset:
        raise ConfigError(
            "train-refiner",
            "pass either --positives/--negatives feature files or --dataset",
        )
    if from_files:
        if args.positives is None or args.negatives is None:
            raise ConfigError("train-refiner", "--positives and --negatives go together")
        pos = list(load_feature_file(args.positives).values())
        neg = list(load_feature_file(args.negatives).values())
    else:
        from .geometry import crop_region
        from .pipeline import _PixelLoader

        boxes, images = emit.load_dataset(args.dataset)
        loader = _PixelLoader(images, Path(args.images_root) if args.images_root else None)
        pos = []
        last_id, pixels = None, None
        for b in boxes:
            if b.image_id != last_id:
                pixels = loader(b.image_id)
                last_id = b.image_id
            pos.append(builtin_features(crop_region(pixels, b.box)))
        boxes_by_image: dict[str, list] = {}
        for b in boxes:
            boxes_by_image.setdefault(b.image_id, []).append(b.box)
        n_neg = args.n_negatives if args.n_negatives is not None else len(pos)
        crops = generate_negative_crops(
            sorted(images.values(), key=lambda r: r.image_id),
            boxes_by_image,
            n_neg,
            seed=args.seed,
        )
        neg = [builtin_features(crop_region(loader(image_id), box)) for image_id, box in crops]
    model = train_svm(pos, neg, lam=args.lam, epochs=args.epochs, seed=args.seed)
    save_model(model, args.out)
    print(f"trained on {len(pos)} positives / {len(neg)} negatives; model: {args.out}")
    return EXIT_OK


def _cmd_noise(args: argparse.Namespace) -> int:
    boxes, images = emit.load_dataset(args.in_path)
    spec = NoiseSpec(rate=args.rate, seed=args.seed, max_tries=args.max_tries)
    noised, log = inject_noise(boxes, images, spec)
    emit.emit_dataset(noised, images, args.out)
    if args.log is not None:
        write_noise_log(args.log, log)
    moved = sum(1 for e in log if e.new is not None)
    failed = len(log) - moved
    print(f"moved {moved} of {len(boxes)} boxes ({failed} placement failures): {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    gts = load_eval_boxes(args.gt, kind="gt")
    dets = load_eval_boxes(args.det, kind="det")
    curve = compute_det_curve(
        dets,
        gts,
        iou_thresh=args.iou_thresh,
        min_height=args.min_height,
        n_images=args.n_images,
    )
    if args.curve_out is not None:
        write_curve_csv(curve, args.curve_out)
    if args.summary_out is not None:
        write_curve_summary(curve, args.summary_out)
    print(
        json.dumps(
            {
                "lamr_percent": curve.lamr_percent,
                "n_images": curve.n_images,
                "n_gt": curve.n_gt,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_audit_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(
        args.dataset,
        sessions_dir=args.sessions_dir,
        images_root=args.images_root,
        ui_dir=args.ui_dir,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _cmd_audit_report(args: argparse.Namespace) -> int:
    session = audit_mod.load_session(args.session_file)
    report = audit_mod.audit_report(session)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    boxes, images = emit.load_dataset(args.dataset)
    stats = emit.dataset_stats(boxes, images)
    print(json.dumps(stats.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Weakly supervised person-dataset toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the staged pipeline from a JSON config")
    run.add_argument("--config", required=True, help="pipeline config JSON")
    run.add_argument("--manifest", help="override: image manifest path")
    run.add_argument("--manifest-format", dest="manifest_format", choices=("jsonl", "csv"))
    run.add_argument("--cities", help="override: city table JSON")
    run.add_argument("--min-city-count", dest="min_city_count", type=int)
    run.add_argument("--min-separation-km", dest="min_separation_km", type=float)
    run.add_argument("--detections", help="override: detector output JSONL")
    run.add_argument("--score-threshold", dest="score_threshold", type=float)
    run.add_argument("--feature-source", dest="feature_source",
                     help="'builtin' or a feature JSONL path")
    run.add_argument("--model", help="override: refiner model JSON")
    run.add_argument("--images-root", dest="images_root", help="base dir for image paths")
    run.add_argument("--output", help="override: dataset output path")
    run.add_argument("--stats-output", dest="stats_output")
    run.add_argument("--report-output", dest="report_output")
    run.add_argument("--workers", type=int, help="parallel refinement workers")
    run.add_argument("--seed", type=int)
    run.set_defaults(handler=_cmd_run)

    train = sub.add_parser("train-refiner", help="train the linear crop classifier")
    train.add_argument("--positives", help="feature JSONL of person crops")
    train.add_argument("--negatives", help="feature JSONL of background crops")
    train.add_argument("--dataset", help="emitted dataset JSON (trains on its crops)")
    train.add_argument("--images-root", dest="images_root")
    train.add_argument("--n-negatives", dest="n_negatives", type=int,
                       help="background crops to sample (default: one per positive)")
    train.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    train.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    train.add_argument("--seed", type=int, default=DEFAULT_SEED)
    train.add_argument("--out", required=True, help="model JSON output path")
    train.set_defaults(handler=_cmd_train_refiner)

    noise = sub.add_parser("noise", help="translate a fraction of dataset boxes")
    noise.add_argument("--rate", type=float, required=True, help="fraction in [0, 1]")
    noise.add_argument("--seed", type=int, default=0)
    noise.add_argument("--max-tries", dest="max_tries", type=int, default=DEFAULT_MAX_TRIES)
    noise.add_argument("--in", dest="in_path", required=True, help="input dataset JSON")
    noise.add_argument("--out", required=True, help="output dataset JSON")
    noise.add_argument("--log", help="write the relocation log JSONL here")
    noise.set_defaults(handler=_cmd_noise)

    ev = sub.add_parser("eval", help="DET curve and log-average miss rate")
    ev.add_argument("--gt", required=True, help="ground-truth JSONL")
    ev.add_argument("--det", required=True, help="detection JSONL")
    ev.add_argument("--iou-thresh", dest="iou_thresh", type=float, default=DEFAULT_IOU_THRESH)
    ev.add_argument("--min-height", dest="min_height", type=float, default=DEFAULT_MIN_HEIGHT)
    ev.add_argument("--n-images", dest="n_images", type=int,
                    help="override the image count used for FPPI")
    ev.add_argument("--curve-out", dest="curve_out", help="write fppi,miss_rate CSV here")
    ev.add_argument("--summary-out", dest="summary_out", help="write summary JSON here")
    ev.set_defaults(handler=_cmd_eval)

    audit = sub.add_parser("audit", help="human quality-audit sessions")
    audit_sub = audit.add_subparsers(dest="audit_command", required=True)

    serve = audit_sub.add_parser("serve", help="serve the audit HTTP API")
    serve.add_argument("--dataset", required=True, help="emitted dataset JSON")
    serve.add_argument("--sessions-dir", dest="sessions_dir", required=True)
    serve.add_argument("--images-root", dest="images_root")
    serve.add_argument("--ui-dir", dest="ui_dir", help="static files served at /")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8700)
    serve.set_defaults(handler=_cmd_audit_serve)

    report = audit_sub.add_parser("report", help="print a session's class breakdown")
    report.add_argument("session_file", help="session JSON written by the server")
    report.set_defaults(handler=_cmd_audit_report)

    stats = sub.add_parser("stats", help="recompute stats for an emitted dataset")
    stats.add_argument("--dataset", required=True, help="emitted dataset JSON")
    stats.set_defaults(handler=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # operational failure in a single-stage command
        print(f"forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
