"""Command-line interface: train, fit, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Flags override values from an optional flat key=value config file. Timing
and timestamp lines in the output are prefixed with '#' so the remaining
machine-readable tables are byte-stable across reruns with a fixed seed.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cascade, dataset, evaluation, model_io
from .errors import (
    DegenerateShape,
    EmptyDataset,
    EmptyErrors,
    FormatError,
    InsufficientData,
    InvalidBBox,
    ParseError,
    PdmCascadeError,
    RankDeficient,
    SingularHessian,
    SingularSystem,
    ZeroIOD,
)

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

_DATA_ERRORS = (EmptyDataset, ParseError, FormatError, InvalidBBox, InsufficientData, EmptyErrors)
_NUMERIC_ERRORS = (SingularHessian, SingularSystem, RankDeficient, DegenerateShape, ZeroIOD)


def _read_config(path: str | None) -> dict:
    """Flat ``key = value`` file; '#' starts a comment."""
    if path is None:
        return {}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _setting(args, config, key, default, cast=str):
    """Effective value of one setting: flag beats config beats default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return default


def _build_schedule(args, config) -> cascade.StageSchedule:
    name = _setting(args, config, "stages", "hybrid7")
    use_q = not _setting(args, config, "no_q_features", False, lambda v: v.lower() == "true")
    constrained = not _setting(args, config, "no_constraint", False, lambda v: v.lower() == "true")
    if not constrained:
        use_q = False
    gn = cascade.GaussNewtonSettings(
        strength=_setting(args, config, "strength", 1.0, float),
        iterations=_setting(args, config, "gn_iterations", 1, int),
        prior_center=_setting(args, config, "prior_center", "zero"),
    )
    return cascade.named_schedule(name, use_q_features=use_q, constrained=constrained, gn=gn)


def cmd_train(args) -> int:
    config = _read_config(args.config)
    schedule = _build_schedule(args, config)
    samples = dataset.load_dataset(args.data, pattern=_setting(args, config, "pattern", "*.png"))
    start = time.perf_counter()
    model = cascade.train_cascade(
        samples,
        schedule,
        aug_count=_setting(args, config, "aug", 10, int),
        seed=_setting(args, config, "seed", 0, int),
        variance_fraction=_setting(args, config, "variance_fraction", 0.99, float),
    )
    model_io.save_model(model, args.out)
    print("stage\tmean_train_error")
    for i, err in enumerate(model.training_curve):
        print(f"{i}\t{err:.8f}")
    print(f"# wall_time_s {time.perf_counter() - start:.2f}")
    print(f"# model {args.out}")
    return 0


def _parse_bbox(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ValueError("bbox must be x,y,w,h")
    return tuple(parts)


def _annotate(image, points, path):
    from PIL import Image, ImageDraw

    canvas = Image.fromarray(np.clip(image.pixels, 0, 255).astype(np.uint8), mode="L").convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for x, y in points:
        draw.ellipse([x - 1.5, y - 1.5, x + 1.5, y + 1.5], fill=(255, 64, 64))
    canvas.save(path)


def cmd_fit(args) -> int:
    config = _read_config(args.config)
    model = model_io.load_model(args.model)
    margin = _setting(args, config, "margin", 0.05, float)

    def run_one(path_text: str):
        path = Path(path_text)
        image = dataset.load_image(path)
        if args.bbox is not None:
            bbox = _parse_bbox(args.bbox)
        else:
            pts_path = path.with_suffix(".pts")
            if not pts_path.exists():
                raise EmptyDataset(f"no --bbox given and no annotation at {pts_path}")
            bbox = dataset.bbox_of_shape(dataset.parse_pts(pts_path.read_bytes()), margin)
        result = cascade.fit(model, image, bbox, trace=args.trace)
        out_base = Path(args.out_dir or path.parent) / path.stem
        Path(f"{out_base}.fit.pts").write_text(dataset.write_pts(result.shape))
        if args.annotate:
            _annotate(image, result.shape, f"{out_base}.fit.png")
        if args.trace:
            for t, stage_shape in enumerate(result.per_stage_shapes):
                Path(f"{out_base}.stage{t}.pts").write_text(dataset.write_pts(stage_shape))
        return path.name

    threads = _setting(args, config, "threads", 1, int)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            names = list(pool.map(run_one, args.images))
    else:
        names = [run_one(p) for p in args.images]
    for name in names:
        print(f"fit\t{name}")
    return 0


def _check_ablation_flags(model, args) -> bool | None:
    """Resolve eval-time ablation flags against how the model was trained."""
    if args.no_q_features and model.schedule.use_q_features:
        raise SystemExitUsage(
            "--no-q-features needs a model trained without mode-coefficient "
            "features (feature widths differ); retrain with --no-q-features"
        )
    if args.no_constraint:
        if model.schedule.use_q_features:
            raise SystemExitUsage(
                "--no-constraint cannot run a model trained with mode-coefficient "
                "features (the projection maintains the pose they come from)"
            )
        return False
    return None


class SystemExitUsage(Exception):
    pass


def cmd_eval(args) -> int:
    config = _read_config(args.config)
    model = model_io.load_model(args.model)
    constrain = _check_ablation_flags(model, args)
    samples = dataset.load_dataset(args.data, pattern=_setting(args, config, "pattern", "*.png"))
    report = evaluation.evaluate_model(
        model,
        samples,
        left_eye_index=_setting(args, config, "left_eye", evaluation.LEFT_EYE_68, int),
        right_eye_index=_setting(args, config, "right_eye", evaluation.RIGHT_EYE_68, int),
        constrain=constrain,
        per_stage=args.per_stage,
    )
    print(evaluation.format_error_table(report))
    print()
    print(evaluation.format_ced_table(report))
    if report.per_stage_mean_errors is not None:
        print()
        print("stage\tmean_error_x100")
        for i, err in enumerate(report.per_stage_mean_errors):
            print(f"{i}\t{100.0 * err:.6f}")
    return 0


def cmd_bench(args) -> int:
    config = _read_config(args.config)
    model = model_io.load_model(args.model)
    samples = dataset.load_dataset(args.data, pattern=_setting(args, config, "pattern", "*.png"))
    report = evaluation.benchmark_fit(model, samples, warmup=args.warmup, reps=args.reps)
    print(evaluation.format_timing_summary(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdmcascade",
        description="Cascaded landmark alignment with a shape-model constraint.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--threads", type=int, default=None, help="worker threads for batch work (default 1)")

    p_train = sub.add_parser("train", help="train a cascade from an annotated image directory")
    p_train.add_argument("--data", required=True, help="directory of images with same-stem .pts files")
    p_train.add_argument("--out", required=True, help="output model file")
    p_train.add_argument("--stages", default=None, help="schedule name: hybrid7, forest4, hog3, ... (default hybrid7)")
    p_train.add_argument("--aug", type=int, default=None, help="initializations per sample (default 10)")
    p_train.add_argument("--variance-fraction", dest="variance_fraction", type=float, default=None,
                         help="retained PCA energy (default 0.99)")
    p_train.add_argument("--no-q-features", dest="no_q_features", action="store_const", const=True,
                         default=None, help="train without mode-coefficient features")
    p_train.add_argument("--no-constraint", dest="no_constraint", action="store_const", const=True,
                         default=None, help="train the pure regression cascade (implies --no-q-features)")
    shared(p_train)
    p_train.set_defaults(func=cmd_train)

    p_fit = sub.add_parser("fit", help="fit a trained model to images")
    p_fit.add_argument("--model", required=True)
    p_fit.add_argument("images", nargs="+", help="image files")
    p_fit.add_argument("--bbox", default=None, help="face box as x,y,w,h (default: from sidecar .pts)")
    p_fit.add_argument("--out-dir", default=None, help="output directory (default: next to each image)")
    p_fit.add_argument("--annotate", action="store_true", help="also write images with drawn landmarks")
    p_fit.add_argument("--trace", action="store_true", help="also write per-stage shapes")
    shared(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="evaluate a model on an annotated directory")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--no-constraint", dest="no_constraint", action="store_true",
                        help="disable the shape-model projection at fit time")
    p_eval.add_argument("--no-q-features", dest="no_q_features", action="store_true",
                        help="assert the model was trained without mode-coefficient features")
    p_eval.add_argument("--per-stage", dest="per_stage", action="store_true",
                        help="also report mean error after every stage")
    p_eval.add_argument("--left-eye", dest="left_eye", type=int, default=None)
    p_eval.add_argument("--right-eye", dest="right_eye", type=int, default=None)
    shared(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="measure fitting throughput")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--data", required=True)
    p_bench.add_argument("--warmup", type=int, default=3)
    p_bench.add_argument("--reps", type=int, default=10)
    shared(p_bench)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except SystemExitUsage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (ValueError, OSError, PdmCascadeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
