"""Command-line entry point: `evkd <command> [options]`.

Exit codes: 0 success, 1 findings or failed self-check, 2 usage or input
error, 3 I/O error.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import pandas as pd
from skimage.io import imsave

from evkd.core import fmt4, get_threads, read_config
from evkd.dataset import (
    EVENTVOT_SPLITS,
    check_split_arithmetic,
    convert_released_layout,
    load_manifest,
    validate_dataset,
)
from evkd.errors import EvkdError
from evkd.events import (
    EVENTVOT_FRAMES,
    SensorGeometry,
    build_voxel_grid,
    frame_assignment,
    parse_event_stream,
    random_stream,
    read_event_file,
    render_event_image,
    stack_to_frames,
    write_event_file,
    write_event_stream,
)
from evkd.gradcheck import KD_TOLERANCE, kd_check
from evkd.inference import (
    DEFAULT_ASR_PARAMS,
    DEFAULT_TTT_PARAMS,
    asr_trace,
    track_video,
    ttt_schedule,
    write_ttt_log,
)
from evkd.metrics import aggregate, attribute_breakdown, evaluate_runs, write_curves, write_report, write_results
from evkd.toy import load_toy_video, make_toy_video, save_arrays, save_toy_video

logger = logging.getLogger("evkd")

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _emit(rows):
    for key, value in rows:
        if isinstance(value, (float, np.floating)):
            value = fmt4(value)
        print(f"{key},{value}")


def cmd_stack(args):
    stream = read_event_file(args.input, args.format)
    index = frame_assignment(stream, args.frames)
    t_min, span = stream.t_min, stream.t_max - stream.t_min + 1
    on = stream.p == 1
    manifest = pd.DataFrame(
        {
            "frame": np.arange(args.frames),
            "t_start": t_min + np.arange(args.frames) * span / args.frames,
            "t_end": t_min + np.arange(1, args.frames + 1) * span / args.frames,
            "on": np.bincount(index[on], minlength=args.frames),
            "off": np.bincount(index[~on], minlength=args.frames),
        }
    )
    manifest["total"] = manifest["on"] + manifest["off"]
    os.makedirs(args.out, exist_ok=True)
    manifest.to_csv(os.path.join(args.out, "frames.csv"), index=False, float_format="%.4f")
    if args.images:
        for i, frame in enumerate(stack_to_frames(stream, args.frames)):
            imsave(
                os.path.join(args.out, f"frame_{i:04d}.png"), render_event_image(frame), check_contrast=False
            )
    _emit([("events", len(stream)), ("frames", args.frames), ("non_empty", int((manifest["total"] > 0).sum()))])
    return EXIT_OK


def cmd_voxelize(args):
    stream = read_event_file(args.input, args.format)
    grid = build_voxel_grid(stream, args.a, args.b, args.c, workers=get_threads())
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "voxels.npy"), grid.counts)
    with open(os.path.join(args.out, "voxels.json"), "w") as f:
        json.dump(
            {
                "dims": [int(d) for d in grid.dims],
                "cell_size": [int(c) for c in grid.cell_size],
                "t_min": grid.t_min,
                "total": grid.total,
            },
            f,
            indent=2,
        )
    _emit([("events", len(stream)), ("dims", "x".join(str(d) for d in grid.dims)), ("total", grid.total)])
    return EXIT_OK


def cmd_kd_check(args):
    report = kd_check(args.seed, args.trials, args.tolerance)
    for row in report.itertuples():
        print(f"{row.check},{fmt4(row.max_error)},{'pass' if row.passed else 'FAIL'}")
    return EXIT_OK if report["passed"].all() else EXIT_FINDINGS


def cmd_eval(args):
    manifest = load_manifest(args.dataset)
    runs, _ = evaluate_runs(args.results, manifest, args.split)
    if not runs:
        logger.error(f"No result files in {args.results} match the {args.split} split")
        return EXIT_IO
    report = aggregate(runs, workers=get_threads())
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    write_report(report, args.report)
    prefix = os.path.splitext(args.report)[0]
    if args.curves:
        write_curves(report, prefix)
    if args.attributes:
        attribute_breakdown(runs).to_csv(f"{prefix}_attributes.csv", index=False, float_format="%.4f")
    if args.plot:
        from evkd.plotting import plot_curves, save_figure

        fig, _ = plot_curves(report)
        save_figure(fig, f"{prefix}_curves.svg")
    _emit([(row.metric, row.value) for row in report.as_frame().itertuples()] + [("videos", len(runs))])
    return EXIT_OK


def cmd_asr_sim(args):
    ious = np.loadtxt(args.iou_trace, ndmin=1)
    trace = asr_trace(ious, args.tau, args.k, args.theta)
    if args.out:
        trace.to_csv(args.out, index=False, float_format="%.4f")
    for row in trace.itertuples():
        print(f"{row.step},{fmt4(row.iou)},{fmt4(row.multiplier)}")
    return EXIT_OK


def cmd_ttt_sim(args):
    video = load_toy_video(args.video)
    cfg = DEFAULT_TTT_PARAMS.copy()
    cfg.update(
        n_frames=args.n,
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.wd,
        rank=args.rank,
        alpha=args.alpha,
        n_templates=args.templates,
    )
    result = ttt_schedule(video, cfg, seed=args.seed)
    base_boxes, _ = track_video(video.base, None, video, seed=args.seed)
    tuned_boxes, _ = track_video(video.base, result.adapter, video, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_ttt_log(result.log, os.path.join(args.out, "ttt_log.csv"))
    write_results(base_boxes, os.path.join(args.out, "base_predictions.txt"))
    write_results(tuned_boxes, os.path.join(args.out, "tuned_predictions.txt"))
    save_arrays({"A": result.adapter.A, "B": result.adapter.B}, os.path.join(args.out, "adapter"))
    first, last = result.log.iloc[0], result.log.iloc[-1]
    _emit([("epochs", cfg["epochs"]), ("total_start", first["total"]), ("total_end", last["total"])])
    return EXIT_OK


def cmd_bench(args):
    if args.repeat < 1:
        raise ValueError(f"--repeat must be >= 1, got {args.repeat}")
    if args.input:
        with open(args.input, "rb") as f:
            raw = f.read()
        fmt = args.format or os.path.splitext(args.input)[1].lstrip(".")
    else:
        raw = write_event_stream(random_stream(args.events, SensorGeometry(), seed=args.seed), "bin")
        fmt = "bin"
    parse_times, voxel_times = [], []
    for _ in range(args.repeat):
        start = time.perf_counter()
        stream = parse_event_stream(raw, fmt)
        parse_times.append(time.perf_counter() - start)
        start = time.perf_counter()
        grid = build_voxel_grid(stream, args.a, args.b, workers=get_threads())
        voxel_times.append(time.perf_counter() - start)
    n = len(stream)
    parse_s, voxel_s = min(parse_times), min(voxel_times)
    _emit(
        [
            ("events", n),
            ("voxel_total", grid.total),
            ("parse_events_per_s", n / parse_s if parse_s > 0 else float("inf")),
            ("voxelize_events_per_s", n / voxel_s if voxel_s > 0 else float("inf")),
            ("combined_events_per_s", n / (parse_s + voxel_s) if parse_s + voxel_s > 0 else float("inf")),
        ]
    )
    return EXIT_OK


def cmd_convert(args):
    if os.path.isdir(args.input):
        notes = convert_released_layout(args.input, args.output)
        for row in notes.itertuples():
            print(f"{row.video_id},{row.note}")
        return EXIT_OK
    stream = read_event_file(args.input)
    write_event_file(stream, args.output)
    _emit([("events", len(stream))])
    return EXIT_OK


def cmd_validate(args):
    manifest = load_manifest(args.dataset)
    expected_splits = None
    if args.full:
        check_split_arithmetic()
        expected_splits = EVENTVOT_SPLITS
    findings = validate_dataset(manifest, args.frames, expected_splits)
    if args.report:
        findings.to_csv(args.report, index=False)
    for row in findings.itertuples():
        print(f"{row.video_id},{row.frame},{row.kind},{row.detail}")
    _emit([("videos", len(manifest.videos)), ("findings", len(findings))])
    return EXIT_FINDINGS if len(findings) else EXIT_OK


def cmd_make_fixture(args):
    video = make_toy_video(n_frames=args.frames, seed=args.seed)
    save_toy_video(video, args.out)
    _emit([("frames", len(video)), ("out", args.out)])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="evkd", description="Event tracking distillation toolkit")
    parser.add_argument("--config", help="key = value file presetting any flag, including verbose")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("stack", help="stack events into fixed-count frames")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "bin"])
    p.add_argument("--frames", type=int, default=EVENTVOT_FRAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--images", action="store_true", help="also write rendered PNG frames")
    p.set_defaults(func=cmd_stack)
    commands["stack"] = p

    p = sub.add_parser("voxelize", help="count events into voxel cells")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "bin"])
    p.add_argument("--a", type=int, default=16)
    p.add_argument("--b", type=int, default=16)
    p.add_argument("--c", type=int, default=None, help="cell duration in us (default span / 5)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)
    commands["voxelize"] = p

    p = sub.add_parser("kd-check", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=KD_TOLERANCE)
    p.set_defaults(func=cmd_kd_check)
    commands["kd-check"] = p

    p = sub.add_parser("eval", help="SR / PR / NPR of result files against a dataset")
    p.add_argument("--results", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--curves", action="store_true")
    p.add_argument("--attributes", action="store_true")
    p.add_argument("--plot", action="store_true", help="write an SVG of the three curves")
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("asr-sim", help="adaptive search region multipliers for an IoU trace")
    p.add_argument("--iou-trace", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_ASR_PARAMS["tau"])
    p.add_argument("--k", type=int, default=DEFAULT_ASR_PARAMS["k"])
    p.add_argument("--theta", type=float, default=DEFAULT_ASR_PARAMS["theta"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_asr_sim)
    commands["asr-sim"] = p

    p = sub.add_parser("ttt-sim", help="test-time tuning on a toy video")
    p.add_argument("--video", required=True)
    p.add_argument("--n", type=int, default=DEFAULT_TTT_PARAMS["n_frames"])
    p.add_argument("--epochs", type=int, default=DEFAULT_TTT_PARAMS["epochs"])
    p.add_argument("--lr", type=float, default=DEFAULT_TTT_PARAMS["lr"])
    p.add_argument("--wd", type=float, default=DEFAULT_TTT_PARAMS["weight_decay"])
    p.add_argument("--rank", type=int, default=DEFAULT_TTT_PARAMS["rank"], help="LoRA rank r")
    p.add_argument("--alpha", type=float, default=DEFAULT_TTT_PARAMS["alpha"], help="LoRA scaling numerator")
    p.add_argument(
        "--templates", type=int, default=DEFAULT_TTT_PARAMS["n_templates"], help="augmented templates"
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ttt_sim)
    commands["ttt-sim"] = p

    p = sub.add_parser("bench", help="parse and voxelize throughput")
    p.add_argument("--input")
    p.add_argument("--format", choices=["csv", "bin"])
    p.add_argument("--events", type=int, default=10_000_000, help="synthetic stream size without --input")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--a", type=int, default=16)
    p.add_argument("--b", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    commands["bench"] = p

    p = sub.add_parser("convert", help="CSV <-> BIN events, or a released dataset layout")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_convert)
    commands["convert"] = p

    p = sub.add_parser("validate", help="dataset integrity findings")
    p.add_argument("--dataset", required=True)
    p.add_argument("--frames", type=int, default=EVENTVOT_FRAMES)
    p.add_argument("--full", action="store_true", help="also check the full benchmark split sizes")
    p.add_argument("--report")
    p.set_defaults(func=cmd_validate)
    commands["validate"] = p

    p = sub.add_parser("make-fixture", help="write a toy TTT video")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    commands["make-fixture"] = p
    return parser, commands


def _coerce(action, value):
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in ("1", "true", "yes", "on")
    return action.type(value) if action.type else value


def apply_config(parser, commands, config):
    """Preset global and subcommand defaults from a config dict; explicit flags still win."""
    for p in [parser, *commands.values()]:
        defaults = {}
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction) or action.dest == "config":
                continue
            if action.dest in config:
                defaults[action.dest] = _coerce(action, config[action.dest])
                action.required = False
        p.set_defaults(**defaults)


def main(argv=None):
    parser, commands = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            apply_config(parser, commands, read_config(known.config))
        except FileNotFoundError as e:
            print(f"evkd: config file not found: {e}", file=sys.stderr)
            return EXIT_IO
        except ValueError as e:
            print(f"evkd: {e}", file=sys.stderr)
            return EXIT_USAGE
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except OSError as e:
        logger.error(str(e))
        return EXIT_IO
    except EvkdError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except ValueError as e:
        logger.error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
