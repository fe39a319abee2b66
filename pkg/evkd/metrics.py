import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from evkd.dataset import EVENTVOT_ATTRIBUTES, load_annotations
from evkd.errors import AllAbsent, EmptyRun, LengthMismatch
from evkd.geometry import box_center_error, box_iou, box_normalized_center_error

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0, 1, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0, 0.5, 101)
PRECISION_REPORT_PX = 20
CURVE_NAMES = ("success", "precision", "norm_precision")


class Curve(NamedTuple):
    thresholds: np.ndarray
    values: np.ndarray
    score: float


@dataclass
class TrackRun:
    video_id: str
    predicted: np.ndarray
    ground_truth: np.ndarray
    absent: np.ndarray = None
    attributes: tuple = ()
    fps: float = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1, 4)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64).reshape(-1, 4)
        if self.absent is None:
            self.absent = np.zeros(len(self.ground_truth), dtype=bool)
        self.absent = np.asarray(self.absent, dtype=bool).ravel()
        if not (len(self.predicted) == len(self.ground_truth) == len(self.absent)):
            raise LengthMismatch(
                f"{self.video_id}: {len(self.predicted)} predictions, "
                f"{len(self.ground_truth)} ground-truth boxes, {len(self.absent)} absent flags"
            )
        unknown = [t for t in self.attributes if t not in EVENTVOT_ATTRIBUTES]
        if unknown:
            raise ValueError(f"{self.video_id}: unknown attribute tags {unknown}")
        self.attributes = tuple(self.attributes)

    def __len__(self):
        return len(self.ground_truth)


def _present(run):
    if len(run) == 0:
        raise EmptyRun(f"{run.video_id}: no frames")
    keep = ~run.absent
    if not keep.any():
        raise AllAbsent(f"{run.video_id}: every frame is flagged absent")
    return run.predicted[keep], run.ground_truth[keep]


def success_curve(run):
    """Fraction of present frames with IoU strictly above each threshold; SR is the mean x 100."""
    predicted, truth = _present(run)
    ious = box_iou(predicted, truth)
    values = np.array([np.mean(ious > t) for t in SUCCESS_THRESHOLDS])
    return Curve(SUCCESS_THRESHOLDS, values, float(values.mean() * 100))


def precision_curve(run):
    predicted, truth = _present(run)
    errors = box_center_error(predicted, truth)
    values = np.array([np.mean(errors <= t) for t in PRECISION_THRESHOLDS])
    score = values[np.searchsorted(PRECISION_THRESHOLDS, PRECISION_REPORT_PX)] * 100
    return Curve(PRECISION_THRESHOLDS, values, float(score))


def normalized_precision(run):
    predicted, truth = _present(run)
    errors = box_normalized_center_error(predicted, truth)
    values = np.array([np.mean(errors <= t) for t in NORM_PRECISION_THRESHOLDS])
    area = trapezoid(values, NORM_PRECISION_THRESHOLDS)
    return Curve(NORM_PRECISION_THRESHOLDS, values, float(area / NORM_PRECISION_THRESHOLDS[-1] * 100))


def evaluate_run(run):
    return {
        "success": success_curve(run),
        "precision": precision_curve(run),
        "norm_precision": normalized_precision(run),
    }


@dataclass
class MetricReport:
    SR: float
    PR: float
    NPR: float
    curves: dict
    per_video: pd.DataFrame = field(repr=False, default=None)
    fps: float = None

    def as_frame(self):
        rows = [("SR", self.SR), ("PR", self.PR), ("NPR", self.NPR)]
        if self.fps is not None:
            rows.append(("FPS", self.fps))
        return pd.DataFrame(rows, columns=["metric", "value"])


def aggregate(runs, workers=None):
    """Per-video metrics averaged with equal video weight, reduced in video-id order."""
    if len(runs) == 0:
        raise EmptyRun("No runs to aggregate")
    runs = sorted(runs, key=lambda r: r.video_id)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate_run, runs))
    else:
        results = [evaluate_run(r) for r in runs]

    curves = {}
    for name in CURVE_NAMES:
        first = results[0][name]
        values = np.mean([r[name].values for r in results], axis=0)
        score = float(np.mean([r[name].score for r in results]))
        curves[name] = Curve(first.thresholds, values, score)

    per_video = pd.DataFrame(
        {
            "video_id": [r.video_id for r in runs],
            "frames": [len(r) for r in runs],
            "SR": [res["success"].score for res in results],
            "PR": [res["precision"].score for res in results],
            "NPR": [res["norm_precision"].score for res in results],
            "FPS": [np.nan if r.fps is None else r.fps for r in runs],
        }
    )
    fps = per_video["FPS"].mean() if per_video["FPS"].notna().any() else None
    return MetricReport(
        curves["success"].score,
        curves["precision"].score,
        curves["norm_precision"].score,
        curves,
        per_video,
        fps,
    )


def attribute_breakdown(runs, workers=None):
    """Metrics restricted to the runs carrying each attribute tag; NaN for unused tags."""
    rows = []
    for tag in EVENTVOT_ATTRIBUTES:
        tagged = [r for r in runs if tag in r.attributes]
        if tagged:
            report = aggregate(tagged, workers)
            rows.append((tag, len(tagged), report.SR, report.PR, report.NPR))
        else:
            rows.append((tag, 0, np.nan, np.nan, np.nan))
    return pd.DataFrame(rows, columns=["attribute", "n_videos", "SR", "PR", "NPR"])


def load_results(path):
    """Tracker output boxes, one `x,y,w,h` line per frame (commas or whitespace)."""
    try:
        boxes = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        boxes = np.loadtxt(path, ndmin=2)
    return boxes[:, :4]


def write_results(boxes, path):
    np.savetxt(path, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), fmt="%.4f", delimiter=",")


def load_fps(path):
    """Frames per second from a per-frame timing file in seconds, or None when absent."""
    if not os.path.exists(path):
        return None
    times = np.loadtxt(path, ndmin=1)
    total = times.sum()
    return float(len(times) / total) if total > 0 else None


def evaluate_runs(results_dir, manifest, split="test"):
    """Pair `<results_dir>/<video>.txt` files with the manifest's annotations.

    Videos without a result file are logged and skipped; returns the runs and
    the list of skipped video ids.
    """
    videos = manifest.videos if split in (None, "all") else manifest.split(split)
    runs, skipped = [], []
    for video in sorted(videos, key=lambda v: v.video_id):
        result_path = os.path.join(results_dir, f"{video.video_id}.txt")
        if not os.path.exists(result_path) or not os.path.exists(video.annotation_path):
            skipped.append(video.video_id)
            continue
        truth = load_annotations(video.annotation_path)
        predicted = load_results(result_path)
        runs.append(
            TrackRun(
                video.video_id,
                predicted,
                truth[["x", "y", "w", "h"]].to_numpy(),
                truth["absent"].to_numpy(),
                video.attributes,
                load_fps(os.path.join(results_dir, f"{video.video_id}_time.txt")),
            )
        )
    if skipped:
        logger.warning(f"No results for {len(skipped)} videos: {', '.join(skipped)}")
    return runs, skipped


def write_report(report, path):
    report.as_frame().to_csv(path, index=False, float_format="%.4f")


def write_curves(report, prefix):
    """One `<prefix>_<curve>.csv` (threshold, value) per curve plus `<prefix>_videos.csv`."""
    paths = []
    for name, curve in report.curves.items():
        path = f"{prefix}_{name}.csv"
        pd.DataFrame({"threshold": curve.thresholds, "value": curve.values}).to_csv(
            path, index=False, float_format="%.4f"
        )
        paths.append(path)
    if report.per_video is not None:
        path = f"{prefix}_videos.csv"
        report.per_video.to_csv(path, index=False, float_format="%.4f")
        paths.append(path)
    return paths
