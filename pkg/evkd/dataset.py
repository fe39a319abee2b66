import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from evkd.errors import DuplicateVideoId, InvalidBox, MalformedLine, MissingSplitFile
from evkd.events import EVENTVOT_FRAMES, SensorGeometry

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
EVENTVOT_SPLITS = {"train": 841, "val": 18, "test": 282}
EVENTVOT_VIDEOS = 1141
EVENTVOT_CLASSES = 19
EVENTVOT_ATTRIBUTES = (
    "CM",
    "MOC",
    "HOC",
    "FOC",
    "DEF",
    "LI",
    "OV",
    "SV",
    "BC",
    "FM",
    "NMO",
    "BOM",
    "SIO",
    "ST",
)
ATTRIBUTE_DESCRIPTIONS = {
    "CM": "camera motion",
    "MOC": "mild occlusion",
    "HOC": "heavy occlusion",
    "FOC": "full occlusion",
    "DEF": "deformation",
    "LI": "low illumination",
    "OV": "out of view",
    "SV": "scale variation",
    "BC": "background clutter",
    "FM": "fast motion",
    "NMO": "no motion",
    "BOM": "background object motion",
    "SIO": "small target",
    "ST": "similar interferer",
}
ANNOTATION_FILE = "groundtruth.txt"
ATTRIBUTES_FILE = "attributes.csv"
CLASSES_FILE = "classes.csv"
FINDING_COLUMNS = ["video_id", "frame", "kind", "detail"]


@dataclass
class VideoRecord:
    video_id: str
    split: str
    class_tag: str = None
    attributes: tuple = ()
    frame_count: int = 0
    geometry: SensorGeometry = SensorGeometry()
    annotation_path: str = field(default=None, compare=False)


@dataclass
class DatasetManifest:
    root: str = field(compare=False)
    videos: list
    missing: list = field(default_factory=list, compare=False)

    @property
    def splits(self):
        return {v.video_id: v.split for v in self.videos}

    def split(self, name):
        return [v for v in self.videos if v.split == name]

    def get(self, video_id):
        for video in self.videos:
            if video.video_id == video_id:
                return video
        raise KeyError(video_id)


def load_annotations(path):
    """Per-frame boxes of one video as a DataFrame with columns x, y, w, h, absent.

    Lines hold `x,y,w,h,absent` or a leading frame index before them. Boxes need
    positive size unless flagged absent.
    """
    rows = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [v.strip() for v in line.split(",")]
            if len(fields) == 6:
                fields = fields[1:]
            if len(fields) != 5:
                raise MalformedLine(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            try:
                x, y, w, h = (float(v) for v in fields[:4])
                absent = int(fields[4])
            except ValueError as e:
                raise MalformedLine(f"{path}:{lineno}: {e}") from e
            if absent not in (0, 1):
                raise MalformedLine(f"{path}:{lineno}: absent flag must be 0 or 1")
            if not absent and not (w > 0 and h > 0):
                raise InvalidBox(f"{path}:{lineno}: box {x, y, w, h} has non-positive size")
            rows.append((x, y, w, h, bool(absent)))
    df = pd.DataFrame(rows, columns=["x", "y", "w", "h", "absent"])
    return df.astype({"x": float, "y": float, "w": float, "h": float, "absent": bool})


def _read_lines(path):
    with open(path, "r") as f:
        return [line.strip() for line in f if line.strip()]


def _read_tag_file(path):
    tags = {}
    if not os.path.exists(path):
        return tags
    for line in _read_lines(path):
        fields = [v.strip() for v in line.split(",") if v.strip()]
        if fields and fields[0] != "video_id":
            tags[fields[0]] = tuple(fields[1:])
    return tags


def _count_annotation_lines(path):
    return len(_read_lines(path))


def load_manifest(root, geometry=None):
    """Resolve split lists, tags and annotation files under `root`.

    Missing per-video annotation files are collected in `manifest.missing`
    rather than raised.
    """
    if geometry is None:
        geometry = SensorGeometry()
    absent_splits = [s for s in SPLIT_NAMES if not os.path.exists(os.path.join(root, f"{s}.txt"))]
    if absent_splits:
        raise MissingSplitFile(
            f"Missing split files under {root}: {', '.join(s + '.txt' for s in absent_splits)}"
        )
    assigned = {}
    duplicates = set()
    for split in SPLIT_NAMES:
        for video_id in _read_lines(os.path.join(root, f"{split}.txt")):
            if video_id in assigned:
                duplicates.add(video_id)
            else:
                assigned[video_id] = split
    if duplicates:
        raise DuplicateVideoId(f"Video ids listed more than once: {', '.join(sorted(duplicates))}")

    attributes = _read_tag_file(os.path.join(root, ATTRIBUTES_FILE))
    classes = _read_tag_file(os.path.join(root, CLASSES_FILE))
    videos, missing = [], []
    for video_id, split in assigned.items():
        path = os.path.join(root, video_id, ANNOTATION_FILE)
        if os.path.exists(path):
            frame_count = _count_annotation_lines(path)
        else:
            missing.append(path)
            frame_count = 0
        class_tag = classes.get(video_id, ())
        videos.append(
            VideoRecord(
                video_id,
                split,
                class_tag[0] if class_tag else None,
                attributes.get(video_id, ()),
                frame_count,
                geometry,
                path,
            )
        )
    if missing:
        logger.warning(f"{len(missing)} annotation files missing under {root}")
    logger.info(f"Loaded manifest of {len(videos)} videos from {root}")
    return DatasetManifest(root, videos, missing)


def write_manifest(manifest, root):
    """Write split lists, tag files and copies of the annotation files under `root`."""
    os.makedirs(root, exist_ok=True)
    for split in SPLIT_NAMES:
        with open(os.path.join(root, f"{split}.txt"), "w") as f:
            for video in manifest.split(split):
                f.write(f"{video.video_id}\n")
    with open(os.path.join(root, ATTRIBUTES_FILE), "w") as f:
        for video in manifest.videos:
            if video.attributes:
                f.write(",".join((video.video_id,) + tuple(video.attributes)) + "\n")
    if any(v.class_tag for v in manifest.videos):
        with open(os.path.join(root, CLASSES_FILE), "w") as f:
            for video in manifest.videos:
                if video.class_tag:
                    f.write(f"{video.video_id},{video.class_tag}\n")
    for video in manifest.videos:
        if video.annotation_path and os.path.exists(video.annotation_path):
            os.makedirs(os.path.join(root, video.video_id), exist_ok=True)
            destination = os.path.join(root, video.video_id, ANNOTATION_FILE)
            if os.path.abspath(destination) != os.path.abspath(video.annotation_path):
                shutil.copyfile(video.annotation_path, destination)


def write_annotations(df, path):
    out = df[["x", "y", "w", "h"]].copy()
    out["absent"] = df["absent"].astype(int)
    out.to_csv(path, header=False, index=False)


def _finding(video_id, frame, kind, detail):
    return {"video_id": video_id, "frame": frame, "kind": kind, "detail": detail}


def _validate_video(video, expected_frames):
    findings = []
    if video.annotation_path is None or not os.path.exists(video.annotation_path):
        return [_finding(video.video_id, -1, "MissingAnnotation", str(video.annotation_path))]
    try:
        boxes = load_annotations(video.annotation_path)
    except (MalformedLine, InvalidBox) as e:
        return [_finding(video.video_id, -1, type(e).__name__, str(e))]
    if expected_frames is not None and len(boxes) != expected_frames:
        findings.append(
            _finding(
                video.video_id,
                -1,
                "FrameCountMismatch",
                f"{len(boxes)} annotated frames, expected {expected_frames}",
            )
        )
    width, height = video.geometry.width, video.geometry.height
    present = boxes[~boxes["absent"]]
    outside = present[
        (present["x"] < 0)
        | (present["y"] < 0)
        | (present["x"] + present["w"] > width)
        | (present["y"] + present["h"] > height)
    ]
    for frame, row in outside.iterrows():
        findings.append(
            _finding(
                video.video_id,
                int(frame),
                "BoundsExceeded",
                f"box ({row.x:g}, {row.y:g}, {row.w:g}, {row.h:g}) outside {width}x{height}",
            )
        )
    for tag in video.attributes:
        if tag not in EVENTVOT_ATTRIBUTES:
            findings.append(_finding(video.video_id, -1, "UnknownAttribute", tag))
    return findings


def validate_dataset(manifest, expected_frames=EVENTVOT_FRAMES, expected_splits=None):
    """Integrity findings for a manifest, one row per problem, empty when clean.

    Split totals are checked only when `expected_splits` is given (e.g.
    EVENTVOT_SPLITS for the full benchmark).
    """
    findings = []
    for video in sorted(manifest.videos, key=lambda v: v.video_id):
        findings.extend(_validate_video(video, expected_frames))
    if expected_splits is not None:
        for split, expected in expected_splits.items():
            found = len(manifest.split(split))
            if found != expected:
                findings.append(
                    _finding("", -1, "SplitCountMismatch", f"{split}: {found} videos, expected {expected}")
                )
    classes = {v.class_tag for v in manifest.videos if v.class_tag}
    if len(classes) > EVENTVOT_CLASSES:
        findings.append(
            _finding("", -1, "ClassCountExceeded", f"{len(classes)} classes, at most {EVENTVOT_CLASSES}")
        )
    return pd.DataFrame(findings, columns=FINDING_COLUMNS)


def check_split_arithmetic(splits=EVENTVOT_SPLITS, total=EVENTVOT_VIDEOS):
    if sum(splits.values()) != total:
        raise ValueError(f"Split sizes {splits} do not add up to {total} videos")
    return True


def _read_box_table(path):
    try:
        boxes = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        boxes = np.loadtxt(path, ndmin=2)
    return boxes[:, :4]


def convert_released_layout(src, dst):
    """Import `<src>/<split>/<video>/groundtruth.txt` (+ absent_label.txt) into the canonical layout.

    Returns a DataFrame of (video_id, note) rows for every lossy or guessed mapping.
    """
    notes = []
    os.makedirs(dst, exist_ok=True)
    for split in SPLIT_NAMES:
        split_dir = os.path.join(src, split)
        video_ids = []
        if os.path.isdir(split_dir):
            video_ids = sorted(
                d
                for d in os.listdir(split_dir)
                if os.path.exists(os.path.join(split_dir, d, ANNOTATION_FILE))
            )
        else:
            notes.append({"video_id": "", "note": f"no {split} directory, empty split written"})
        for video_id in video_ids:
            video_dir = os.path.join(split_dir, video_id)
            boxes = _read_box_table(os.path.join(video_dir, ANNOTATION_FILE))
            absent_path = os.path.join(video_dir, "absent_label.txt")
            if os.path.exists(absent_path):
                absent = np.loadtxt(absent_path, ndmin=1).astype(int)
                if len(absent) != len(boxes):
                    notes.append(
                        {
                            "video_id": video_id,
                            "note": f"{len(absent)} absent labels for {len(boxes)} boxes, padded with 0",
                        }
                    )
                    padded = np.zeros(len(boxes), dtype=int)
                    kept = min(len(absent), len(boxes))
                    padded[:kept] = absent[:kept]
                    absent = padded
            else:
                absent = np.zeros(len(boxes), dtype=int)
                notes.append({"video_id": video_id, "note": "no absent labels, all frames marked present"})
            degenerate = (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0)
            if np.any(degenerate & (absent == 0)):
                notes.append(
                    {
                        "video_id": video_id,
                        "note": f"{int(np.sum(degenerate & (absent == 0)))} zero-size boxes marked absent",
                    }
                )
            absent = np.where(degenerate, 1, absent).astype(int)
            df = pd.DataFrame(boxes, columns=["x", "y", "w", "h"])
            df["absent"] = absent.astype(bool)
            os.makedirs(os.path.join(dst, video_id), exist_ok=True)
            write_annotations(df, os.path.join(dst, video_id, ANNOTATION_FILE))
        with open(os.path.join(dst, f"{split}.txt"), "w") as f:
            for video_id in video_ids:
                f.write(f"{video_id}\n")
    for name in (ATTRIBUTES_FILE, CLASSES_FILE):
        if os.path.exists(os.path.join(src, name)):
            shutil.copyfile(os.path.join(src, name), os.path.join(dst, name))
    return pd.DataFrame(notes, columns=["video_id", "note"])
