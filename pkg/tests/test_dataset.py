import os

import numpy as np
import pytest

from evkd.dataset import (
    EVENTVOT_SPLITS,
    EVENTVOT_VIDEOS,
    VideoRecord,
    check_split_arithmetic,
    convert_released_layout,
    load_annotations,
    load_manifest,
    validate_dataset,
    write_manifest,
)
from evkd.errors import DuplicateVideoId, InvalidBox, MalformedLine, MissingSplitFile
from evkd.events import SensorGeometry


def _write(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def test_split_arithmetic():
    assert sum(EVENTVOT_SPLITS.values()) == EVENTVOT_VIDEOS
    assert check_split_arithmetic()
    with pytest.raises(ValueError):
        check_split_arithmetic({"train": 840, "val": 18, "test": 282})


def test_load_manifest(dataset_root):
    manifest = load_manifest(dataset_root)
    assert manifest.splits == {"vid_a": "train", "vid_b": "test", "vid_c": "test"}
    assert [v.video_id for v in manifest.split("test")] == ["vid_b", "vid_c"]
    assert manifest.split("val") == []
    video = manifest.get("vid_b")
    assert video.attributes == ("CM", "FM")
    assert video.class_tag == "car"
    assert video.frame_count == 4
    assert manifest.missing == []
    with pytest.raises(KeyError):
        manifest.get("vid_z")


def test_missing_split_file(dataset_root):
    os.remove(os.path.join(dataset_root, "val.txt"))
    with pytest.raises(MissingSplitFile, match="val.txt"):
        load_manifest(dataset_root)


def test_duplicate_video_id(dataset_root):
    with open(os.path.join(dataset_root, "val.txt"), "w") as f:
        f.write("vid_b\n")
    with pytest.raises(DuplicateVideoId, match="vid_b"):
        load_manifest(dataset_root)


def test_missing_annotation_is_collected(dataset_root):
    os.remove(os.path.join(dataset_root, "vid_a", "groundtruth.txt"))
    manifest = load_manifest(dataset_root)
    assert len(manifest.missing) == 1
    assert manifest.get("vid_a").frame_count == 0
    findings = validate_dataset(manifest, expected_frames=4)
    assert list(findings["kind"]) == ["MissingAnnotation"]


def test_load_annotations(tmp_path):
    path = str(tmp_path / "gt.txt")
    _write(path, "1,2,3,4,0\n\n5,6,7,8,1\n0,0,0,0,1\n")
    df = load_annotations(path)
    assert list(df.columns) == ["x", "y", "w", "h", "absent"]
    assert df["absent"].tolist() == [False, True, True]
    assert df.iloc[1].tolist()[:4] == [5.0, 6.0, 7.0, 8.0]


def test_load_annotations_with_frame_index(tmp_path):
    path = str(tmp_path / "gt.txt")
    _write(path, "0,1,2,3,4,0\n1,5,6,7,8,0\n")
    assert load_annotations(path)["x"].tolist() == [1.0, 5.0]


@pytest.mark.parametrize(
    "text, error",
    [
        ("1,2,3,0\n", MalformedLine),
        ("1,2,3,a,0\n", MalformedLine),
        ("1,2,3,4,2\n", MalformedLine),
        ("1,2,0,4,0\n", InvalidBox),
    ],
)
def test_bad_annotation_lines(tmp_path, text, error):
    path = str(tmp_path / "gt.txt")
    _write(path, text)
    with pytest.raises(error):
        load_annotations(path)


def test_clean_dataset_has_no_findings(dataset_root):
    findings = validate_dataset(load_manifest(dataset_root), expected_frames=4)
    assert findings.empty
    assert list(findings.columns) == ["video_id", "frame", "kind", "detail"]


def test_validation_findings(dataset_root):
    _write(
        os.path.join(dataset_root, "vid_a", "groundtruth.txt"),
        "10,10,40,30,0\n1270,10,40,30,0\n5000,5000,1,1,1\n",
    )
    with open(os.path.join(dataset_root, "attributes.csv"), "a") as f:
        f.write("vid_b,XYZ\n")
    _write(os.path.join(dataset_root, "vid_c", "groundtruth.txt"), "1,2,3\n")
    findings = validate_dataset(load_manifest(dataset_root), expected_frames=4, expected_splits=EVENTVOT_SPLITS)
    kinds = findings.groupby("kind")["video_id"].apply(list).to_dict()
    assert kinds["FrameCountMismatch"] == ["vid_a"]
    assert kinds["BoundsExceeded"] == ["vid_a"]
    assert findings.loc[findings["kind"] == "BoundsExceeded", "frame"].tolist() == [1]
    assert kinds["UnknownAttribute"] == ["vid_b"]
    assert kinds["MalformedLine"] == ["vid_c"]
    assert len(kinds["SplitCountMismatch"]) == 3


def test_class_count_limit(dataset_root):
    manifest = load_manifest(dataset_root)
    for i, video in enumerate(manifest.videos):
        video.class_tag = f"class_{i}"
    assert validate_dataset(manifest, expected_frames=4).empty
    manifest.videos.extend(VideoRecord(f"x{i}", "train", f"extra_{i}") for i in range(20))
    findings = validate_dataset(manifest, expected_frames=None)
    assert "ClassCountExceeded" in set(findings["kind"])


def test_bounds_follow_geometry(dataset_root):
    manifest = load_manifest(dataset_root, geometry=SensorGeometry(120, 120))
    findings = validate_dataset(manifest, expected_frames=4)
    assert set(findings["video_id"]) == {"vid_b", "vid_c"}


def test_manifest_round_trip(dataset_root, tmp_path):
    manifest = load_manifest(dataset_root)
    copy_root = str(tmp_path / "copy")
    write_manifest(manifest, copy_root)
    again = load_manifest(copy_root)
    assert again == manifest
    assert again.root == copy_root
    assert os.path.exists(os.path.join(copy_root, "vid_c", "groundtruth.txt"))


def test_convert_released_layout(tmp_path):
    src = str(tmp_path / "released")
    _write(os.path.join(src, "train", "v1", "groundtruth.txt"), "1,2,3,4\n5,6,7,8\n9,9,0,0\n")
    _write(os.path.join(src, "train", "v1", "absent_label.txt"), "0\n1\n")
    _write(os.path.join(src, "test", "v2", "groundtruth.txt"), "1 2 3 4\n")
    dst = str(tmp_path / "canonical")
    notes = convert_released_layout(src, dst)

    manifest = load_manifest(dst)
    assert manifest.splits == {"v1": "train", "v2": "test"}
    v1 = load_annotations(os.path.join(dst, "v1", "groundtruth.txt"))
    assert v1["absent"].tolist() == [False, True, True]
    assert load_annotations(os.path.join(dst, "v2", "groundtruth.txt"))["w"].tolist() == [3.0]

    by_video = notes.groupby("video_id")["note"].apply(list).to_dict()
    assert any("padded" in n for n in by_video["v1"])
    assert any("zero-size" in n for n in by_video["v1"])
    assert any("all frames marked present" in n for n in by_video["v2"])
    assert any("val" in n for n in by_video[""])


def test_convert_keeps_boxes(tmp_path):
    src = str(tmp_path / "released")
    boxes = np.array([[10.5, 20.0, 30.0, 40.0], [11.0, 21.0, 30.0, 40.0]])
    os.makedirs(os.path.join(src, "val", "v3"))
    np.savetxt(os.path.join(src, "val", "v3", "groundtruth.txt"), boxes, delimiter=",")
    np.savetxt(os.path.join(src, "val", "v3", "absent_label.txt"), [0, 0], fmt="%d")
    dst = str(tmp_path / "canonical")
    notes = convert_released_layout(src, dst)
    df = load_annotations(os.path.join(dst, "v3", "groundtruth.txt"))
    np.testing.assert_allclose(df[["x", "y", "w", "h"]].to_numpy(), boxes)
    assert "v3" not in set(notes["video_id"])
