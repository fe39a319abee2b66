import os

import numpy as np
import pandas as pd
import pytest

from evkd.dataset import EVENTVOT_ATTRIBUTES, load_manifest
from evkd.errors import AllAbsent, EmptyRun, LengthMismatch
from evkd.metrics import (
    NORM_PRECISION_THRESHOLDS,
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    TrackRun,
    aggregate,
    attribute_breakdown,
    evaluate_runs,
    load_fps,
    load_results,
    normalized_precision,
    precision_curve,
    success_curve,
    write_curves,
    write_report,
    write_results,
)

GT = [0.0, 0.0, 10.0, 10.0]


def _run(predicted, truth=None, **kwargs):
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 4)
    if truth is None:
        truth = np.tile(GT, (len(predicted), 1))
    return TrackRun(kwargs.pop("video_id", "v"), predicted, truth, **kwargs)


def test_threshold_grids():
    assert len(SUCCESS_THRESHOLDS) == 21
    assert len(PRECISION_THRESHOLDS) == 51
    assert len(NORM_PRECISION_THRESHOLDS) == 101
    assert NORM_PRECISION_THRESHOLDS[-1] == 0.5


def test_perfect_run():
    run = _run([GT] * 5)
    assert success_curve(run).score == pytest.approx(20 / 21 * 100)
    assert precision_curve(run).score == 100.0
    assert normalized_precision(run).score == pytest.approx(100.0)


def test_success_counts_strictly_above():
    run = _run([[0, 0, 6.2, 10], [0, 0, 2.2, 10]])
    # IoU 0.62 clears 13 thresholds, 0.22 clears 5
    assert success_curve(run).score == pytest.approx((13 + 5) / 42 * 100)


def test_precision_at_20px():
    run = _run([[5, 0, 10, 10], [25, 0, 10, 10]])
    curve = precision_curve(run)
    assert curve.score == pytest.approx(50.0)
    assert curve.values[0] == 0.0
    assert curve.values[-1] == 1.0


def test_normalized_precision_area():
    run = _run([[2.525, 0, 10, 10]])
    assert normalized_precision(run).score == pytest.approx(49.5)


def test_scale_changes_pixel_precision_only():
    predicted = np.array([[3.0, 0, 10, 10], [0, 4.0, 10, 10]])
    small = _run(predicted)
    large = _run(predicted * 10, np.tile(GT, (2, 1)) * 10)
    assert precision_curve(small).score == 100.0
    assert precision_curve(large).score == 0.0
    assert normalized_precision(small).score == pytest.approx(normalized_precision(large).score)
    assert success_curve(small).score == pytest.approx(success_curve(large).score)


def test_absent_frames_are_excluded():
    predicted = [GT, [500, 500, 1, 1], GT]
    absent = [False, True, False]
    assert success_curve(_run(predicted, absent=absent)).score == pytest.approx(20 / 21 * 100)


def test_run_errors():
    with pytest.raises(LengthMismatch):
        TrackRun("v", np.zeros((3, 4)), np.ones((2, 4)))
    with pytest.raises(EmptyRun):
        success_curve(TrackRun("v", np.zeros((0, 4)), np.zeros((0, 4))))
    with pytest.raises(AllAbsent):
        precision_curve(_run([GT, GT], absent=[True, True]))
    with pytest.raises(ValueError):
        _run([GT], attributes=("XX",))
    with pytest.raises(EmptyRun):
        aggregate([])


def test_aggregate_weights_videos_equally():
    perfect = _run([GT], video_id="a")
    lost = _run([[100, 100, 10, 10]] * 9, video_id="b")
    report = aggregate([lost, perfect])
    assert report.SR == pytest.approx(20 / 21 * 100 / 2)
    assert report.PR == pytest.approx(50.0)
    assert list(report.per_video["video_id"]) == ["a", "b"]
    assert report.fps is None


def test_aggregate_parallel_matches_sequential():
    rng = np.random.default_rng(0)
    runs = [
        _run(np.column_stack([rng.uniform(-3, 3, (20, 2)), np.full((20, 2), 10.0)]), video_id=f"v{i}")
        for i in range(6)
    ]
    a, b = aggregate(runs), aggregate(runs, workers=3)
    assert (a.SR, a.PR, a.NPR) == (b.SR, b.PR, b.NPR)


def test_report_frame_and_fps():
    report = aggregate([_run([GT], fps=20.0), _run([GT], video_id="w", fps=40.0)])
    frame = report.as_frame()
    assert list(frame["metric"]) == ["SR", "PR", "NPR", "FPS"]
    assert report.fps == pytest.approx(30.0)


def test_attribute_breakdown():
    runs = [
        _run([GT], video_id="a", attributes=("CM", "FM")),
        _run([[100, 100, 10, 10]], video_id="b", attributes=("FM",)),
    ]
    table = attribute_breakdown(runs).set_index("attribute")
    assert list(table.index) == list(EVENTVOT_ATTRIBUTES)
    assert table.loc["CM", "n_videos"] == 1
    assert table.loc["CM", "PR"] == 100.0
    assert table.loc["FM", "n_videos"] == 2
    assert table.loc["FM", "PR"] == pytest.approx(50.0)
    assert np.isnan(table.loc["OV", "SR"])


def test_results_file_round_trip(tmp_path):
    boxes = np.array([[1.5, 2.25, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    path = tmp_path / "v.txt"
    write_results(boxes, path)
    assert path.read_text().splitlines()[0] == "1.5000,2.2500,3.0000,4.0000"
    np.testing.assert_allclose(load_results(path), boxes)
    (tmp_path / "w.txt").write_text("1 2 3 4\n5 6 7 8\n")
    np.testing.assert_allclose(load_results(tmp_path / "w.txt"), [[1, 2, 3, 4], [5, 6, 7, 8]])


def test_load_fps(tmp_path):
    assert load_fps(str(tmp_path / "missing.txt")) is None
    path = tmp_path / "v_time.txt"
    path.write_text("0.05\n0.05\n0.1\n0.1\n")
    assert load_fps(str(path)) == pytest.approx(4 / 0.3)


def test_evaluate_runs_on_dataset(dataset_root, perfect_results, tmp_path):
    manifest = load_manifest(dataset_root)
    runs, skipped = evaluate_runs(perfect_results, manifest, "test")
    assert [r.video_id for r in runs] == ["vid_b", "vid_c"]
    assert skipped == []
    assert runs[1].absent.tolist() == [False, True, False, False]
    assert runs[0].attributes == ("CM", "FM")

    report = aggregate(runs)
    assert report.SR == pytest.approx(20 / 21 * 100)
    assert report.PR == 100.0

    prefix = str(tmp_path / "report")
    write_report(report, prefix + ".csv")
    table = pd.read_csv(prefix + ".csv")
    assert list(table["metric"]) == ["SR", "PR", "NPR"]
    paths = write_curves(report, prefix)
    assert len(paths) == 4
    assert all(os.path.exists(p) for p in paths)
    assert len(pd.read_csv(prefix + "_success.csv")) == 21


def test_evaluate_runs_skips_missing_results(dataset_root, perfect_results, caplog):
    os.remove(os.path.join(perfect_results, "vid_c.txt"))
    runs, skipped = evaluate_runs(perfect_results, load_manifest(dataset_root), "test")
    assert [r.video_id for r in runs] == ["vid_b"]
    assert skipped == ["vid_c"]
    assert "vid_c" in caplog.text
