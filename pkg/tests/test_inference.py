import itertools

import numpy as np
import pytest

from evkd.errors import EmptyWindow, LengthMismatch, OutOfRange, VideoTooShort
from evkd.events import EventStream, SensorGeometry
from evkd.gradcheck import check_gradient, numerical_gradient, relative_error
from evkd.inference import (
    AsrState,
    LoraAdapter,
    asr_step,
    asr_trace,
    consistency_loss,
    init_lora,
    lora_apply,
    lora_grad,
    merge_lora,
    pseudo_label_heatmap,
    template_augment,
    track_video,
    ttt_schedule,
)
from evkd.toy import make_toy_video


def _reference_multipliers(ious, tau=0.5, k=7, theta=1.5):
    failures, expanded, out = 0, False, []
    for value in ious:
        if value < tau:
            failures += 1
            if failures >= k:
                expanded = True
        else:
            failures, expanded = 0, False
        out.append(theta if expanded else 1.0)
    return out


def test_asr_expands_after_k_failures():
    trace = asr_trace([0.1] * 8 + [0.9])
    assert list(trace["multiplier"]) == [1.0] * 6 + [1.5, 1.5, 1.0]
    assert trace["failures"].iloc[-2] == 8
    assert trace["failures"].iloc[-1] == 0


def test_asr_success_resets_count():
    trace = asr_trace([0.1] * 6 + [0.5] + [0.1] * 6)
    assert (trace["multiplier"] == 1.0).all()


def test_asr_step_rejects_bad_iou():
    with pytest.raises(OutOfRange):
        asr_step(AsrState(), 1.5)
    with pytest.raises(OutOfRange):
        asr_step(AsrState(), -0.1)


def test_asr_exhaustive_short_traces():
    for ious in itertools.product([0.3, 0.6], repeat=10):
        trace = asr_trace(ious, k=3, theta=2.0)
        assert list(trace["multiplier"]) == _reference_multipliers(ious, k=3, theta=2.0)


def test_asr_exhaustive_default_parameters():
    for ious in itertools.product([0.3, 0.6], repeat=10):
        assert list(asr_trace(ious)["multiplier"]) == _reference_multipliers(ious)


def test_lora_example():
    adapter = LoraAdapter(np.array([[1.0, 2.0]]), np.array([[0.0], [4.0]]), alpha=1.0)
    out = lora_apply(np.zeros(2), adapter, [1.0, 1.0])
    np.testing.assert_array_equal(out, [0.0, 12.0])


def test_fresh_lora_is_identity():
    adapter = init_lora(8, 5, r=4, alpha=8, seed=1)
    assert adapter.scaling == 2.0
    base = np.arange(5.0)
    np.testing.assert_array_equal(lora_apply(base, adapter, np.ones(8)), base)
    assert np.abs(adapter.A).max() <= 1 / np.sqrt(8)
    with pytest.raises(ValueError):
        init_lora(8, 5, target="conv")


def test_merge_matches_apply():
    rng = np.random.default_rng(2)
    adapter = LoraAdapter(rng.normal(size=(3, 6)), rng.normal(size=(4, 3)), alpha=6.0)
    weight, x = rng.normal(size=(4, 6)), rng.normal(size=6)
    np.testing.assert_allclose(merge_lora(weight, adapter) @ x, lora_apply(weight @ x, adapter, x))


def test_lora_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    adapter = LoraAdapter(rng.normal(size=(2, 5)), rng.normal(size=(3, 2)), alpha=4.0)
    x, upstream = rng.normal(size=5), rng.normal(size=3)
    grad_a, grad_b = lora_grad(adapter, x, upstream)

    def loss_a(a):
        return upstream @ lora_apply(np.zeros(3), LoraAdapter(a, adapter.B, adapter.alpha), x)

    def loss_b(b):
        return upstream @ lora_apply(np.zeros(3), LoraAdapter(adapter.A, b, adapter.alpha), x)

    assert relative_error(grad_a, numerical_gradient(loss_a, adapter.A)) < 1e-7
    assert relative_error(grad_b, numerical_gradient(loss_b, adapter.B)) < 1e-7


def _window(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    geometry = SensorGeometry(64, 64)
    return EventStream.from_arrays(
        np.arange(n), rng.integers(0, 64, n), rng.integers(0, 64, n), rng.integers(0, 2, n), geometry
    )


def test_template_augment_levels():
    window = _window()
    templates = template_augment(window, 4, seed=5)
    assert len(templates) == 4
    assert templates[0] == window
    n = len(window)
    for i, template in enumerate(templates):
        keep = 1 - i / 4
        assert abs(len(template) - keep * n) <= 3 * np.sqrt(n * keep * (1 - keep)) + 1
    # sparser templates are subsets of denser ones
    for dense, sparse in zip(templates[:-1], templates[1:]):
        assert set(sparse.t) <= set(dense.t)


def test_template_augment_deterministic():
    window = _window(seed=1)
    a = template_augment(window, 3, seed=7)
    b = template_augment(window, 3, seed=7)
    assert all(x == y for x, y in zip(a, b))


def test_template_augment_errors():
    with pytest.raises(EmptyWindow):
        template_augment(EventStream.empty(), 4)
    with pytest.raises(ValueError):
        template_augment(_window(), 0)


def test_consistency_examples():
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert consistency_loss([a, b], normalize=False).value == pytest.approx(1.0)
    assert consistency_loss([a, a, a]).value == 0.0
    with pytest.raises(LengthMismatch):
        consistency_loss([a])


def test_consistency_permutation_invariant():
    maps = list(np.random.default_rng(8).normal(size=(4, 3, 3)))
    value = consistency_loss(maps).value
    assert consistency_loss(maps[::-1]).value == pytest.approx(value)
    assert consistency_loss([maps[2], maps[0], maps[3], maps[1]]).value == pytest.approx(value)


@pytest.mark.parametrize("normalize", [True, False])
def test_consistency_gradient(normalize):
    rng = np.random.default_rng(9)
    for _ in range(100):
        maps = rng.normal(size=(3, 4, 4))
        assert check_gradient(lambda m: consistency_loss(list(m), normalize), maps) < 1e-6


def test_pseudo_label_peaks_on_box_cell():
    box = np.array([5 * 16 - 16, 3 * 16 - 16, 48, 48], dtype=float)
    heat = pseudo_label_heatmap(box, 16, (16, 16))
    assert heat[3, 5] == 1.0
    assert heat.max() == 1.0


def test_base_tracker_follows_stationary_target():
    video = make_toy_video(seed=0)
    boxes, multipliers = track_video(video.base, None, video)
    assert boxes.shape == (len(video), 4)
    np.testing.assert_allclose(boxes, np.tile(video.init_box.as_array(), (len(video), 1)))
    np.testing.assert_array_equal(multipliers, 1.0)


def test_ttt_zero_epochs_matches_base():
    video = make_toy_video(seed=1)
    result = ttt_schedule(video, {"epochs": 0})
    assert len(result.log) == 1
    np.testing.assert_array_equal(result.adapter.B, 0.0)
    base_boxes, _ = track_video(video.base, None, video)
    tuned_boxes, _ = track_video(video.base, result.adapter, video)
    np.testing.assert_array_equal(base_boxes, tuned_boxes)


def test_ttt_leaves_base_untouched():
    video = make_toy_video(seed=2)
    weight, bias = video.base.weight.copy(), video.base.bias.copy()
    result = ttt_schedule(video)
    np.testing.assert_array_equal(video.base.weight, weight)
    np.testing.assert_array_equal(video.base.bias, bias)
    assert np.abs(result.adapter.B).max() > 0
    assert len(result.pseudo_labels) == 5


def test_ttt_reduces_tracking_loss():
    improved = 0
    for seed in range(20):
        log = ttt_schedule(make_toy_video(seed=seed), seed=seed).log
        assert list(log["epoch"]) == list(range(6))
        if log["total"].iloc[-1] <= 0.9 * log["total"].iloc[0]:
            improved += 1
    assert improved >= 18


def test_one_ttt_epoch_does_not_increase_loss():
    for seed in range(20):
        log = ttt_schedule(make_toy_video(seed=seed), {"epochs": 1}, seed=seed).log
        assert log["total"].iloc[1] <= log["total"].iloc[0]


def test_ttt_needs_enough_frames():
    with pytest.raises(VideoTooShort):
        ttt_schedule(make_toy_video(n_frames=5), {"n_frames": 5})
    with pytest.raises(ValueError):
        ttt_schedule(make_toy_video(), {"lr": 0.0})
