import numpy as np
import pytest

from evkd.errors import DegenerateBox, NonDivisible
from evkd.geometry import (
    SEARCH_CROP,
    TEMPLATE_CROP,
    Box,
    CropSpec,
    box_iou,
    box_to_crop_coords,
    center_error,
    crop_region,
    crop_side,
    iou,
    normalized_center_error,
    patch_token_layout,
)


def _linear_field(height, width):
    rows, cols = np.mgrid[0:height, 0:width]
    return 2.0 * rows + 3.0 * cols + 1.0


def test_degenerate_box():
    with pytest.raises(DegenerateBox):
        Box(0, 0, 0, 5)
    with pytest.raises(DegenerateBox):
        Box(0, 0, 5, -1)


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(10, 10, 2, 2)) == 0.0
    assert iou(a, Box(1, 1, 2, 2)) == pytest.approx(1 / 7)


def test_iou_symmetric_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 30, 2))
        b = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 30, 2))
        s = rng.uniform(0.1, 10)
        value = iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(iou(b, a))
        assert value == pytest.approx(iou(a.scaled(s), b.scaled(s)))


def test_box_iou_vectorised_matches_scalar():
    boxes = np.array([[0, 0, 2, 2], [1, 1, 2, 2], [5, 5, 1, 1]], dtype=float)
    other = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [0, 0, 1, 1]], dtype=float)
    expected = [iou(Box(*a), Box(*b)) for a, b in zip(boxes, other)]
    np.testing.assert_allclose(box_iou(boxes, other), expected)


def test_center_errors():
    gt = Box(0, 0, 10, 10)
    assert center_error(gt, gt) == 0.0
    assert normalized_center_error(gt, gt) == 0.0
    pred = Box(3, 4, 10, 10)
    assert center_error(pred, gt) == pytest.approx(5.0)
    assert normalized_center_error(pred, gt) == pytest.approx(0.5)


def test_normalized_center_error_scale_invariant():
    pred, gt = Box(7, 2, 12, 30), Box(3, 4, 20, 10)
    for s in (0.5, 2.0, 13.0):
        assert normalized_center_error(pred.scaled(s), gt.scaled(s)) == pytest.approx(
            normalized_center_error(pred, gt)
        )
    # pixel error scales with the boxes
    assert center_error(pred.scaled(2.0), gt.scaled(2.0)) == pytest.approx(2 * center_error(pred, gt))


def test_patch_token_layout():
    assert patch_token_layout(128, 16) == (8, 64)
    assert patch_token_layout(256, 16) == (16, 256)
    with pytest.raises(NonDivisible):
        patch_token_layout(100, 16)


def test_crop_presets():
    assert (TEMPLATE_CROP.context_factor, TEMPLATE_CROP.out_size) == (2.0, 128)
    assert (SEARCH_CROP.context_factor, SEARCH_CROP.out_size) == (4.0, 256)
    with pytest.raises(ValueError):
        CropSpec(2.0, 128, expansion=0.5)


def test_identity_crop():
    image = np.random.default_rng(1).normal(size=(64, 64))
    box = Box.from_center(32, 32, 16, 16)
    patch = crop_region(image, box, CropSpec(2.0, 32))
    assert patch.shape == (32, 32)
    np.testing.assert_allclose(patch, image[16:48, 16:48], atol=1e-12)


def test_crop_outside_reads_zero():
    image = np.ones((32, 32))
    patch = crop_region(image, Box.from_center(0, 0, 8, 8), CropSpec(2.0, 16))
    np.testing.assert_array_equal(patch[:8, :], 0.0)
    np.testing.assert_array_equal(patch[:, :8], 0.0)
    np.testing.assert_allclose(patch[8:, 8:], 1.0)


def test_crop_expansion_scales_side():
    box = Box(10, 20, 30, 12)
    base = CropSpec(4.0, 256)
    assert crop_side(box, base.expanded(1.5)) == pytest.approx(1.5 * crop_side(box, base))


def test_crop_composition_on_linear_field():
    image = _linear_field(400, 400)
    box = Box.from_center(200.0, 210.0, 20.0, 16.0)
    e, e_prime = 1.2, 1.5
    wide = CropSpec(2.0, 32, expansion=e * e_prime)
    narrow = CropSpec(2.0, 32, expansion=e)
    first = crop_region(image, box, wide)
    inner_box = box_to_crop_coords(box, box, wide)
    composed = crop_region(first, inner_box, narrow)
    direct = crop_region(image, box, narrow)
    np.testing.assert_allclose(composed, direct, atol=1e-6)


def test_crop_multichannel():
    image = np.stack([_linear_field(50, 60)] * 3, axis=-1)
    patch = crop_region(image, Box.from_center(30, 25, 10, 10), CropSpec(2.0, 20))
    assert patch.shape == (20, 20, 3)
    np.testing.assert_allclose(patch[..., 0], patch[..., 2])
