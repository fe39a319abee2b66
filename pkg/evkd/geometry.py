import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from evkd.errors import DegenerateBox, NonDivisible

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBox(f"Box needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, w, h)

    @property
    def center(self):
        return (self.x + self.w / 2, self.y + self.h / 2)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def scaled(self, s):
        return Box(self.x * s, self.y * s, self.w * s, self.h * s)


@dataclass(frozen=True)
class CropSpec:
    context_factor: float
    out_size: int
    expansion: float = 1.0

    def __post_init__(self):
        if self.context_factor <= 0 or self.out_size <= 0:
            raise ValueError(f"Invalid crop spec {self}")
        if self.expansion < 1.0:
            raise ValueError(f"Crop expansion must be >= 1.0, got {self.expansion}")

    def expanded(self, expansion):
        return CropSpec(self.context_factor, self.out_size, expansion)


TEMPLATE_CROP = CropSpec(context_factor=2.0, out_size=128)
SEARCH_CROP = CropSpec(context_factor=4.0, out_size=256)


def crop_side(box, spec):
    return spec.context_factor * spec.expansion * np.sqrt(box.w * box.h)


def crop_region(image, box, spec):
    """Square crop around the box center resampled to spec.out_size.

    Output pixel j samples the image at edge coordinate x0 + (j + 0.5) * side / out_size,
    so crops compose exactly on linear fields. Outside the image reads as zero.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("Cannot crop an empty image")
    side = crop_side(box, spec)
    cx, cy = box.center
    out = spec.out_size
    # -0.5 converts edge coordinates to the pixel-center coordinates of map_coordinates
    offsets = (np.arange(out) + 0.5) * side / out - 0.5
    rows, cols = np.meshgrid(cy - side / 2 + offsets, cx - side / 2 + offsets, indexing="ij")
    if image.ndim == 2:
        return ndi.map_coordinates(image, [rows, cols], order=1, mode="grid-constant", cval=0.0)
    channels = [
        ndi.map_coordinates(image[:, :, c], [rows, cols], order=1, mode="grid-constant", cval=0.0)
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1)


def box_to_crop_coords(box, crop_box, spec):
    """Express `box` in the pixel frame of the patch cropped around `crop_box`."""
    side = crop_side(crop_box, spec)
    cx, cy = crop_box.center
    scale = spec.out_size / side
    return Box(
        (box.x - (cx - side / 2)) * scale,
        (box.y - (cy - side / 2)) * scale,
        box.w * scale,
        box.h * scale,
    )


def _as_boxes(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes[None, :] if boxes.ndim == 1 else boxes


def box_iou(a, b):
    """IoU of matching rows of two (N, 4) x,y,w,h arrays."""
    a, b = _as_boxes(a), _as_boxes(b)
    left = np.maximum(a[:, 0], b[:, 0])
    right = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    top = np.maximum(a[:, 1], b[:, 1])
    bottom = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    intersection = np.maximum(0, right - left) * np.maximum(0, bottom - top)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - intersection
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, intersection / union, 0.0)
    return np.clip(iou, 0.0, 1.0)


def box_centers(boxes):
    boxes = _as_boxes(boxes)
    return np.column_stack([boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2])


def box_center_error(pred, gt):
    return np.linalg.norm(box_centers(pred) - box_centers(gt), axis=1)


def box_normalized_center_error(pred, gt):
    gt = _as_boxes(gt)
    offsets = (box_centers(pred) - box_centers(gt)) / gt[:, 2:4]
    return np.linalg.norm(offsets, axis=1)


def iou(a, b):
    return float(box_iou(a.as_array(), b.as_array())[0])


def center_error(pred, gt):
    return float(box_center_error(pred.as_array(), gt.as_array())[0])


def normalized_center_error(pred, gt):
    return float(box_normalized_center_error(pred.as_array(), gt.as_array())[0])


def patch_token_layout(side, patch=16):
    """Tokens per axis and in total when a `side`-pixel square is cut into patches."""
    if patch <= 0 or side <= 0 or side % patch:
        raise NonDivisible(f"Patch size {patch} does not tile a {side} px side")
    per_axis = side // patch
    return per_axis, per_axis * per_axis
