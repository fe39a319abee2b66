import logging
import math
from dataclasses import dataclass

import numpy as np

from evkd.errors import BadSigma, BadTemperature, NonMultiple, OutOfRange, ShapeMismatch

logger = logging.getLogger(__name__)

GWF_EPS = 1e-7
DEFAULT_LOSS_WEIGHTS = {
    "focal": 1.0,
    "l1": 5.0,
    "giou": 2.0,
    "sim": 1.0,
    "feat": 1.0,
    "res": 1.0,
    "tft": 1.0,
}
MAIN_LOSSES = ("focal", "l1", "giou")
KD_LOSSES = ("sim", "feat", "res", "tft")


@dataclass
class LossReport:
    value: float
    grad: np.ndarray


def _repeat_factor(n, target_tokens):
    if n <= 0 or target_tokens < n or target_tokens % n:
        raise NonMultiple(f"{target_tokens} tokens is not a multiple of {n}")
    return target_tokens // n


def repeat_align(student, target_tokens, mode="tile"):
    """Repeat a similarity matrix (L, L) or feature block (B, L, C) up to `target_tokens`.

    mode="tile" repeats the whole block, out[i] = in[i mod L]; mode="block"
    repeats each token in place, out[i] = in[i // f].
    """
    x = np.asarray(student, dtype=np.float64)
    if mode not in ("tile", "block"):
        raise ValueError(f"Unknown repeat mode {mode!r}")
    if x.ndim == 2:
        if x.shape[0] != x.shape[1]:
            raise ShapeMismatch(f"Similarity matrix must be square, got {x.shape}")
        f = _repeat_factor(x.shape[0], target_tokens)
        if mode == "tile":
            return np.tile(x, (f, f))
        return np.repeat(np.repeat(x, f, axis=0), f, axis=1)
    if x.ndim == 3:
        f = _repeat_factor(x.shape[1], target_tokens)
        if mode == "tile":
            return np.tile(x, (1, f, 1))
        return np.repeat(x, f, axis=1)
    raise ShapeMismatch(f"Expected a (L, L) matrix or (B, L, C) block, got shape {x.shape}")


def repeat_fold(grad, n, mode="tile"):
    """Adjoint of repeat_align: sums the gradient of every repeated copy back onto n tokens."""
    g = np.asarray(grad, dtype=np.float64)
    if g.ndim == 2:
        f = _repeat_factor(n, g.shape[0])
        if mode == "tile":
            return g.reshape(f, n, f, n).sum(axis=(0, 2))
        return g.reshape(n, f, n, f).sum(axis=(1, 3))
    batch, tokens, channels = g.shape
    f = _repeat_factor(n, tokens)
    if mode == "tile":
        return g.reshape(batch, f, n, channels).sum(axis=1)
    return g.reshape(batch, n, f, channels).sum(axis=2)


def head_average(attention, layer=-1):
    """Single (L, L) similarity matrix from (layers, heads, L, L) or (heads, L, L) attention."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 4:
        attention = attention[layer]
    if attention.ndim != 3:
        raise ShapeMismatch(f"Expected (heads, L, L) attention, got {attention.shape}")
    return attention.mean(axis=0)


def sim_kd_loss(student, teacher, mode="tile", normalize=False):
    """Squared distance between the repeated student and the teacher similarity matrices.

    The gradient is taken w.r.t. the student before repetition. With
    normalize=True the sum becomes a mean over the teacher's entries.
    """
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.ndim != 2 or teacher.ndim != 2 or teacher.shape[0] != teacher.shape[1]:
        raise ShapeMismatch(f"Cannot compare similarity matrices {student.shape} and {teacher.shape}")
    aligned = repeat_align(student, teacher.shape[0], mode)
    diff = aligned - teacher
    scale = 1.0 / diff.size if normalize else 1.0
    value = scale * np.sum(diff * diff)
    grad = repeat_fold(2.0 * scale * diff, student.shape[0], mode)
    return LossReport(float(value), grad)


def feat_kd_loss(student, teacher, mode="tile"):
    """Mean squared error between repeated student features and teacher features."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.ndim != 3 or teacher.ndim != 3:
        raise ShapeMismatch(f"Features must be (B, L, C), got {student.shape} and {teacher.shape}")
    if student.shape[0] != teacher.shape[0] or student.shape[2] != teacher.shape[2]:
        raise ShapeMismatch(f"Batch/channel mismatch between {student.shape} and {teacher.shape}")
    aligned = repeat_align(student, teacher.shape[1], mode)
    diff = aligned - teacher
    n = diff.size
    value = np.sum(diff * diff) / n
    grad = repeat_fold(2.0 * diff / n, student.shape[1], mode)
    return LossReport(float(value), grad)


def gaussian_radius(height, width, min_overlap=0.7):
    """Largest corner perturbation keeping a box of this size above `min_overlap` IoU.

    Three perturbations bound the radius: both corners shifted the same way,
    the box shrunk on every side and the box grown on every side.
    """
    area = width * height
    # shift: (w - r)(h - r) / (2wh - (w - r)(h - r)) = o
    b1 = height + width
    c1 = area * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1**2 - 4 * c1)) / 2
    # shrink: (w - 2r)(h - 2r) / wh = o
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * area
    r2 = (b2 - math.sqrt(b2**2 - 16 * c2)) / 8
    # grow: wh / ((w + 2r)(h + 2r)) = o
    a3 = 4 * min_overlap
    b3 = 2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * area
    r3 = (-b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def size_adaptive_sigma(height, width, min_overlap=0.7):
    radius = max(0, int(gaussian_radius(height, width, min_overlap)))
    return (2 * radius + 1) / 6


def gaussian_heatmap(center, sigma, dims):
    """Gaussian target of peak 1 at `center` = (x, y) on an (Hm, Wm) grid."""
    if not sigma > 0:
        raise BadSigma(f"Gaussian sigma must be positive, got {sigma}")
    height, width = dims
    cx, cy = center
    if not (0 <= cx <= width - 1 and 0 <= cy <= height - 1):
        raise OutOfRange(f"Center {center} outside a {height}x{width} map")
    ys, xs = np.mgrid[0:height, 0:width]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def gwf_loss(pred, target, alpha=2, beta=4, eps=GWF_EPS):
    """Gaussian weighted focal loss summed over the map.

    Cells where the target is exactly 1 use the positive branch, all others the
    Gaussian-weighted negative branch. The prediction is clamped to [eps, 1 - eps];
    clamped cells get zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"Prediction {pred.shape} and target {target.shape} differ")
    p = np.clip(pred, eps, 1 - eps)
    positive = target == 1
    neg_weight = (1 - target) ** beta
    log_p = np.log(p)
    log_q = np.log1p(-p)

    pos_term = (1 - p) ** alpha * log_p
    neg_term = neg_weight * p**alpha * log_q
    value = -np.sum(np.where(positive, pos_term, neg_term))

    pos_grad = alpha * (1 - p) ** (alpha - 1) * log_p - (1 - p) ** alpha / p
    neg_grad = -neg_weight * (alpha * p ** (alpha - 1) * log_q - p**alpha / (1 - p))
    grad = np.where(positive, pos_grad, neg_grad)
    grad = np.where((pred >= eps) & (pred <= 1 - eps), grad, 0.0)
    return LossReport(float(value), grad)


def response_kd_loss(student_map, teacher_map, tau=2.0, alpha=2, beta=4, eps=GWF_EPS):
    """GWF loss between temperature-scaled student and teacher response maps."""
    if not tau > 0:
        raise BadTemperature(f"Temperature must be positive, got {tau}")
    report = gwf_loss(
        np.asarray(student_map, dtype=np.float64) / tau,
        np.asarray(teacher_map, dtype=np.float64) / tau,
        alpha,
        beta,
        eps,
    )
    return LossReport(report.value, report.grad / tau)


def l1_loss(pred_box, gt_box):
    return float(np.sum(np.abs(np.asarray(pred_box, float) - np.asarray(gt_box, float))))


def giou_loss(pred_box, gt_box):
    """1 - generalized IoU of two x, y, w, h boxes."""
    px, py, pw, ph = np.asarray(pred_box, dtype=np.float64)
    gx, gy, gw, gh = np.asarray(gt_box, dtype=np.float64)
    iw = max(0.0, min(px + pw, gx + gw) - max(px, gx))
    ih = max(0.0, min(py + ph, gy + gh) - max(py, gy))
    intersection = iw * ih
    union = pw * ph + gw * gh - intersection
    hull = (max(px + pw, gx + gw) - min(px, gx)) * (max(py + ph, gy + gh) - min(py, gy))
    iou = intersection / union if union > 0 else 0.0
    giou = iou - (hull - union) / hull if hull > 0 else iou
    return float(1.0 - giou)


def _components(values, names):
    if isinstance(values, dict):
        return [float(values.get(name, 0.0)) for name in names]
    values = [float(v) for v in values]
    if len(values) != len(names):
        raise ValueError(f"Expected {len(names)} loss components ({', '.join(names)}), got {len(values)}")
    return values


def total_loss(main, kd, weights=None):
    """Weighted sum of the main tracking losses and the four distillation losses."""
    if weights is None:
        weights = DEFAULT_LOSS_WEIGHTS
    weights = {**DEFAULT_LOSS_WEIGHTS, **weights}
    names = MAIN_LOSSES + KD_LOSSES
    values = _components(main, MAIN_LOSSES) + _components(kd, KD_LOSSES)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"Non-finite loss component in {dict(zip(names, values))}")
    if any(weights[name] < 0 for name in names):
        raise ValueError(f"Loss weights must be non-negative, got {weights}")
    return sum(weights[name] * value for name, value in zip(names, values))
