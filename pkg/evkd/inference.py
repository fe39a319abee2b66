import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from evkd.errors import EmptyWindow, LengthMismatch, OutOfRange, ShapeMismatch, VideoTooShort
from evkd.fourier import softmax2d, softmax2d_backward
from evkd.geometry import Box, iou
from evkd.losses import LossReport, gaussian_heatmap, gwf_loss, size_adaptive_sigma
from evkd.toy import template_features, toy_response

logger = logging.getLogger(__name__)

DEFAULT_ASR_PARAMS = {"tau": 0.5, "k": 7, "theta": 1.5}
DEFAULT_TTT_PARAMS = {
    "n_frames": 5,
    "epochs": 5,
    "lr": 0.01,
    "weight_decay": 0.1,
    "n_templates": 4,
    "rank": 16,
    "alpha": 32,
    "target": "mlp",
    "consistency_weight": 1.0,
}
LORA_TARGETS = ("mlp", "attn.proj", "attn.qkv")
SEARCH_RADIUS_CELLS = 4


@dataclass(frozen=True)
class AsrState:
    consecutive_failures: int = 0
    expanded: bool = False


def asr_step(state, iou_prev, tau=0.5, k=7, theta=1.5):
    """Advance the adaptive search region controller by one frame.

    Returns the new state and the crop multiplier for the next search region,
    theta while expanded and 1.0 otherwise. Expansion holds until an IoU of at
    least tau is seen.
    """
    if not 0.0 <= iou_prev <= 1.0:
        raise OutOfRange(f"IoU must lie in [0, 1], got {iou_prev}")
    if iou_prev < tau:
        failures = state.consecutive_failures + 1
        new_state = AsrState(failures, state.expanded or failures >= k)
    else:
        new_state = AsrState(0, False)
    return new_state, (theta if new_state.expanded else 1.0)


def asr_trace(ious, tau=0.5, k=7, theta=1.5):
    state = AsrState()
    rows = []
    for step, value in enumerate(ious, start=1):
        state, multiplier = asr_step(state, float(value), tau, k, theta)
        rows.append(
            {
                "step": step,
                "iou": float(value),
                "failures": state.consecutive_failures,
                "multiplier": multiplier,
            }
        )
    return pd.DataFrame(rows, columns=["step", "iou", "failures", "multiplier"])


@dataclass
class LoraAdapter:
    """Low-rank correction (alpha / r) * B @ A on a frozen linear layer."""

    A: np.ndarray
    B: np.ndarray
    alpha: float
    target: str = "mlp"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeMismatch(f"Incompatible adapter factors A {self.A.shape}, B {self.B.shape}")
        if self.A.shape[0] < 1:
            raise ValueError("Adapter rank must be >= 1")
        if self.target not in LORA_TARGETS:
            raise ValueError(f"Unknown adapter target {self.target!r}, expected one of {LORA_TARGETS}")

    @property
    def r(self):
        return self.A.shape[0]

    @property
    def scaling(self):
        return self.alpha / self.r

    def copy(self):
        return LoraAdapter(self.A.copy(), self.B.copy(), self.alpha, self.target)


def init_lora(d_in, d_out, r=16, alpha=32, target="mlp", seed=0):
    """A from Kaiming-uniform (bound 1/sqrt(d_in)), B zero, so the adapter starts as identity."""
    rng = np.random.default_rng(seed)
    bound = 1 / np.sqrt(d_in)
    return LoraAdapter(rng.uniform(-bound, bound, size=(r, d_in)), np.zeros((d_out, r)), alpha, target)


def lora_apply(base_output, adapter, x):
    x = np.asarray(x, dtype=np.float64).ravel()
    base_output = np.asarray(base_output, dtype=np.float64)
    if x.size != adapter.A.shape[1] or base_output.size != adapter.B.shape[0]:
        raise ShapeMismatch(
            f"Adapter {adapter.B.shape[0]}x{adapter.A.shape[1]} cannot map x of size {x.size} "
            f"onto output of size {base_output.size}"
        )
    correction = adapter.scaling * (adapter.B @ (adapter.A @ x))
    return base_output + correction.reshape(base_output.shape)


def lora_grad(adapter, x, upstream):
    """Gradients w.r.t. A and B given the gradient w.r.t. the adapted output."""
    x = np.asarray(x, dtype=np.float64).ravel()
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    grad_b = adapter.scaling * np.outer(upstream, adapter.A @ x)
    grad_a = adapter.scaling * np.outer(adapter.B.T @ upstream, x)
    return grad_a, grad_b


def merge_lora(weight, adapter):
    return np.asarray(weight, dtype=np.float64) + adapter.scaling * adapter.B @ adapter.A


def template_augment(window, n, seed=0):
    """n templates where template i keeps each event with probability 1 - i/n.

    One uniform draw per event is shared by all levels, so sparser templates
    are subsets of denser ones and template 0 is the window itself.
    """
    if n < 1:
        raise ValueError(f"Need at least one template, got n={n}")
    if len(window) == 0:
        raise EmptyWindow("Cannot augment an empty template window")
    draws = np.random.default_rng(seed).random(len(window))
    return [window.subset(draws < 1 - i / n) for i in range(n)]


def consistency_loss(maps, normalize=True):
    """Mean pairwise MSE between maps.

    With normalize=True the maps are logits and are softmax-normalized first;
    otherwise they are taken as probability grids. The gradient is w.r.t. the
    inputs, stacked as (n, M, N).
    """
    if len(maps) < 2:
        raise LengthMismatch(f"Consistency needs at least two maps, got {len(maps)}")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if any(m.shape != maps[0].shape for m in maps):
        raise ShapeMismatch(f"Maps differ in shape: {[m.shape for m in maps]}")
    probs = [softmax2d(m) for m in maps] if normalize else maps
    n = len(probs)
    size = probs[0].size
    pairs = n * (n - 1) / 2
    value = 0.0
    grads = [np.zeros_like(p) for p in probs]
    for i in range(n):
        for j in range(i + 1, n):
            diff = probs[i] - probs[j]
            value += np.mean(diff * diff)
            grads[i] += 2 * diff / size
            grads[j] -= 2 * diff / size
    grads = [g / pairs for g in grads]
    if normalize:
        grads = [softmax2d_backward(g, p) for g, p in zip(grads, probs)]
    return LossReport(float(value / pairs), np.stack(grads))


def adapted_logits(params, adapter, x):
    x = np.asarray(x, dtype=np.float64).ravel()
    logits = params.weight @ x + params.bias
    if adapter is not None:
        logits = lora_apply(logits, adapter, x)
    return logits.reshape(params.map_dims)


def _template_inputs(video, n_templates, seed):
    templates = template_augment(video.template_events, n_templates, seed)
    reference = len(video.template_events)
    return [template_features(t, reference, video.base.in_features) for t in templates]


def _peak_box(logits, previous, cell_px, radius):
    rows, cols = logits.shape
    cx, cy = previous.center
    r0 = min(max(int(cy // cell_px), 0), rows - 1)
    c0 = min(max(int(cx // cell_px), 0), cols - 1)
    rr, cc = np.mgrid[0:rows, 0:cols]
    allowed = (np.abs(rr - r0) <= radius) & (np.abs(cc - c0) <= radius)
    r, c = np.unravel_index(np.argmax(np.where(allowed, logits, -np.inf)), logits.shape)
    return Box.from_center((c + 0.5) * cell_px, (r + 0.5) * cell_px, previous.w, previous.h)


def track_video(params, adapter, video, n_frames=None, asr=None, seed=0):
    """Track the toy target frame by frame from the initial box.

    The search window around the previous box spans SEARCH_RADIUS_CELLS cells,
    scaled by the ASR multiplier driven by consecutive-box IoU. Returns the
    (n, 4) predicted boxes and the multiplier used on each frame.
    """
    asr = {**DEFAULT_ASR_PARAMS, **(asr or {})}
    n = len(video) if n_frames is None else n_frames
    template = _template_inputs(video, 1, seed)[0]
    state = AsrState()
    multiplier = 1.0
    previous = video.init_box
    boxes, multipliers = [], []
    for patch in video.patches[:n]:
        logits = adapted_logits(params, adapter, patch + template)
        box = _peak_box(logits, previous, video.cell_px, SEARCH_RADIUS_CELLS * multiplier)
        boxes.append(box.as_array())
        multipliers.append(multiplier)
        state, multiplier = asr_step(state, iou(previous, box), asr["tau"], asr["k"], asr["theta"])
        previous = box
    return np.array(boxes).reshape(-1, 4), np.array(multipliers)


def pseudo_label_heatmap(box, cell_px, map_dims):
    cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
    sigma = size_adaptive_sigma(box[3] / cell_px, box[2] / cell_px)
    return gaussian_heatmap((cx / cell_px - 0.5, cy / cell_px - 0.5), sigma, map_dims)


def ttt_objective(params, adapter, frame_inputs, target, consistency_weight=1.0):
    """Tracking and consistency losses of one frame plus their gradients w.r.t. A and B.

    frame_inputs[0] is the search input with the full template; every entry
    contributes to the consistency term.
    """
    x0 = frame_inputs[0]
    response = toy_response(adapted_logits(params, adapter, x0))
    tracking = gwf_loss(response, target)
    upstream = tracking.grad * response * (1 - response)
    grad_a, grad_b = lora_grad(adapter, x0, upstream)
    consistency = 0.0
    if len(frame_inputs) >= 2:
        report = consistency_loss([adapted_logits(params, adapter, x) for x in frame_inputs])
        consistency = report.value
        for x, grad in zip(frame_inputs, report.grad):
            ga, gb = lora_grad(adapter, x, consistency_weight * grad)
            grad_a += ga
            grad_b += gb
    return tracking.value, consistency, grad_a, grad_b


def _check_ttt_config(cfg):
    for key in ("n_frames", "n_templates", "rank"):
        if cfg[key] < 1:
            raise ValueError(f"TTT {key} must be >= 1, got {cfg[key]}")
    if cfg["epochs"] < 0 or cfg["lr"] <= 0 or cfg["weight_decay"] < 0:
        raise ValueError(f"Invalid TTT optimiser settings {cfg}")


@dataclass
class TttResult:
    adapter: LoraAdapter
    log: pd.DataFrame
    pseudo_labels: np.ndarray


def ttt_schedule(video, cfg=None, adapter=None, seed=0):
    """Test-time tuning of a LoRA adapter on the first frames of a toy video.

    Base tracking on the first n_frames gives the pseudo-labels. Each epoch
    takes one gradient step per pseudo-labelled frame on the adapter only,
    with decoupled weight decay. Log row e holds the mean losses after e
    epochs. The base parameters are never written.
    """
    cfg = {**DEFAULT_TTT_PARAMS, **(cfg or {})}
    _check_ttt_config(cfg)
    n = cfg["n_frames"]
    if len(video) <= n:
        raise VideoTooShort(f"Video has {len(video)} frames, TTT needs more than {n}")
    base = video.base
    if adapter is None:
        adapter = init_lora(
            base.in_features, base.out_cells, cfg["rank"], cfg["alpha"], cfg["target"], seed
        )
    current = adapter.copy()

    templates = _template_inputs(video, cfg["n_templates"], seed)
    inputs = [[patch + t for t in templates] for patch in video.patches[:n]]
    pseudo_labels, _ = track_video(base, None, video, n_frames=n, seed=seed)
    targets = [pseudo_label_heatmap(box, video.cell_px, base.map_dims) for box in pseudo_labels]

    lr, decay, weight = cfg["lr"], cfg["weight_decay"], cfg["consistency_weight"]
    rows = []
    for epoch in range(cfg["epochs"] + 1):
        losses = [ttt_objective(base, current, x, t, weight)[:2] for x, t in zip(inputs, targets)]
        tracking, consistency = np.mean(losses, axis=0)
        rows.append(
            {
                "epoch": epoch,
                "tracking_loss": tracking,
                "consistency_loss": consistency,
                "total": tracking + weight * consistency,
            }
        )
        logger.info(f"TTT epoch {epoch}: tracking {tracking:.4f}, consistency {consistency:.6f}")
        if epoch == cfg["epochs"]:
            break
        for x, t in zip(inputs, targets):
            _, _, grad_a, grad_b = ttt_objective(base, current, x, t, weight)
            current = LoraAdapter(
                current.A * (1 - lr * decay) - lr * grad_a,
                current.B * (1 - lr * decay) - lr * grad_b,
                current.alpha,
                current.target,
            )
    return TttResult(current, pd.DataFrame(rows), pseudo_labels)


def write_ttt_log(log, path):
    log.to_csv(path, index=False, float_format="%.4f")
