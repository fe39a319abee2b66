import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from evkd.errors import ShapeMismatch
from evkd.events import EventStream, SensorGeometry
from evkd.geometry import Box
from evkd.losses import gaussian_heatmap

logger = logging.getLogger(__name__)

DEFAULT_TOY_PARAMS = {
    "in_features": 64,
    "map_dims": (16, 16),
    "cell_px": 16,
}


@dataclass
class ToyParams:
    """Linear score-map producer: logits = weight @ patch + bias, reshaped to map_dims."""

    weight: np.ndarray
    bias: np.ndarray
    map_dims: tuple

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        self.map_dims = tuple(int(d) for d in self.map_dims)
        out_cells = self.map_dims[0] * self.map_dims[1]
        if self.weight.ndim != 2 or self.weight.shape[0] != out_cells or self.bias.size != out_cells:
            raise ShapeMismatch(
                f"weight {self.weight.shape} / bias {self.bias.shape} do not match map {self.map_dims}"
            )

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_cells(self):
        return self.weight.shape[0]

    def copy(self):
        return ToyParams(self.weight.copy(), self.bias.copy(), self.map_dims)


def init_toy_params(in_features=64, map_dims=(16, 16), scale=None, seed=0):
    if scale is None:
        scale = 1 / np.sqrt(in_features)
    rng = np.random.default_rng(seed)
    out_cells = map_dims[0] * map_dims[1]
    return ToyParams(rng.normal(0, scale, size=(out_cells, in_features)), np.zeros(out_cells), map_dims)


def _check_patch(params, patch):
    patch = np.asarray(patch, dtype=np.float64).ravel()
    if patch.size != params.in_features:
        raise ShapeMismatch(f"Patch has {patch.size} features, expected {params.in_features}")
    return patch


def toy_forward(params, patch):
    patch = _check_patch(params, patch)
    return (params.weight @ patch + params.bias).reshape(params.map_dims)


def toy_grad(params, patch, upstream):
    """Gradients of a loss w.r.t. weight and bias given its gradient w.r.t. the logits."""
    patch = _check_patch(params, patch)
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    if upstream.size != params.out_cells:
        raise ShapeMismatch(f"Upstream gradient has {upstream.size} cells, expected {params.out_cells}")
    return np.outer(upstream, patch), upstream.copy()


def toy_response(logits):
    return expit(logits)


def save_arrays(arrays, path):
    """Write named fp64 arrays as one flat `<path>.bin` plus a `<path>.json` descriptor."""
    descriptor = {"dtype": "<f8", "arrays": []}
    offset = 0
    chunks = []
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        descriptor["arrays"].append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size
        chunks.append(value.ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(f"{path}.bin", "wb") as f:
        f.write(flat.tobytes())
    with open(f"{path}.json", "w") as f:
        json.dump(descriptor, f, indent=2)


def load_arrays(path):
    with open(f"{path}.json", "r") as f:
        descriptor = json.load(f)
    with open(f"{path}.bin", "rb") as f:
        flat = np.frombuffer(f.read(), dtype=descriptor["dtype"])
    arrays = {}
    for entry in descriptor["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
    return arrays


def save_params(params, path):
    save_arrays(
        {"weight": params.weight, "bias": params.bias, "map_dims": np.array(params.map_dims, float)},
        path,
    )


def load_params(path):
    arrays = load_arrays(path)
    return ToyParams(arrays["weight"], arrays["bias"], tuple(int(d) for d in arrays["map_dims"]))


def template_features(stream, reference_count, in_features=64):
    """Coarse spatial histogram of a template window, flattened to `in_features` values.

    Counts are scaled by in_features / reference_count, so a template keeping a
    fraction rho of the reference events gives features of mean magnitude ~rho.
    """
    side = int(round(np.sqrt(in_features)))
    if side * side != in_features:
        raise ShapeMismatch(f"in_features must be a square number, got {in_features}")
    if reference_count <= 0:
        raise ValueError(f"reference_count must be positive, got {reference_count}")
    geometry = stream.geometry
    col = stream.x.astype(np.int64) * side // geometry.width
    row = stream.y.astype(np.int64) * side // geometry.height
    hist = np.bincount(row * side + col, minlength=in_features).astype(np.float64)
    return hist * in_features / reference_count


@dataclass
class ToyVideo:
    """Stationary-target toy sequence: one search feature vector per frame."""

    patches: np.ndarray
    template_events: EventStream
    base: ToyParams
    init_box: Box
    cell_px: int = 16

    def __len__(self):
        return len(self.patches)


def make_toy_video(
    n_frames=20,
    in_features=64,
    map_dims=(16, 16),
    cell_px=16,
    target_size=48,
    noise=0.1,
    peak=4.0,
    n_template_events=2000,
    seed=0,
):
    rng = np.random.default_rng(seed)
    rows, cols = map_dims
    pattern = rng.normal(size=in_features)
    pattern *= np.sqrt(in_features) / np.linalg.norm(pattern)
    target = (int(rng.integers(2, rows - 2)), int(rng.integers(2, cols - 2)))
    heat = gaussian_heatmap((target[1], target[0]), 1.0, map_dims).ravel()

    weight = rng.normal(0, 0.05 / np.sqrt(in_features), size=(rows * cols, in_features))
    weight += np.outer(peak * heat, pattern) / (pattern @ pattern)
    base = ToyParams(weight, np.zeros(rows * cols), map_dims)

    patches = pattern + noise * rng.normal(size=(n_frames, in_features))

    geometry = SensorGeometry(128, 128)
    xy = rng.normal(64, 16, size=(n_template_events, 2))
    xy = np.clip(np.rint(xy), 0, 127).astype(np.int64)
    t = np.sort(rng.integers(0, 10_000, size=n_template_events))
    p = rng.integers(0, 2, size=n_template_events)
    events = EventStream.from_arrays(t, xy[:, 0], xy[:, 1], p, geometry=geometry)

    init_box = Box.from_center(
        (target[1] + 0.5) * cell_px, (target[0] + 0.5) * cell_px, target_size, target_size
    )
    logger.debug(f"Toy video with target cell {target}, {n_frames} frames")
    return ToyVideo(patches, events, base, init_box, cell_px)


def save_toy_video(video, path):
    stream = video.template_events
    np.savez(
        path,
        patches=video.patches,
        t=stream.t,
        x=stream.x,
        y=stream.y,
        p=stream.p,
        geometry=np.array([stream.geometry.width, stream.geometry.height]),
        weight=video.base.weight,
        bias=video.base.bias,
        map_dims=np.array(video.base.map_dims),
        init_box=video.init_box.as_array(),
        cell_px=np.array(video.cell_px),
    )


def load_toy_video(path):
    with np.load(path) as data:
        geometry = SensorGeometry(*(int(v) for v in data["geometry"]))
        events = EventStream.from_arrays(data["t"], data["x"], data["y"], data["p"], geometry=geometry)
        base = ToyParams(data["weight"], data["bias"], tuple(int(d) for d in data["map_dims"]))
        return ToyVideo(
            data["patches"].copy(), events, base, Box(*data["init_box"]), int(data["cell_px"])
        )
