import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd

from evkd.errors import EmptyStream, MalformedRecord, NonDivisible, OutOfRange

logger = logging.getLogger(__name__)

ON = 1
OFF = 0
EVENTVOT_WIDTH = 1280
EVENTVOT_HEIGHT = 720
EVENTVOT_FRAMES = 499

CSV_HEADER = "t,x,y,p"
BIN_MAGIC = b"EVKD"
# both dtypes are packed: 16-byte header, 13-byte records
BIN_HEADER = np.dtype(
    [("magic", "S4"), ("width", "<u2"), ("height", "<u2"), ("count", "<u8")]
)
BIN_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

ON_COLOR = (255, 0, 0)
OFF_COLOR = (0, 0, 255)
BACKGROUND_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class SensorGeometry:
    width: int = EVENTVOT_WIDTH
    height: int = EVENTVOT_HEIGHT

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Sensor geometry must be positive, got {self.width}x{self.height}")


class EventPoint(NamedTuple):
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Events of one recording as parallel arrays, sorted by timestamp.

    Use `from_arrays` to build one from unchecked data; the constructor assumes
    the arrays are already validated and sorted.
    """

    def __init__(self, geometry, t, x, y, p):
        self.geometry = geometry
        self.t = t
        self.x = x
        self.y = y
        self.p = p

    @classmethod
    def from_arrays(cls, t, x, y, p, geometry=None):
        if geometry is None:
            geometry = SensorGeometry()
        t = np.asarray(t, dtype=np.int64).ravel()
        x = np.asarray(x, dtype=np.int64).ravel()
        y = np.asarray(y, dtype=np.int64).ravel()
        p = np.asarray(p, dtype=np.int64).ravel()
        if not (len(t) == len(x) == len(y) == len(p)):
            raise MalformedRecord("Event field arrays differ in length")
        if len(t) > 0:
            if t.min() < 0:
                raise OutOfRange(f"Negative timestamp {t.min()}")
            bad = (x < 0) | (x >= geometry.width) | (y < 0) | (y >= geometry.height)
            if bad.any():
                i = int(np.argmax(bad))
                raise OutOfRange(
                    f"Event {i} at ({x[i]}, {y[i]}) outside {geometry.width}x{geometry.height}"
                )
            if not np.isin(p, (OFF, ON)).all():
                raise MalformedRecord("Polarity must be 0 (OFF) or 1 (ON)")
            if np.any(np.diff(t) < 0):
                logger.warning("Event timestamps out of order, applying a stable sort")
                order = np.argsort(t, kind="stable")
                t, x, y, p = t[order], x[order], y[order], p[order]
        return cls(
            geometry,
            t,
            x.astype(np.int32),
            y.astype(np.int32),
            p.astype(np.uint8),
        )

    @classmethod
    def empty(cls, geometry=None):
        return cls.from_arrays([], [], [], [], geometry=geometry)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return EventPoint(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def events(self):
        return list(self)

    @property
    def t_min(self):
        if len(self) == 0:
            raise EmptyStream("Stream has no events")
        return int(self.t[0])

    @property
    def t_max(self):
        if len(self) == 0:
            raise EmptyStream("Stream has no events")
        return int(self.t[-1])

    def subset(self, mask_or_index):
        return EventStream(
            self.geometry,
            self.t[mask_or_index],
            self.x[mask_or_index],
            self.y[mask_or_index],
            self.p[mask_or_index],
        )

    def window(self, t_start, t_end):
        """Events with t_start <= t < t_end."""
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="left")
        return self.subset(slice(lo, hi))


@dataclass
class EventFrame:
    window: tuple
    counts_on: np.ndarray
    counts_off: np.ndarray

    @property
    def total(self):
        return int(self.counts_on.sum() + self.counts_off.sum())


@dataclass
class VoxelGrid:
    cell_size: tuple
    dims: tuple
    counts: np.ndarray
    t_min: int = 0

    @property
    def total(self):
        return int(self.counts.sum())


def _check_format(fmt):
    fmt = fmt.lower()
    if fmt not in ("csv", "bin"):
        raise ValueError(f"Unknown event format {fmt!r}, expected 'csv' or 'bin'")
    return fmt


def _parse_csv(raw, geometry):
    try:
        text = raw.decode("ascii") if isinstance(raw, (bytes, bytearray)) else raw
    except UnicodeDecodeError as e:
        raise MalformedRecord(f"CSV event data is not ASCII: {e}")
    if not text.strip():
        return EventStream.empty(geometry)
    try:
        df = pd.read_csv(
            io.StringIO(text),
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
        )
    except pd.errors.ParserError as e:
        raise MalformedRecord(f"Inconsistent field count: {e}")
    if df.shape[1] != 4:
        raise MalformedRecord(f"Expected 4 fields per event, found {df.shape[1]}")
    # short rows come back as NaN in the trailing columns
    df = df.fillna("").apply(lambda col: col.str.strip())
    if ",".join(df.iloc[0].str.lower()) == CSV_HEADER:
        df = df.iloc[1:]
    numeric = df.apply(lambda col: col.str.fullmatch(r"-?\d+")).fillna(False).to_numpy(dtype=bool)
    if not numeric.all():
        row = int(np.argmax(~numeric.all(axis=1)))
        raise MalformedRecord(f"Non-integer field in event record {row}: {list(df.iloc[row])}")
    try:
        values = df.to_numpy().astype(np.int64)
    except (ValueError, OverflowError) as e:
        raise MalformedRecord(f"Event field out of integer range: {e}")
    if len(values) == 0:
        return EventStream.empty(geometry)
    return EventStream.from_arrays(
        values[:, 0], values[:, 1], values[:, 2], values[:, 3], geometry=geometry
    )


def _parse_bin(raw, geometry):
    raw = bytes(raw)
    if len(raw) == 0:
        return EventStream.empty(geometry)
    if len(raw) < BIN_HEADER.itemsize:
        raise MalformedRecord(f"Truncated BIN header ({len(raw)} bytes)")
    header = np.frombuffer(raw, dtype=BIN_HEADER, count=1)[0]
    if header["magic"] != BIN_MAGIC:
        raise MalformedRecord(f"Bad magic {header['magic']!r}, expected {BIN_MAGIC!r}")
    count = int(header["count"])
    expected = BIN_HEADER.itemsize + count * BIN_RECORD.itemsize
    if len(raw) != expected:
        raise MalformedRecord(
            f"BIN payload is {len(raw)} bytes, header announces {count} events ({expected} bytes)"
        )
    file_geometry = SensorGeometry(int(header["width"]), int(header["height"]))
    if geometry is not None and geometry != file_geometry:
        logger.debug(f"BIN header geometry {file_geometry} overrides {geometry}")
    records = np.frombuffer(raw, dtype=BIN_RECORD, count=count, offset=BIN_HEADER.itemsize)
    if count and records["t"].max() > np.iinfo(np.int64).max:
        raise OutOfRange("Timestamp exceeds the signed 64-bit range")
    return EventStream.from_arrays(
        records["t"].astype(np.int64),
        records["x"],
        records["y"],
        records["p"],
        geometry=file_geometry,
    )


def parse_event_stream(raw, fmt="csv", geometry=None):
    """Parse raw CSV or BIN event bytes into a sorted EventStream.

    CSV carries no geometry, so it comes from `geometry` (EventVOT 1280x720 by
    default). BIN takes it from its header.
    """
    fmt = _check_format(fmt)
    if fmt == "csv":
        return _parse_csv(raw, geometry if geometry is not None else SensorGeometry())
    return _parse_bin(raw, geometry)


def write_event_stream(stream, fmt="csv"):
    fmt = _check_format(fmt)
    if fmt == "csv":
        buffer = io.StringIO()
        table = np.column_stack([stream.t, stream.x, stream.y, stream.p]).astype(np.int64)
        np.savetxt(buffer, table.reshape(-1, 4), fmt="%d", delimiter=",", header=CSV_HEADER, comments="")
        return buffer.getvalue().encode("ascii")
    header = np.zeros(1, dtype=BIN_HEADER)
    header["magic"] = BIN_MAGIC
    header["width"] = stream.geometry.width
    header["height"] = stream.geometry.height
    header["count"] = len(stream)
    records = np.zeros(len(stream), dtype=BIN_RECORD)
    records["t"] = stream.t
    records["x"] = stream.x
    records["y"] = stream.y
    records["p"] = stream.p
    return header.tobytes() + records.tobytes()


def infer_format(path):
    ext = os.path.splitext(str(path))[1].lower().lstrip(".")
    if ext not in ("csv", "bin"):
        raise ValueError(f"Cannot infer event format from {path}, use a .csv or .bin suffix")
    return ext


def read_event_file(path, fmt=None, geometry=None):
    if fmt is None:
        fmt = infer_format(path)
    with open(path, "rb") as f:
        raw = f.read()
    stream = parse_event_stream(raw, fmt, geometry=geometry)
    logger.info(f"Read {len(stream)} events from {path}")
    return stream


def write_event_file(stream, path, fmt=None):
    if fmt is None:
        fmt = infer_format(path)
    with open(path, "wb") as f:
        f.write(write_event_stream(stream, fmt))


def random_stream(n, geometry=None, duration_us=1_000_000, seed=0):
    """Uniformly random synthetic stream for tests and benchmarks."""
    if geometry is None:
        geometry = SensorGeometry()
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, duration_us, size=n))
    x = rng.integers(0, geometry.width, size=n)
    y = rng.integers(0, geometry.height, size=n)
    p = rng.integers(0, 2, size=n)
    return EventStream.from_arrays(t, x, y, p, geometry=geometry)


def frame_assignment(stream, num_frames=EVENTVOT_FRAMES):
    """Frame index of every event when [t_min, t_max + 1) is cut into equal windows."""
    if len(stream) == 0:
        raise EmptyStream("Cannot stack an empty stream into frames")
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    offsets = stream.t - stream.t_min
    span = stream.t_max - stream.t_min + 1
    if span - 1 <= np.iinfo(np.int64).max // num_frames:
        return offsets * num_frames // span
    # exact fallback for spans that would overflow int64
    return np.array([int(o) * num_frames // span for o in offsets], dtype=np.int64)


def _frames_from_index(stream, index, n_frames, window_of):
    width, height = stream.geometry.width, stream.geometry.height
    bounds = np.searchsorted(index, np.arange(n_frames + 1), side="left")
    pixel = stream.y.astype(np.int64) * width + stream.x
    for i in range(n_frames):
        lo, hi = bounds[i], bounds[i + 1]
        on = stream.p[lo:hi] == ON
        px = pixel[lo:hi]
        counts_on = np.bincount(px[on], minlength=width * height).astype(np.int32).reshape(height, width)
        counts_off = np.bincount(px[~on], minlength=width * height).astype(np.int32).reshape(height, width)
        yield EventFrame(window_of(i), counts_on, counts_off)


def stack_to_frames(stream, num_frames=EVENTVOT_FRAMES):
    """Stack a stream into `num_frames` fixed-count-of-windows event frames.

    Arguments are checked on call. Frames are then produced one at a time
    by the returned generator, each holding int32 count grids.
    """
    index = frame_assignment(stream, num_frames)
    t_min = stream.t_min
    span = stream.t_max - t_min + 1
    return _frames_from_index(
        stream,
        index,
        num_frames,
        lambda i: (t_min + i * span / num_frames, t_min + (i + 1) * span / num_frames),
    )


def stack_by_duration(stream, window_us):
    """Lazily stack a stream into consecutive frames of `window_us` microseconds each."""
    if len(stream) == 0:
        raise EmptyStream("Cannot stack an empty stream into frames")
    if window_us < 1:
        raise ValueError(f"window_us must be >= 1, got {window_us}")
    t_min = stream.t_min
    n = (stream.t_max - t_min) // window_us + 1
    index = (stream.t - t_min) // window_us
    return _frames_from_index(
        stream, index, int(n), lambda i: (t_min + i * window_us, t_min + (i + 1) * window_us)
    )


def _count_cells(stream, lo, hi, a, b, c, dims, t_min):
    nx, ny, nt = dims
    cell = (
        (stream.x[lo:hi].astype(np.int64) // a) * ny + stream.y[lo:hi] // b
    ) * nt + (stream.t[lo:hi] - t_min) // c
    return np.bincount(cell, minlength=nx * ny * nt)


def build_voxel_grid(stream, a=16, b=16, c=None, workers=None):
    """Count events into (a px) x (b px) x (c us) cells.

    `c` defaults to ceil(T_i / 5). The time span T_i = t_max - t_min + 1 is
    padded up to a multiple of c, so the last temporal slice may be partial.
    With `workers` > 1 the stream is cut into contiguous time partitions that
    are counted concurrently and summed.
    """
    if len(stream) == 0:
        raise EmptyStream("Cannot voxelize an empty stream")
    width, height = stream.geometry.width, stream.geometry.height
    if a < 1 or b < 1:
        raise ValueError(f"Voxel cell sizes must be positive, got a={a}, b={b}")
    if width % a or height % b:
        raise NonDivisible(f"Cell {a}x{b} does not tile a {width}x{height} sensor")
    t_min = stream.t_min
    span = stream.t_max - t_min + 1
    if c is None:
        c = math.ceil(span / 5)
    if c < 1:
        raise ValueError(f"Voxel time size must be positive, got c={c}")
    dims = (width // a, height // b, -(-span // c))
    workers = workers or 1
    if workers > 1 and len(stream) >= workers:
        edges = np.linspace(0, len(stream), workers + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    lambda lo_hi: _count_cells(stream, lo_hi[0], lo_hi[1], a, b, c, dims, t_min),
                    zip(edges[:-1], edges[1:]),
                )
            )
        flat = np.sum(parts, axis=0)
    else:
        flat = _count_cells(stream, 0, len(stream), a, b, c, dims, t_min)
    logger.debug(f"Voxelized {len(stream)} events into {dims} cells of {(a, b, c)}")
    return VoxelGrid((a, b, c), dims, flat.reshape(dims), t_min)


def render_event_image(frame, on_color=ON_COLOR, off_color=OFF_COLOR, background=BACKGROUND_COLOR):
    """Colour each pixel by its dominant polarity; ties and empty pixels stay background."""
    height, width = frame.counts_on.shape
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[:] = background
    image[frame.counts_on > frame.counts_off] = on_color
    image[frame.counts_off > frame.counts_on] = off_color
    return image
