"""Event-stream ingestion: file parsing, crop/downsample routing into the
four corner patches, 5 ms windowing, and binary spike encoding.

File formats
------------
Event file: UTF-8 text, one event per line, ``t_us x y p`` with p in {0, 1}
(0 negative, 1 positive), whitespace separated, ``#`` comments ignored.
Pose file: one line per sample, ``t_us px py pz qw qx qy qz`` (meters, unit
quaternion), nominally 180 Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .homography import CORNER_NAMES

SENSOR_WIDTH = 240
SENSOR_HEIGHT = 180
WINDOW_US = 5000
PATCH = 16
MAX_EVENTS_PER_CORNER = 90


class EventFormatError(ValueError):
    """Malformed event or pose file contents."""


@dataclass(frozen=True)
class Event:
    """One camera event: microsecond timestamp, sensor pixel, polarity."""

    t: int
    x: int
    y: int
    polarity: int  # 0 negative, 1 positive

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("event timestamp must be non-negative")
        if not (0 <= self.x < SENSOR_WIDTH and 0 <= self.y < SENSOR_HEIGHT):
            raise ValueError(f"event pixel ({self.x}, {self.y}) outside sensor bounds")
        if self.polarity not in (0, 1):
            raise ValueError("polarity must be 0 or 1")


@dataclass(frozen=True)
class SensorGeometry:
    """Crop/downsample layout mapping sensor pixels to corner-patch pixels.

    The 180x180 crop is horizontally centered (x offset 30) so the working
    frame is symmetric; nearest-neighbor downsampling is floor division by
    the factor; the four patches sit at the corners of the downsampled frame.
    """

    crop_x: int = 30
    crop_y: int = 0
    crop_size: int = 180
    factor: int = 2
    patch: int = PATCH

    @property
    def ds_size(self) -> int:
        return self.crop_size // self.factor

    def corner_offsets(self) -> dict[str, tuple[int, int]]:
        """Downsampled-frame (x0, y0) of each 16x16 corner window."""
        hi = self.ds_size - self.patch
        return {"TL": (0, 0), "TR": (hi, 0), "BR": (hi, hi), "BL": (0, hi)}


DEFAULT_GEOMETRY = SensorGeometry()


@dataclass
class CornerPatch:
    """Events of one corner window in local 16x16 coordinates."""

    corner: str
    x: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    y: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    t: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    polarity: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class EventWindow:
    """One half-open 5 ms window [t_start, t_end) with its corner patches."""

    t_start: int
    t_end: int
    patches: dict[str, CornerPatch]

    @property
    def count(self) -> int:
        return sum(len(p) for p in self.patches.values())


def parse_event_line(line: str, lineno: int) -> Event:
    parts = line.split()
    if len(parts) != 4:
        raise EventFormatError(f"line {lineno}: expected 't_us x y p', got {line!r}")
    try:
        t, x, y, p = (int(v) for v in parts)
    except ValueError as exc:
        raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from exc
    try:
        return Event(t=t, x=x, y=y, polarity=p)
    except ValueError as exc:
        raise EventFormatError(f"line {lineno}: {exc}") from exc


def load_events(path) -> Iterator[Event]:
    """Yield events from a text file in timestamp order.

    Raises :class:`EventFormatError` with the offending line number for
    malformed lines or timestamp regressions.
    """
    prev_t = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            ev = parse_event_line(line, lineno)
            if ev.t < prev_t:
                raise EventFormatError(f"non-monotonic timestamp at line {lineno}")
            prev_t = ev.t
            yield ev


def load_poses(path) -> np.ndarray:
    """Load a ground-truth pose file as an (N, 8) array: t_us, p(3), q(wxyz).

    Timestamps must be strictly increasing and quaternions near unit norm.
    """
    rows = []
    prev_t = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise EventFormatError(
                    f"line {lineno}: expected 't_us px py pz qw qx qy qz', got {line!r}"
                )
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise EventFormatError(f"line {lineno}: non-numeric field") from exc
            if vals[0] <= prev_t:
                raise EventFormatError(f"non-monotonic timestamp at line {lineno}")
            prev_t = vals[0]
            qn = np.linalg.norm(vals[4:8])
            if abs(qn - 1.0) > 1e-3:
                raise EventFormatError(f"line {lineno}: quaternion norm {qn:.6f} not unit")
            rows.append(vals)
    if not rows:
        return np.empty((0, 8))
    return np.asarray(rows, dtype=float)


def preprocess(event: Event, geometry: SensorGeometry = DEFAULT_GEOMETRY):
    """Map a sensor event into (corner, local_x, local_y), or None.

    Events outside the central crop or outside the four corner windows of
    the downsampled frame are discarded.
    """
    cx = event.x - geometry.crop_x
    cy = event.y - geometry.crop_y
    if not (0 <= cx < geometry.crop_size and 0 <= cy < geometry.crop_size):
        return None
    dx = cx // geometry.factor
    dy = cy // geometry.factor
    for corner, (x0, y0) in geometry.corner_offsets().items():
        if x0 <= dx < x0 + geometry.patch and y0 <= dy < y0 + geometry.patch:
            return corner, dx - x0, dy - y0
    return None


def preprocess_arrays(
    t: np.ndarray, x: np.ndarray, y: np.ndarray, p: np.ndarray,
    geometry: SensorGeometry = DEFAULT_GEOMETRY,
) -> dict[str, np.ndarray]:
    """Vectorized :func:`preprocess` over event arrays.

    Returns per-corner structured views: dict corner -> (t, lx, ly, p)
    stacked as an (N, 4) int64 array, preserving arrival order.
    """
    t = np.asarray(t, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    p = np.asarray(p, dtype=np.int64)
    cx = x - geometry.crop_x
    cy = y - geometry.crop_y
    in_crop = (cx >= 0) & (cx < geometry.crop_size) & (cy >= 0) & (cy < geometry.crop_size)
    dx = cx // geometry.factor
    dy = cy // geometry.factor
    out: dict[str, np.ndarray] = {}
    for corner, (x0, y0) in geometry.corner_offsets().items():
        m = in_crop & (dx >= x0) & (dx < x0 + geometry.patch) & (dy >= y0) & (dy < y0 + geometry.patch)
        out[corner] = np.stack([t[m], dx[m] - x0, dy[m] - y0, p[m]], axis=1)
    return out


def window_and_route(
    events: Iterable[Event],
    geometry: SensorGeometry = DEFAULT_GEOMETRY,
    cap: int = MAX_EVENTS_PER_CORNER,
) -> Iterator[EventWindow]:
    """Tile the stream into non-overlapping 5 ms windows of corner patches.

    Windows start at stream t = 0 and are emitted for every 5 ms span up to
    the last event, including empty spans, so a downstream consumer ticks at
    a steady 200 Hz. Per corner and window, only the first ``cap`` events in
    arrival order are kept.
    """
    window_idx = 0
    buckets: dict[str, list[tuple[int, int, int, int]]] = {c: [] for c in CORNER_NAMES}

    def flush(idx):
        patches = {}
        for corner in CORNER_NAMES:
            kept = buckets[corner][:cap]
            arr = np.array(kept, dtype=np.int64).reshape(len(kept), 4)
            patches[corner] = CornerPatch(
                corner=corner, t=arr[:, 0], x=arr[:, 1], y=arr[:, 2], polarity=arr[:, 3]
            )
            buckets[corner] = []
        return EventWindow(t_start=idx * WINDOW_US, t_end=(idx + 1) * WINDOW_US, patches=patches)

    for ev in events:
        idx = ev.t // WINDOW_US
        while idx > window_idx:
            yield flush(window_idx)
            window_idx += 1
        hit = preprocess(ev, geometry)
        if hit is not None:
            corner, lx, ly = hit
            buckets[corner].append((ev.t, lx, ly, ev.polarity))
    yield flush(window_idx)


def encode_input_spikes(patch: CornerPatch, patch_size: int = PATCH) -> np.ndarray:
    """Binary (2, 16, 16) spike tensor: plane p set at (y, x) iff any event
    of polarity p hit that pixel in the window. Repeats collapse to one."""
    out = np.zeros((2, patch_size, patch_size), dtype=np.float64)
    if len(patch):
        out[patch.polarity, patch.y, patch.x] = 1.0
    return out


def encode_window(window: EventWindow, patch_size: int = PATCH) -> np.ndarray:
    """Stack the four corner spike tensors into a (4, 2, 16, 16) batch."""
    return np.stack(
        [encode_input_spikes(window.patches[c], patch_size) for c in CORNER_NAMES]
    )


def local_to_sensor(
    corner: str, lx: int, ly: int, geometry: SensorGeometry = DEFAULT_GEOMETRY
) -> tuple[int, int]:
    """Inverse of :func:`preprocess` (top-left sample of the 2x2 cell)."""
    x0, y0 = geometry.corner_offsets()[corner]
    return (
        (x0 + lx) * geometry.factor + geometry.crop_x,
        (y0 + ly) * geometry.factor + geometry.crop_y,
    )


def write_event_file(path, t: np.ndarray, x: np.ndarray, y: np.ndarray, p: np.ndarray) -> None:
    """Write events (already timestamp-sorted) in the documented format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t_us x y p\n")
        for ti, xi, yi, pi in zip(t, x, y, p):
            fh.write(f"{int(ti)} {int(xi)} {int(yi)} {int(pi)}\n")


def write_pose_file(path, rows: np.ndarray) -> None:
    """Write an (N, 8) pose array in the documented format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t_us px py pz qw qx qy qz\n")
        for r in np.asarray(rows, dtype=float):
            fh.write(
                f"{int(r[0])} "
                + " ".join(f"{v:.9g}" for v in r[1:])
                + "\n"
            )
