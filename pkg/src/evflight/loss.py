"""Self-supervised contrast-maximization objective for corner flows.

A training buffer holds up to five consecutive 5 ms windows of corner
events together with the per-window corner-flow estimates. Each window's
flows parameterize a homography over the downsampled frame; the dense flow
it induces transports every event of that window to the buffer's start and
end times. Sharp (motion-compensated) event images score low:

    T_p(x) = sum_j k(x - x'_j) k(y - y'_j) t_j / (sum_j k k + eps)
    L(t_ref) = sum_x [T_+(x)^2 + T_-(x)^2] / (#{x : n(x) > 0} + eps)

with k(a) = max(0, 1 - |a|), timestamps normalized to [0, 1] over the
buffer, on a canvas covering the whole downsampled frame plus a margin.
Warped positions saturate at the canvas border, so event mass is conserved
no matter the flow estimate; see _bilinear_terms. A temporal Charbonnier
penalty on successive flow estimates regularizes the estimate.

Everything differentiates with respect to the buffered flows: the 8x8
four-point system is solved with a batched differentiable linear solve and
events enter the images through bilinear splatting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .events import PATCH
from .homography import CORNER_NAMES, CORNERS_DS

logger = logging.getLogger(__name__)

EPS = 1e-9
CHARBONNIER_ALPHA = 0.5
CHARBONNIER_ETA = 1e-3
SMOOTHNESS_WEIGHT = 0.1
CANVAS_MARGIN = 12
DROP_PENALTY = 1.0

# (x0, y0) of each corner patch in the 90x90 downsampled frame
_DS = int(CORNERS_DS[2, 0])          # 90
_HI = _DS - PATCH                    # 74
CORNER_OFFSETS = {"TL": (0, 0), "TR": (_HI, 0), "BR": (_HI, _HI), "BL": (0, _HI)}


@dataclass
class BufferWindow:
    """One event-flow tuple: per-corner local events plus flow estimates.

    ``events[corner]`` is an (N, 4) float64 tensor of (x_local, y_local,
    t_us, polarity); ``flows`` is (4, 2) in ds px per window, ordered
    TL, TR, BR, BL, and typically carries gradients during training.
    """

    events: dict[str, torch.Tensor]
    flows: torch.Tensor
    t_start: int
    t_end: int


@dataclass
class EventFlowBuffer:
    """Up to five chronologically ordered event-flow tuples (25 ms)."""

    windows: list[BufferWindow] = field(default_factory=list)
    capacity: int = 5

    def append(self, window: BufferWindow):
        if len(self.windows) >= self.capacity:
            raise ValueError(f"buffer already holds {self.capacity} tuples")
        if self.windows and window.t_start < self.windows[-1].t_end:
            raise ValueError("buffer windows must be chronological")
        self.windows.append(window)

    def full(self) -> bool:
        return len(self.windows) >= self.capacity

    def clear(self):
        self.windows = []

    def __len__(self):
        return len(self.windows)

    def event_count(self) -> int:
        return sum(int(e.shape[0]) for w in self.windows for e in w.events.values())


def window_from_arrays(events: dict, flows, t_start: int, t_end: int) -> BufferWindow:
    """Build a BufferWindow from per-corner (N, 4) float arrays."""
    ev = {
        c: torch.as_tensor(np.asarray(events.get(c, np.empty((0, 4))), dtype=np.float64).reshape(-1, 4))
        for c in CORNER_NAMES
    }
    if not torch.is_tensor(flows):
        flows = torch.as_tensor(np.asarray(flows, dtype=np.float64))
    return BufferWindow(events=ev, flows=flows, t_start=t_start, t_end=t_end)


def window_from_numpy(patches: dict, flows, t_start: int, t_end: int) -> BufferWindow:
    """Build a BufferWindow from events.CornerPatch-style data."""
    events = {}
    for corner in CORNER_NAMES:
        p = patches[corner]
        arr = np.stack(
            [
                np.asarray(p.x, dtype=np.float64),
                np.asarray(p.y, dtype=np.float64),
                np.asarray(p.t, dtype=np.float64),
                np.asarray(p.polarity, dtype=np.float64),
            ],
            axis=1,
        ) if len(p) else np.empty((0, 4))
        events[corner] = torch.as_tensor(arr, dtype=torch.float64)
    if not torch.is_tensor(flows):
        flows = torch.as_tensor(np.asarray(flows, dtype=np.float64))
    return BufferWindow(events=events, flows=flows, t_start=t_start, t_end=t_end)


def warp_events(positions: torch.Tensor, t: torch.Tensor, flow: torch.Tensor,
                t_ref: float | torch.Tensor) -> torch.Tensor:
    """Linear motion transport x' = x + (t_ref - t) * u(x).

    Units must agree between `t` and `flow` (e.g. seconds and px/s, or
    normalized buffer time and px per buffer).
    """
    dt = torch.as_tensor(t_ref, dtype=positions.dtype) - t
    return positions + dt[..., None] * flow


def timestamp_image(positions: torch.Tensor, values: torch.Tensor,
                    shape: tuple[int, int], eps: float = EPS):
    """Bilinear average image of per-event values on a finite canvas.

    Returns (T, weight) where weight is the splatted kernel mass n(x);
    positions outside `shape` saturate at the border pixels.
    """
    h, w = shape
    num = torch.zeros(h * w, dtype=positions.dtype)
    den = torch.zeros(h * w, dtype=positions.dtype)
    if positions.shape[0]:
        idx, wgt = _bilinear_terms(positions, (h, w))
        num.index_add_(0, idx, wgt * values.repeat(4))
        den.index_add_(0, idx, wgt)
    T = num / (den + eps)
    return T.reshape(h, w), den.reshape(h, w)


def _bilinear_terms(positions: torch.Tensor, shape: tuple[int, int]):
    """Neighbor indices and kernel weights for bilinear splatting.

    positions (N, 2) as (x, y); returns flat indices and weights of the
    4 neighbors per event (length 4N each), with off-canvas neighbor
    contributions dropped (weight zero, index masked to 0). Kernel mass
    bleeding off the canvas is continuous in the positions, so a dropped-
    mass penalty stays differentiable.
    """
    h, w = shape
    x = positions[:, 0]
    y = positions[:, 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    parts = []
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wx = (1.0 - fx) if dx == 0 else fx
        wy = (1.0 - fy) if dy == 0 else fy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        wgt = torch.where(inside, wx * wy, torch.zeros_like(wx))
        idx = torch.where(inside, (yi * w + xi).long(), torch.zeros_like(xi, dtype=torch.long))
        parts.append((idx, wgt))
    idx = torch.cat([p[0] for p in parts])
    wgt = torch.cat([p[1] for p in parts])
    return idx, wgt


def _solve_window_homographies(flows: torch.Tensor) -> torch.Tensor:
    """Differentiable four-point solve for a stack of corner-flow windows.

    flows: (n, 4, 2) in ds px per window. Returns (n, 3, 3) homographies
    over the downsampled frame.
    """
    n = flows.shape[0]
    src = torch.as_tensor(CORNERS_DS, dtype=flows.dtype)
    dst = src + flows
    A = torch.zeros((n, 8, 8), dtype=flows.dtype)
    b = torch.zeros((n, 8), dtype=flows.dtype)
    for k in range(4):
        x, y = src[k]
        xp = dst[:, k, 0]
        yp = dst[:, k, 1]
        A[:, 2 * k, 0] = x
        A[:, 2 * k, 1] = y
        A[:, 2 * k, 2] = 1.0
        A[:, 2 * k, 6] = -xp * x
        A[:, 2 * k, 7] = -xp * y
        A[:, 2 * k + 1, 3] = x
        A[:, 2 * k + 1, 4] = y
        A[:, 2 * k + 1, 5] = 1.0
        A[:, 2 * k + 1, 6] = -yp * x
        A[:, 2 * k + 1, 7] = -yp * y
        b[:, 2 * k] = xp
        b[:, 2 * k + 1] = yp
    h = torch.linalg.solve(A, b)
    H = torch.cat([h, torch.ones((n, 1), dtype=flows.dtype)], dim=1).reshape(n, 3, 3)
    return H


def _dense_flow_at(H: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Projective displacement of (N, 2) points under per-point homographies.

    H is (3, 3) or (N, 3, 3) paired with pts (N, 2).
    """
    if H.dim() == 2:
        H = H.expand(pts.shape[0], 3, 3)
    denom = H[:, 2, 0] * pts[:, 0] + H[:, 2, 1] * pts[:, 1] + H[:, 2, 2]
    xp = (H[:, 0, 0] * pts[:, 0] + H[:, 0, 1] * pts[:, 1] + H[:, 0, 2]) / denom
    yp = (H[:, 1, 0] * pts[:, 0] + H[:, 1, 1] * pts[:, 1] + H[:, 1, 2]) / denom
    return torch.stack([xp, yp], dim=1) - pts


def contrast_loss(buffer: EventFlowBuffer, margin: int = CANVAS_MARGIN) -> torch.Tensor:
    """Forward-plus-backward deblurring objective of one buffer.

    Warps every event to the buffer start and end using its own window's
    homography flow, accumulates per-polarity average-timestamp images on
    a single whole-frame canvas (the downsampled frame grown by a margin),
    and scores their squared sum scaled by the number of pixels that
    received any warped event. Returns a scalar tensor; an event-free
    buffer scores 0 with a logged skip.
    """
    if len(buffer) == 0 or buffer.event_count() == 0:
        logger.info("contrast loss skipped: buffer holds no events")
        return torch.zeros((), dtype=torch.float64)
    return _contrast_loss_batch([buffer], margin)[0]


TRAINING_SCALES = (1.0, 0.5, 0.25, 0.125)


def training_contrast_loss(buffers: list[EventFlowBuffer], margin: int = CANVAS_MARGIN,
                           scales: tuple = TRAINING_SCALES) -> torch.Tensor:
    """Optimization-friendly variant of the deblurring objective.

    Three changes against the reported form, none moving the deblurred
    optimum: the per-pixel active count is replaced by the splatted event
    mass (removing the discrete pixel-popping sawtooth from the gradient);
    kernel mass bleeding off the canvas is charged at DROP_PENALTY per
    unit fraction, so estimates cannot profit from warping events out of
    view; and the image is accumulated at a small pyramid of resolutions,
    whose coarse levels widen the basin of attraction around the true
    flow (at full resolution the objective is flat near a zero estimate
    when the true displacement exceeds the kernel radius). Returns one
    value per buffer.
    """
    total = None
    for s in scales:
        part = _contrast_loss_batch(buffers, margin, smooth=True, scale=s)
        total = part if total is None else total + part
    return total / len(scales)


def _contrast_loss_batch(buffers: list[EventFlowBuffer], margin: int = CANVAS_MARGIN,
                         smooth: bool = False, scale: float = 1.0) -> torch.Tensor:
    """Per-buffer contrast loss for a batch, evaluated in one splat pass."""
    canvas = int(np.ceil((_DS + 2 * margin) * scale))
    area = canvas * canvas
    n_planes = len(buffers) * 2  # buffer x polarity
    dtype = torch.float64

    positions = []      # global ds-frame event coordinates
    taus = []
    plane_ids = []
    flow_rows = []      # (n_windows_total, 4, 2)
    ev_window = []      # window row per event (into flow_rows)
    ev_buffer = []

    row = 0
    for bi, buf in enumerate(buffers):
        t0 = float(buf.windows[0].t_start)
        t1 = float(buf.windows[-1].t_end)
        span = max(t1 - t0, 1.0)
        for win in buf.windows:
            flow_rows.append(win.flows)
            for corner in CORNER_NAMES:
                ev = win.events[corner]
                if ev.shape[0] == 0:
                    continue
                off = torch.tensor(CORNER_OFFSETS[corner], dtype=dtype)
                positions.append(ev[:, :2] + off)
                taus.append((ev[:, 2] - t0) / span)
                plane_ids.append(
                    torch.full((ev.shape[0],), bi * 2, dtype=torch.long) + ev[:, 3].long()
                )
                ev_window.append(torch.full((ev.shape[0],), row, dtype=torch.long))
                ev_buffer.append(torch.full((ev.shape[0],), bi, dtype=torch.long))
            row += 1

    losses = torch.zeros(len(buffers), dtype=dtype)
    if not positions:
        return losses

    pos = torch.cat(positions)                     # (N, 2) global ds coords
    tau = torch.cat(taus)
    plane = torch.cat(plane_ids)
    win_of_ev = torch.cat(ev_window)
    buf_of_ev = torch.cat(ev_buffer)
    flows = torch.stack(flow_rows)                 # (W, 4, 2) px/window

    n_windows = torch.tensor([len(b.windows) for b in buffers], dtype=dtype)

    H = _solve_window_homographies(flows.reshape(-1, 4, 2))

    # per-event dense flow from its own window's homography (px/window),
    # rescaled to px per unit of normalized buffer time
    flow_ev = _dense_flow_at(H[win_of_ev], pos)
    flow_ev = flow_ev * n_windows[buf_of_ev][:, None]

    total_events = torch.zeros(len(buffers), dtype=dtype)
    total_events.index_add_(0, buf_of_ev, torch.ones_like(tau))

    # canvas cell centers sit on half-integers: events land mid-cell, so
    # the bilinear kernel spreads (and differentiates) symmetrically even
    # for the integer-valued pixel coordinates real events carry
    margin_off = float(margin)
    for t_ref in (1.0, 0.0):
        warped = (warp_events(pos, tau, flow_ev, t_ref) + margin_off) * scale + 0.5
        idx, wgt = _bilinear_terms(warped, (canvas, canvas))
        flat = plane.repeat(4) * area + idx
        num = torch.zeros(n_planes * area, dtype=dtype)
        den = torch.zeros(n_planes * area, dtype=dtype)
        num.index_add_(0, flat, wgt * tau.repeat(4))
        den.index_add_(0, flat, wgt)
        T = num / (den + EPS)
        if smooth:
            mass = den.reshape(len(buffers), 2 * area)
            weighted = (den * T * T).reshape(len(buffers), 2 * area).sum(dim=1)
            on_canvas = mass.sum(dim=1)
            dropped = 1.0 - on_canvas / torch.clamp(total_events, min=1.0)
            losses = losses + weighted / (on_canvas + EPS) + DROP_PENALTY * dropped
        else:
            sq = (T * T).reshape(len(buffers), 2, area).sum(dim=(1, 2))
            n_img = den.reshape(len(buffers), 2, area).sum(dim=1)
            active = (n_img > 0).to(dtype).sum(dim=1)
            losses = losses + sq / (active + EPS)
    return losses


def smoothness_loss(buffer: EventFlowBuffer) -> torch.Tensor:
    """Temporal Charbonnier prior over successive per-corner flows.

    Mean over corners and adjacent window pairs of (|du|^2 + eta^2)^alpha;
    zero for a buffer with fewer than two tuples.
    """
    if len(buffer) < 2:
        return torch.zeros((), dtype=torch.float64)
    flows = torch.stack([w.flows for w in buffer.windows])  # (n, 4, 2)
    d = flows[1:] - flows[:-1]
    rho = (d.pow(2).sum(dim=2) + CHARBONNIER_ETA**2) ** CHARBONNIER_ALPHA
    return rho.mean()


def total_loss(buffer: EventFlowBuffer, margin: int = CANVAS_MARGIN,
               smooth_weight: float = SMOOTHNESS_WEIGHT) -> torch.Tensor:
    """Contrast objective plus weighted temporal smoothness."""
    return contrast_loss(buffer, margin) + smooth_weight * smoothness_loss(buffer)
