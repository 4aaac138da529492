"""Synthetic event data: a translating random texture observed by ideal
event pixels (per-pixel log-intensity threshold crossings).

The real 40-minute flight recordings are not bundled, so training and
evaluation accept synthetic sequences in the same shapes the event pipeline
produces: per 5 ms window, per corner, local (x, y, t_us, polarity) arrays
with a known ground-truth flow in downsampled px per window. The generator
can also serialize a sequence as an event file plus the pose trajectory
whose continuous homography reproduces the same corner flows, which
exercises the whole file-based evaluation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import events as ev
from .homography import CORNER_NAMES, CameraModel, convert_corner_flows, CornerFlowSet

WINDOW_US = ev.WINDOW_US


@dataclass(frozen=True)
class TextureConfig:
    """Knobs of the synthetic scene."""

    patch: int = 16
    grid: int = 24            # random-texture knots per period
    cells: tuple = (2.1, 3.7, 6.3)   # feature sizes in px (multi-scale)
    weights: tuple = (0.5, 0.3, 0.2)
    contrast_threshold: float = 0.2
    substeps: int = 10        # intensity samples per 5 ms window
    amplitude: float = 1.0


class TranslatingTexture:
    """Ideal event camera watching one 16x16 patch of a drifting texture.

    The texture is a sum of random bilinear fields at several feature
    scales (single-scale patterns pseudo-alias under motion compensation);
    every pixel integrates log-intensity change and fires a polarity event
    whenever it moves a full contrast threshold away from its reference
    level, with the crossing time interpolated inside the sampling step.
    """

    def __init__(self, rng: np.random.Generator, cfg: TextureConfig = TextureConfig()):
        self.cfg = cfg
        self.knots = [
            rng.uniform(0.0, cfg.amplitude, size=(cfg.grid, cfg.grid))
            for _ in cfg.cells
        ]
        self.phase = np.zeros(2)
        xs = np.arange(cfg.patch, dtype=float)
        self._px, self._py = np.meshgrid(xs, xs, indexing="xy")
        self._ref = self._sample(self.phase)
        self._t_us = 0

    def _sample(self, phase: np.ndarray) -> np.ndarray:
        """Multi-scale periodic texture lookup at pixel positions + phase."""
        cfg = self.cfg
        g = cfg.grid
        out = np.zeros_like(self._px)
        for knots, cell, weight in zip(self.knots, cfg.cells, cfg.weights):
            u = (self._px + phase[0]) / cell
            v = (self._py + phase[1]) / cell
            iu = np.floor(u).astype(int)
            iv = np.floor(v).astype(int)
            fu = u - iu
            fv = v - iv
            v00 = knots[iv % g, iu % g]
            v10 = knots[iv % g, (iu + 1) % g]
            v01 = knots[(iv + 1) % g, iu % g]
            v11 = knots[(iv + 1) % g, (iu + 1) % g]
            out += weight * (
                v00 * (1 - fu) * (1 - fv)
                + v10 * fu * (1 - fv)
                + v01 * (1 - fu) * fv
                + v11 * fu * fv
            )
        return out

    def window(self, flow_px_per_window: np.ndarray) -> np.ndarray:
        """Advance 5 ms at the given flow; returns (N, 4) local events.

        Texture moving with flow u makes the intensity pattern at a fixed
        pixel drift by -u per window, so the observed image flow equals u.
        """
        cfg = self.cfg
        flow = np.asarray(flow_px_per_window, dtype=float)
        rows = []
        t0 = self._t_us
        dt = WINDOW_US / cfg.substeps
        for s in range(cfg.substeps):
            frac = (s + 1) / cfg.substeps
            new = self._sample(self.phase - flow * frac)
            delta = new - self._ref
            thr = cfg.contrast_threshold
            # positive crossings
            for pol, d in ((1, delta), (0, -delta)):
                fires = np.floor(d / thr).astype(int)
                ys, xs = np.nonzero(fires > 0)
                for y, x in zip(ys, xs):
                    n = fires[y, x]
                    base = np.abs(delta[y, x])
                    for k in range(1, n + 1):
                        # crossing-time interpolation inside the substep
                        t_cross = t0 + dt * (s + k * thr / max(base, thr))
                        rows.append((x, y, min(t_cross, t0 + WINDOW_US - 1), pol))
            self._ref = self._ref + np.sign(delta) * (np.abs(delta) // thr) * thr
        self.phase = self.phase - flow
        self._t_us = t0 + WINDOW_US
        if not rows:
            return np.empty((0, 4))
        arr = np.array(rows, dtype=float)  # columns: x, y, t_us, polarity
        return arr[np.argsort(arr[:, 2], kind="stable")]


def generate_sequence(
    rng: np.random.Generator,
    n_windows: int,
    flow_px_per_window: np.ndarray,
    cfg: TextureConfig = TextureConfig(),
    cap: int = ev.MAX_EVENTS_PER_CORNER,
):
    """Synthesize a four-corner sequence under one uniform flow.

    Returns (windows, gt_flows): `windows` is a list of per-corner event
    dicts ((N, 4) float arrays of x, y, t_us, polarity, capped at `cap`
    per corner per window), `gt_flows` is (n_windows, 4, 2) px/window.
    """
    textures = {c: TranslatingTexture(rng, cfg) for c in CORNER_NAMES}
    flow = np.asarray(flow_px_per_window, dtype=float)
    windows = []
    for _ in range(n_windows):
        wdict = {}
        for c in CORNER_NAMES:
            arr = textures[c].window(flow)
            wdict[c] = arr[:cap]
        windows.append(wdict)
    gt = np.tile(flow, (n_windows, 4, 1))
    return windows, gt


def sequence_to_patches(window_events: dict) -> dict:
    """Adapter: per-corner (N, 4) arrays to events.CornerPatch objects."""
    patches = {}
    for c, arr in window_events.items():
        arr = np.asarray(arr).reshape(-1, 4)
        patches[c] = ev.CornerPatch(
            corner=c,
            t=arr[:, 2].astype(np.int64),
            x=arr[:, 0].astype(np.int64),
            y=arr[:, 1].astype(np.int64),
            polarity=arr[:, 3].astype(np.int64),
        )
    return patches


def write_recording(
    path_events,
    path_poses,
    rng: np.random.Generator,
    n_windows: int,
    flow_px_per_window: np.ndarray,
    cam: CameraModel | None = None,
    height_m: float = 2.0,
    cfg: TextureConfig = TextureConfig(),
) -> np.ndarray:
    """Write a synthetic constant-flow recording as event + pose files.

    The pose trajectory is the straight, level flight whose continuous
    homography produces exactly the generated uniform corner flow, so the
    pose-derived ground truth agrees with the texture motion. Returns the
    (n_windows, 4, 2) ground-truth flows in ds px/window.
    """
    cam = cam or CameraModel()
    flow = np.asarray(flow_px_per_window, dtype=float)
    windows, gt = generate_sequence(rng, n_windows, flow, cfg)

    rows = []
    for wi, wdict in enumerate(windows):
        for c, arr in wdict.items():
            for x, y, t_us, pol in np.asarray(arr):
                sx, sy = ev.local_to_sensor(c, int(x), int(y))
                rows.append((t_us, sx, sy, pol))
    rows.sort(key=lambda r: r[0])
    t = np.array([r[0] for r in rows])
    ev.write_event_file(
        path_events, t, [r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows]
    )

    # level flight with velocity chosen so that -v_C[:2]/h matches the
    # normalized flow of the texture motion
    u_norm = convert_corner_flows(
        CornerFlowSet(np.tile(flow, (4, 1)), "ds_px_per_window"), "norm_per_s", cam
    ).flows[0]
    v_C = np.array([-u_norm[0] * height_m, -u_norm[1] * height_m, 0.0])
    v_B = cam.R_CB.T @ v_C
    duration_s = n_windows * WINDOW_US * 1e-6
    pose_dt = 1.0 / 180.0
    n_samples = int(np.ceil(duration_s / pose_dt)) + 2
    pose_rows = []
    # body position such that the camera sits at height_m
    offset_z = (np.eye(3) @ cam.T_CB)[2]
    for i in range(n_samples):
        ts = i * pose_dt
        p = np.array([0.0, 0.0, height_m - offset_z]) + v_B * ts
        pose_rows.append([ts * 1e6, p[0], p[1], p[2], 1.0, 0.0, 0.0, 0.0])
    ev.write_pose_file(path_poses, np.array(pose_rows))
    return gt
