"""Planar-homography geometry: four-point solving, dense flow synthesis,
continuous-homography ground truth, and visual-observable extraction.

All functions here are pure. Corner ordering everywhere is TL, TR, BR, BL.

Coordinate frames and flow units
--------------------------------
The sensor is 240x180 px. A horizontally centered 180x180 crop (x offset 30)
followed by a 2x nearest-neighbor downsample gives the 90x90 working frame
whose corners carry the four 16x16 input patches. Flow vectors move between
four unit systems, tagged explicitly on :class:`CornerFlowSet`:

* ``ds_px_per_window``  displacement per 5 ms window, 90x90 downsampled px
* ``ds_px_per_ms``      network output unit
* ``crop_px_per_s``     180x180 crop-frame px per second
* ``norm_per_s``        intrinsics-normalized flow, 1/s (observable solving)

:func:`convert_corner_flows` is the single authority for moving between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WINDOW_MS = 5.0
DOWNSAMPLE = 2

CORNER_NAMES = ("TL", "TR", "BR", "BL")

# Homogeneous corner pixels in the 180x180 crop frame (paper convention,
# e.g. BL = [0, 180, 1]) and their 90x90 downsampled counterparts.
CORNERS_CROP = np.array(
    [[0.0, 0.0, 1.0], [180.0, 0.0, 1.0], [180.0, 180.0, 1.0], [0.0, 180.0, 1.0]]
)
CORNERS_DS = CORNERS_CROP[:, :2] / DOWNSAMPLE

FLOW_UNITS = ("ds_px_per_window", "ds_px_per_ms", "crop_px_per_s", "norm_per_s")

_E3 = np.array([0.0, 0.0, 1.0])


class DegenerateHomographyError(ValueError):
    """Raised when the four-point system is singular or ill-conditioned."""


class BelowGroundError(ValueError):
    """Raised when a camera height at or below zero is supplied."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus camera-from-body extrinsics.

    Defaults are the downward-looking flight camera used throughout:
    focal lengths ~188.9 px, principal point at the crop center, camera
    x aligned with body x and camera z pointing down.
    """

    K: np.ndarray = field(
        default_factory=lambda: np.array(
            [[188.84, 0.0, 90.0], [0.0, 188.99, 90.0], [0.0, 0.0, 1.0]]
        )
    )
    R_CB: np.ndarray = field(
        default_factory=lambda: np.array(
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]
        )
    )
    T_CB: np.ndarray = field(default_factory=lambda: np.array([-0.005, 0.077, -0.033]))

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        R = np.asarray(self.R_CB, dtype=float)
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsic matrix K must be invertible")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("R_CB must be orthonormal")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R_CB", R)
        object.__setattr__(self, "T_CB", np.asarray(self.T_CB, dtype=float))

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def corners_normalized(self) -> np.ndarray:
        """The four crop corners in K-normalized coordinates, shape (4, 2)."""
        pts = (self.K_inv @ CORNERS_CROP.T).T
        return pts[:, :2]


@dataclass
class CornerFlowSet:
    """Flow vectors of the four image corners with an explicit unit tag.

    ``flows`` has shape (4, 2) ordered TL, TR, BR, BL, or (..., 4, 2) for
    batched sets.
    """

    flows: np.ndarray
    unit: str

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=float)
        if self.flows.shape[-2:] != (4, 2):
            raise ValueError(f"corner flows must have shape (..., 4, 2), got {self.flows.shape}")
        if self.unit not in FLOW_UNITS:
            raise ValueError(f"unknown flow unit {self.unit!r}, expected one of {FLOW_UNITS}")
        if not np.all(np.isfinite(self.flows)):
            raise ValueError("corner flows must be finite")


@dataclass
class VisualObservables:
    """Scaled velocities (1/s) and yaw rate (rad/s) in a tagged frame."""

    nu: np.ndarray
    omega_z: float
    frame: str = "camera"

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        if self.frame not in ("camera", "body"):
            raise ValueError(f"frame must be 'camera' or 'body', got {self.frame!r}")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.nu, [self.omega_z]])


def flow_unit_factor(from_unit: str, to_unit: str, cam: CameraModel | None = None) -> np.ndarray:
    """Per-axis multiplier converting flows between two tagged units.

    Returns a length-2 array (x factor, y factor). Conversions involving
    ``norm_per_s`` need the camera model for the focal lengths.
    """
    for u in (from_unit, to_unit):
        if u not in FLOW_UNITS:
            raise ValueError(f"unknown flow unit {u!r}")

    def to_crop_per_s(unit):
        # factor taking `unit` to crop_px_per_s
        if unit == "crop_px_per_s":
            return np.array([1.0, 1.0])
        if unit == "ds_px_per_ms":
            return np.array([DOWNSAMPLE * 1000.0] * 2)
        if unit == "ds_px_per_window":
            return np.array([DOWNSAMPLE * 1000.0 / WINDOW_MS] * 2)
        if unit == "norm_per_s":
            if cam is None:
                raise ValueError("camera model required for normalized-flow conversion")
            return np.array([cam.K[0, 0], cam.K[1, 1]])
        raise AssertionError(unit)

    return to_crop_per_s(from_unit) / to_crop_per_s(to_unit)


def convert_corner_flows(flows: CornerFlowSet, to_unit: str, cam: CameraModel | None = None) -> CornerFlowSet:
    """Convert a tagged corner-flow set to another unit."""
    factor = flow_unit_factor(flows.unit, to_unit, cam)
    return CornerFlowSet(flows.flows * factor, to_unit)


def solve_four_point(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Solve the 3x3 homography mapping four source points to four targets.

    Stacks the two linear equations per correspondence into an 8x8 system
    A h = b (h = [h11..h32], h33 = 1) and solves it with partially pivoted
    Gaussian elimination. Raises :class:`DegenerateHomographyError` for
    ill-conditioned configurations (condition estimate above 1e12) or when
    the solve residual exceeds 1e-9 * max(1, |b|_inf).
    """
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for k in range(4):
        x, y = src[k]
        xp, yp = dst[k]
        A[2 * k] = (x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y)
        A[2 * k + 1] = (0.0, 0.0, 0.0, x, y, 1.0, -yp * x, -yp * y)
        b[2 * k] = xp
        b[2 * k + 1] = yp
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateHomographyError(f"four-point system condition {cond:.3e} exceeds 1e12")
    h = np.linalg.solve(A, b)
    residual = np.abs(A @ h - b).max()
    if residual >= 1e-9 * max(1.0, np.abs(b).max()):
        raise DegenerateHomographyError(f"four-point solve residual {residual:.3e} too large")
    H = np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    return H


def solve_corner_homography(flows: CornerFlowSet) -> np.ndarray:
    """Homography induced by one window's corner flows (ds_px_per_window)."""
    f = convert_corner_flows(flows, "ds_px_per_window")
    return solve_four_point(CORNERS_DS, CORNERS_DS + f.flows)


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a homography to (..., 2) points with the projective division."""
    pts = np.asarray(pts, dtype=float)
    denom = H[2, 0] * pts[..., 0] + H[2, 1] * pts[..., 1] + H[2, 2]
    if np.any(denom <= 0):
        raise DegenerateHomographyError("projective denominator is non-positive for some pixel")
    xp = (H[0, 0] * pts[..., 0] + H[0, 1] * pts[..., 1] + H[0, 2]) / denom
    yp = (H[1, 0] * pts[..., 0] + H[1, 1] * pts[..., 1] + H[1, 2]) / denom
    return np.stack([xp, yp], axis=-1)


def dense_flow(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Per-pixel displacement field of a homography: project(H, x) - x."""
    pts = np.asarray(pts, dtype=float)
    return project(H, pts) - pts


def observable_design_matrix(corners_n: np.ndarray) -> np.ndarray:
    """8x4 design matrix of the corner-flow observable model.

    Row pair k maps (nu_x, nu_y, nu_z, omega_z) to the flow at normalized
    corner (x, y):

        u_x = -nu_x + nu_z * x + omega_z * y
        u_y = -nu_y + nu_z * y - omega_z * x

    The rotation column uses the rigid-rotation field (y, -x); a rotation
    written with (x, -y) is orthogonal to actual yaw flow at the symmetric
    corners and would make yaw unobservable.
    """
    corners_n = np.asarray(corners_n, dtype=float).reshape(4, 2)
    A = np.zeros((8, 4))
    for k, (x, y) in enumerate(corners_n):
        A[2 * k] = (-1.0, 0.0, x, y)
        A[2 * k + 1] = (0.0, -1.0, y, -x)
    return A


def observable_solver_matrix(corners_n: np.ndarray) -> np.ndarray:
    """4x8 least-squares solver (A^T A)^-1 A^T for the observable model.

    The explicit normal-equation inverse keeps the 200 Hz path branch-free;
    the 4x4 system is far from singular for any four distinct corners.
    """
    A = observable_design_matrix(corners_n)
    AtA = A.T @ A
    if np.linalg.cond(AtA) > 1e12:
        raise DegenerateHomographyError("observable system is rank-deficient")
    return np.linalg.inv(AtA) @ A.T


def forward_corner_flows(nu: np.ndarray, omega_z: float, corners_n: np.ndarray) -> np.ndarray:
    """Synthesize normalized corner flows (4, 2) from camera-frame observables."""
    A = observable_design_matrix(corners_n)
    u = A @ np.concatenate([np.asarray(nu, dtype=float), [omega_z]])
    return u.reshape(4, 2)


def observables_from_corner_flows(flows: CornerFlowSet, cam: CameraModel) -> VisualObservables:
    """Least-squares camera-frame observables from the four corner flows."""
    f = convert_corner_flows(flows, "norm_per_s", cam)
    L = observable_solver_matrix(cam.corners_normalized())
    sol = L @ f.flows.reshape(8)
    return VisualObservables(nu=sol[:3], omega_z=float(sol[3]), frame="camera")


def observables_to_body(obs: VisualObservables, cam: CameraModel) -> VisualObservables:
    """Rotate camera-frame observables into the body frame.

    Only the yaw component of the rotation rate is known, so the camera
    z axis must be aligned (possibly flipped) with the body z axis.
    """
    if obs.frame != "camera":
        raise ValueError("expected camera-frame observables")
    if abs(abs(cam.R_CB[2, 2]) - 1.0) > 1e-9:
        raise ValueError("camera z axis must be aligned with body z for yaw transfer")
    nu_b = cam.R_CB.T @ obs.nu
    omega_b = cam.R_CB[2, 2] * obs.omega_z
    return VisualObservables(nu=nu_b, omega_z=float(omega_b), frame="body")


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def rates_to_camera(omega_B: np.ndarray, v_B: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Body rates and velocity expressed at the camera: omega_C, v_C."""
    omega_B = np.asarray(omega_B, dtype=float)
    v_B = np.asarray(v_B, dtype=float)
    omega_C = cam.R_CB @ omega_B
    v_C = cam.R_CB @ (v_B + np.cross(omega_B, cam.T_CB))
    return omega_C, v_C


def continuous_homography(omega_B: np.ndarray, v_B: np.ndarray, p_z_WC: float, cam: CameraModel) -> np.ndarray:
    """Homography rate matrix of a camera moving over the ground plane.

    Computes K ([omega_C]_x + v_C e3^T / p_z) K^-1 with rates and velocity
    first taken to the camera frame. Valid under the small roll/pitch
    assumption (plane normal approximated by the optical axis).
    """
    if p_z_WC <= 0:
        raise BelowGroundError(f"camera height {p_z_WC} must be positive")
    omega_C, v_C = rates_to_camera(omega_B, v_B, cam)
    M = _skew(omega_C) + np.outer(v_C, _E3) / p_z_WC
    return cam.K @ M @ cam.K_inv


def corner_flows_from_Hdot(Hdot: np.ndarray, corners_h: np.ndarray | None = None) -> CornerFlowSet:
    """Instantaneous corner flows (crop px/s) of a homography rate matrix.

    Evaluates -(I - x e3^T) Hdot x at each homogeneous corner pixel and
    drops the (identically zero) third component.
    """
    Hdot = np.asarray(Hdot, dtype=float)
    if not np.all(np.isfinite(Hdot)):
        raise ValueError("Hdot must be finite")
    if corners_h is None:
        corners_h = CORNERS_CROP
    flows = np.empty((4, 2))
    for k in range(4):
        x = corners_h[k]
        u = -(np.eye(3) - np.outer(x, _E3)) @ Hdot @ x
        flows[k] = u[:2]
    return CornerFlowSet(flows, "crop_px_per_s")


def epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average endpoint error: mean Euclidean distance between flow vectors."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[-1] != 2:
        raise ValueError("flow arrays must have a trailing axis of size 2")
    d = pred - gt
    return float(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2).mean())


def roll_pitch_derotate(flows: CornerFlowSet, omega_B: np.ndarray, cam: CameraModel) -> CornerFlowSet:
    """Remove the roll/pitch-rate flow component from measured corner flows.

    Optional correction (off by default in the pipeline): subtracts the
    corner flows induced by the roll and pitch body rates alone.
    """
    omega_rp = np.array([omega_B[0], omega_B[1], 0.0])
    omega_C = cam.R_CB @ omega_rp
    Hdot = cam.K @ _skew(omega_C) @ cam.K_inv
    rot = corner_flows_from_Hdot(Hdot)
    f = convert_corner_flows(flows, "crop_px_per_s", cam)
    return convert_corner_flows(
        CornerFlowSet(f.flows - rot.flows, "crop_px_per_s"), flows.unit, cam
    )


def yaw_rotation_2d(psi: float) -> np.ndarray:
    """World-to-body planar rotation for a yaw angle psi."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, s], [-s, c]])
