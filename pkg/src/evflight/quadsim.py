"""Quadrotor dynamics simulator: rigid-body model with a quadratic rotor
thrust map, first-order motor lag, linear flat-body drag, cascaded
thrust/attitude/rate controllers, and classical RK4 integration at 2.5 ms
(control held for 8 substeps, 50 Hz).

All state arrays carry a leading batch dimension so whole populations of
episodes integrate in one vectorized pass. Quaternions are (w, x, y, z),
world frame is z-up, body frame x-forward / z-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .homography import (
    CORNERS_CROP,
    CameraModel,
    CornerFlowSet,
    VisualObservables,
    flow_unit_factor,
    observable_solver_matrix,
)

GRAVITY = 9.81
SIM_DT = 0.0025
CONTROL_SUBSTEPS = 8  # 50 Hz control over 2.5 ms integration steps
FLOW_NOISE_STD = 0.025  # px/ms, per component


class SimulationDiverged(RuntimeError):
    """Raised when integration produces non-finite state."""


class BelowMinAltitude(RuntimeError):
    """Single-episode crash signal."""


@dataclass(frozen=True)
class QuadParams:
    """Physical and controller constants of the simulated vehicle.

    The inertia, mixer torque coefficient, and rate-loop scaling are not
    published with the rest of the coefficient table; the values here are
    plausible estimates for a 1.5 kg, 0.26 m arm X-frame and are exposed
    for override.
    """

    mass: float = 1.535
    arm: float = 0.255
    inertia: tuple = (0.0135, 0.0135, 0.0246)
    motor_tau: float = 0.025
    thrust_map: tuple = (1.329825e-6, 0.003836, -1.768999)
    motor_min: float = 150.0
    motor_max: float = 1500.0
    drag_coeff: tuple = (0.5, 0.5, 0.0)
    body_rate_max: tuple = (6.0, 6.0, 6.0)
    min_altitude: float = 0.2
    position_bound: float = 10.0
    torque_coeff: float = 0.016
    thrust_gain: float = 6.0 * GRAVITY
    attitude_gain: float = math.pi / 2.0
    rate_gains: tuple = (16.6, 16.6, 5.0)

    def inertia_vec(self) -> np.ndarray:
        return np.asarray(self.inertia)


@dataclass
class QuadState:
    """Batched vehicle state: position, attitude, velocity, rates, rotors."""

    p: np.ndarray       # (B, 3) m, world
    q: np.ndarray       # (B, 4) unit quaternion wxyz, world<-body
    v: np.ndarray       # (B, 3) m/s, world
    omega: np.ndarray   # (B, 3) rad/s, body
    rotor: np.ndarray   # (B, 4) rpm

    @property
    def batch(self) -> int:
        return self.p.shape[0]

    def copy(self) -> "QuadState":
        return QuadState(self.p.copy(), self.q.copy(), self.v.copy(),
                         self.omega.copy(), self.rotor.copy())

    @classmethod
    def hover(cls, batch: int = 1, pos=(0.0, 0.0, 2.0),
              params: QuadParams = QuadParams()) -> "QuadState":
        p = np.tile(np.asarray(pos, dtype=float), (batch, 1))
        q = np.tile([1.0, 0.0, 0.0, 0.0], (batch, 1))
        v = np.zeros((batch, 3))
        omega = np.zeros((batch, 3))
        rotor = np.full((batch, 4), hover_rotor_speed(params))
        return cls(p, q, v, omega, rotor)


# ---------------------------------------------------------------------------
# quaternion utilities (batched, wxyz)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body vectors to world: R(q) v."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return quat_rotate(conj, v)


def quat_to_euler(q: np.ndarray):
    """ZYX roll, pitch, yaw from a (batched) quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def quat_from_perturbation(vec: np.ndarray) -> np.ndarray:
    """Unit quaternion from a small vector-part perturbation of identity."""
    vec = np.atleast_2d(vec)
    q = np.concatenate([np.ones((vec.shape[0], 1)), vec], axis=1)
    return quat_normalize(q)


def quat_derivative(q: np.ndarray, omega_body: np.ndarray) -> np.ndarray:
    """Kinematics q_dot = 0.5 * q x (0, omega_body)."""
    zero = np.zeros_like(omega_body[..., :1])
    omega_q = np.concatenate([zero, omega_body], axis=-1)
    return 0.5 * quat_multiply(q, omega_q)


# ---------------------------------------------------------------------------
# rotors and mixer

def rotor_thrust(rotor_rpm: np.ndarray, params: QuadParams) -> np.ndarray:
    """Quadratic per-rotor thrust map a*w^2 + b*w + c (N)."""
    a, b, c = params.thrust_map
    return a * rotor_rpm**2 + b * rotor_rpm + c


def hover_rotor_speed(params: QuadParams = QuadParams()) -> float:
    """Positive root of the thrust map at mg/4 per rotor."""
    a, b, c = params.thrust_map
    f = params.mass * GRAVITY / 4.0
    if a == 0.0:
        return params.motor_min if b == 0.0 else (f - c) / b
    disc = b * b - 4.0 * a * (c - f)
    return (-b + math.sqrt(disc)) / (2.0 * a)


def _rotor_geometry(params: QuadParams):
    """X-configuration arms (positions) and alternating spin signs."""
    angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])
    r = params.arm * np.stack([np.cos(angles), np.sin(angles), np.zeros(4)], axis=1)
    spins = np.array([1.0, -1.0, 1.0, -1.0])
    return r, spins


def mixer_matrix(params: QuadParams) -> np.ndarray:
    """4x4 map from per-rotor thrusts to (total force, torque xyz)."""
    r, spins = _rotor_geometry(params)
    M = np.zeros((4, 4))
    M[0] = 1.0
    M[1] = r[:, 1]              # tau_x = sum r_y * f
    M[2] = -r[:, 0]             # tau_y = sum -r_x * f
    M[3] = spins * params.torque_coeff
    return M


def rotor_torques(thrusts: np.ndarray, params: QuadParams) -> np.ndarray:
    """Body torque (B, 3) produced by per-rotor thrusts (arm + spin drag)."""
    r, spins = _rotor_geometry(params)
    tx = thrusts @ r[:, 1]
    ty = thrusts @ (-r[:, 0])
    tz = thrusts @ (spins * params.torque_coeff)
    return np.stack([tx, ty, tz], axis=-1)


# ---------------------------------------------------------------------------
# dynamics

def drag_force(v_body: np.ndarray, q: np.ndarray, params: QuadParams = QuadParams()) -> np.ndarray:
    """Linear drag in the flat-body frame, as mass-normalized force (m/s^2).

    The body velocity is de-rotated by roll and pitch (frame whose z axis
    is world-vertical), the X/Y components are scaled by the drag
    coefficients, and the result is rotated back to the body frame.
    """
    roll, pitch, _ = quat_to_euler(q)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    zeros = np.zeros_like(roll)
    ones = np.ones_like(roll)
    # R_flat_from_body = Ry(pitch) @ Rx(roll)
    R = np.stack(
        [
            np.stack([cp, sp * sr, sp * cr], axis=-1),
            np.stack([zeros, cr, -sr], axis=-1),
            np.stack([-sp, cp * sr, cp * cr], axis=-1),
        ],
        axis=-2,
    )
    v_flat = np.einsum("...ij,...j->...i", R, v_body)
    k = np.asarray(params.drag_coeff)
    scaled = k * v_flat
    return -np.einsum("...ji,...j->...i", R, scaled)


def derivative(state: QuadState, rotor_thrusts: np.ndarray, omega_cmd: np.ndarray,
               params: QuadParams = QuadParams(), drag: bool = True):
    """Time derivative of every state block.

    `rotor_thrusts` (B, 4) are the instantaneous per-rotor thrusts (N);
    `omega_cmd` (B, 4) the commanded motor speeds driving the first-order
    lag. Returns (dp, dq, dv, domega, drotor).
    """
    f_total = rotor_thrusts.sum(axis=-1)
    f_bar = f_total / params.mass
    a_body = np.zeros_like(state.v)
    a_body[..., 2] = f_bar
    if drag:
        v_body = quat_rotate_inverse(state.q, state.v)
        a_body = a_body + drag_force(v_body, state.q, params)
    dv = quat_rotate(state.q, a_body)
    dv[..., 2] -= GRAVITY

    J = params.inertia_vec()
    tau = rotor_torques(rotor_thrusts, params)
    domega = (tau - np.cross(state.omega, J * state.omega)) / J

    dq = quat_derivative(state.q, state.omega)
    dp = state.v.copy()
    drotor = (omega_cmd - state.rotor) / params.motor_tau
    return dp, dq, dv, domega, drotor


def thrust_attitude_commands(cmd: np.ndarray, state: QuadState,
                             params: QuadParams = QuadParams()):
    """Outer stages of the cascade: commanded mass-normalized thrust
    (6g-scaled around hover, attitude compensated) and body-rate commands
    (angle errors through the pi/2 gain, clamped)."""
    cmd = np.clip(np.atleast_2d(cmd), -1.0, 1.0)
    roll, pitch, _ = quat_to_euler(state.q)

    f_bar = cmd[:, 0] * params.thrust_gain + GRAVITY
    tilt = np.maximum(np.cos(roll) * np.cos(pitch), 0.5)
    f_bar = f_bar / tilt

    rate_cmd = np.stack(
        [
            params.attitude_gain * (cmd[:, 1] - roll),
            params.attitude_gain * (cmd[:, 2] - pitch),
            cmd[:, 3],
        ],
        axis=-1,
    )
    rate_max = np.asarray(params.body_rate_max)
    return f_bar, np.clip(rate_cmd, -rate_max, rate_max)


def low_level_control(cmd: np.ndarray, state: QuadState,
                      params: QuadParams = QuadParams()) -> np.ndarray:
    """Cascaded thrust/attitude/rate controllers: command to motor speeds.

    cmd columns: mass-normalized collective-thrust offset from hover,
    commanded roll and pitch angles (rad), commanded yaw rate (rad/s),
    each clamped to [-1, 1]. Rate errors map to torques through the
    inertia-scaled rate gains; the mixer and inverted thrust map give
    per-rotor speed commands, clamped to the motor envelope (the stock
    thrust map saturates well below the 6g+g command ceiling).
    """
    f_bar, rate_cmd = thrust_attitude_commands(cmd, state, params)

    J = params.inertia_vec()
    tau_des = J * np.asarray(params.rate_gains) * (rate_cmd - state.omega)

    wrench = np.concatenate(
        [(params.mass * f_bar)[:, None], tau_des], axis=1
    )
    Minv = np.linalg.inv(mixer_matrix(params))
    f_rotor = wrench @ Minv.T

    a, b, c = params.thrust_map
    disc = np.maximum(b * b - 4.0 * a * (c - f_rotor), 0.0)
    omega_cmd = (-b + np.sqrt(disc)) / (2.0 * a)
    return np.clip(omega_cmd, params.motor_min, params.motor_max)


def rk4_step(state: QuadState, omega_cmd: np.ndarray,
             params: QuadParams = QuadParams(), dt: float = SIM_DT,
             drag: bool = True) -> QuadState:
    """Classical RK4 over the full state with motor lag integrated inside."""

    def deriv(s: QuadState):
        thrusts = rotor_thrust(s.rotor, params)
        return derivative(s, thrusts, omega_cmd, params, drag=drag)

    def advance(s: QuadState, d, h):
        return QuadState(
            p=s.p + h * d[0], q=s.q + h * d[1], v=s.v + h * d[2],
            omega=s.omega + h * d[3], rotor=s.rotor + h * d[4],
        )

    k1 = deriv(state)
    k2 = deriv(advance(state, k1, dt / 2))
    k3 = deriv(advance(state, k2, dt / 2))
    k4 = deriv(advance(state, k3, dt))
    new = QuadState(
        p=state.p + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        q=state.q + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        v=state.v + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
        omega=state.omega + dt / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
        rotor=state.rotor + dt / 6 * (k1[4] + 2 * k2[4] + 2 * k3[4] + k4[4]),
    )
    new.q = quat_normalize(new.q)
    new.rotor = np.clip(new.rotor, params.motor_min, params.motor_max)
    if not (np.all(np.isfinite(new.p)) and np.all(np.isfinite(new.q))
            and np.all(np.isfinite(new.v)) and np.all(np.isfinite(new.omega))):
        raise SimulationDiverged("non-finite state after RK4 step")
    return new


def step_control_tick(state: QuadState, cmd: np.ndarray,
                      params: QuadParams = QuadParams(),
                      substeps: int = CONTROL_SUBSTEPS, drag: bool = True) -> QuadState:
    """One 50 Hz control tick: motor command held over 8 RK4 substeps."""
    omega_cmd = low_level_control(cmd, state, params)
    for _ in range(substeps):
        state = rk4_step(state, omega_cmd, params, drag=drag)
    return state


# ---------------------------------------------------------------------------
# ground-truth visual observables

_E3 = np.array([0.0, 0.0, 1.0])


@dataclass
class ObservableSample:
    """One tick of simulated vision output plus the true quantities."""

    flows_px_ms: np.ndarray       # (B, 4, 2) noisy corner flows, crop px/ms
    obs_body: np.ndarray          # (B, 4) estimated [nu(3), omega_z], body
    nu_body_true: np.ndarray      # (B, 3)
    nu_z_world_true: np.ndarray   # (B,)
    obs_camera: np.ndarray = field(default=None)


def _skew_batch(w: np.ndarray) -> np.ndarray:
    B = w.shape[0]
    S = np.zeros((B, 3, 3))
    S[:, 0, 1] = -w[:, 2]
    S[:, 0, 2] = w[:, 1]
    S[:, 1, 0] = w[:, 2]
    S[:, 1, 2] = -w[:, 0]
    S[:, 2, 0] = -w[:, 1]
    S[:, 2, 1] = w[:, 0]
    return S


def ground_truth_observables(state: QuadState, cam: CameraModel,
                             params: QuadParams = QuadParams(),
                             rng: np.random.Generator | None = None,
                             noise_std: float = FLOW_NOISE_STD,
                             noise: np.ndarray | None = None) -> ObservableSample:
    """Mimic the vision pipeline from simulator ground truth.

    Continuous homography -> corner flows -> additive Gaussian pixel-flow
    noise -> least-squares observables -> body frame. Batched; altitude
    validity is the episode loop's responsibility, but heights are floored
    to keep frozen (crashed) rows finite. An explicit (B, 4, 2) `noise`
    array overrides the rng draw (evolution shares draws population-wide).
    """
    B = state.batch
    v_body = quat_rotate_inverse(state.q, state.v)
    pz_cam = state.p[:, 2] + quat_rotate(state.q, np.tile(cam.T_CB, (B, 1)))[:, 2]
    pz_eff = np.maximum(pz_cam, 1e-3)

    omega_C = state.omega @ cam.R_CB.T
    v_C = (v_body + np.cross(state.omega, np.tile(cam.T_CB, (B, 1)))) @ cam.R_CB.T
    M = _skew_batch(omega_C) + v_C[:, :, None] * _E3[None, None, :] / pz_eff[:, None, None]
    Hdot = cam.K @ M @ cam.K_inv

    flows = np.empty((B, 4, 2))
    for k in range(4):
        x = CORNERS_CROP[k]
        proj = -(np.eye(3) - np.outer(x, _E3))
        u = (proj @ Hdot @ x).reshape(B, 3)
        flows[:, k, :] = u[:, :2]
    flows /= 1000.0  # crop px/s -> crop px/ms

    if noise is not None:
        flows = flows + noise
    elif rng is not None and noise_std > 0:
        flows = flows + rng.normal(scale=noise_std, size=flows.shape)

    fx, fy = cam.K[0, 0], cam.K[1, 1]
    flows_norm = flows * 1000.0 / np.array([fx, fy])
    L = observable_solver_matrix(cam.corners_normalized())
    obs_cam = flows_norm.reshape(B, 8) @ L.T

    R = cam.R_CB
    nu_body = obs_cam[:, :3] @ R  # R^T applied to each row
    omega_body = R[2, 2] * obs_cam[:, 3]
    obs_body = np.concatenate([nu_body, omega_body[:, None]], axis=1)

    pz_body = np.maximum(state.p[:, 2], 1e-3)
    nu_body_true = v_body / pz_body[:, None]
    nu_z_world_true = state.v[:, 2] / pz_body
    return ObservableSample(
        flows_px_ms=flows,
        obs_body=obs_body,
        nu_body_true=nu_body_true,
        nu_z_world_true=nu_z_world_true,
        obs_camera=obs_cam,
    )


def single_observables(state: QuadState, cam: CameraModel,
                       params: QuadParams = QuadParams(),
                       rng: np.random.Generator | None = None,
                       noise_std: float = FLOW_NOISE_STD):
    """Single-episode wrapper that raises below the minimum altitude."""
    if state.p[0, 2] < params.min_altitude:
        raise BelowMinAltitude(f"altitude {state.p[0, 2]:.3f} m below {params.min_altitude}")
    sample = ground_truth_observables(state, cam, params, rng, noise_std)
    to_ds = flow_unit_factor("crop_px_per_s", "ds_px_per_ms") * 1000.0
    return (
        CornerFlowSet(sample.flows_px_ms[0] * to_ds, "ds_px_per_ms"),
        VisualObservables(nu=sample.obs_body[0, :3], omega_z=float(sample.obs_body[0, 3]),
                          frame="body"),
    )


def out_of_bounds(state: QuadState, params: QuadParams = QuadParams()) -> np.ndarray:
    """Boolean mask of episodes that left the arena or crashed."""
    return (
        (np.abs(state.p[:, 0]) > params.position_bound)
        | (np.abs(state.p[:, 1]) > params.position_bound)
        | (state.p[:, 2] > params.position_bound)
        | (state.p[:, 2] < params.min_altitude)
    )
