"""Closed-loop runtime glue: observable smoothing and scaling, the merged
spikes-to-commands linear decoder, the hand-tuned PI baseline, yaw-rate
integration, and the two closed-loop modes (simulated observables driving
the vehicle model; recorded events replayed through the integer network).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import events as ev
from .evolve import LinearController, controller_output
from .homography import (
    CameraModel,
    CornerFlowSet,
    WINDOW_MS,
    convert_corner_flows,
    flow_unit_factor,
    observable_solver_matrix,
    observables_from_corner_flows,
    observables_to_body,
    yaw_rotation_2d,
)
from .quadsim import (
    QuadParams,
    QuadState,
    ground_truth_observables,
    out_of_bounds,
    quat_to_euler,
    step_control_tick,
)
from .snn import QuantizedCornerNet

CONTROL_DT = 0.02     # 50 Hz simulator control loop
REPLAY_DT = 0.005     # 200 Hz event-window cadence


@dataclass(frozen=True)
class RuntimeCoeffs:
    """Smoothing, scaling, and gain constants of the runtime loop."""

    alpha: tuple = (0.90, 0.90, 0.95, 0.90)
    beta: tuple = (0.9, 0.9, 1.0, 1.0)
    command_gain: float = 0.3
    pi_p: tuple = (0.10, 0.06, 0.06, 4.0)
    pi_i: tuple = (0.0001, 0.0003, 0.0003, 0.0)
    yaw_dt: float = 0.005

    def __post_init__(self):
        a = np.asarray(self.alpha)
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("smoothing constants must lie in (0, 1]")


def smooth_scale(raw: np.ndarray, prev: np.ndarray, coeffs: RuntimeCoeffs) -> np.ndarray:
    """One tick of the observable low-pass: y <- a*y_prev + (1-a)*b*x."""
    a = np.asarray(coeffs.alpha)
    b = np.asarray(coeffs.beta)
    return a * np.asarray(prev, dtype=float) + (1.0 - a) * b * np.asarray(raw, dtype=float)


def pi_step(error: np.ndarray, integrator: np.ndarray, coeffs: RuntimeCoeffs,
            dt: float) -> tuple[np.ndarray, np.ndarray]:
    """PI control with conditional anti-windup.

    error is [nu_err (3), omega_z_err]; the integrator channel freezes
    while its command output is saturated. Returns (command, integrator).
    """
    P = np.asarray(coeffs.pi_p)
    I = np.asarray(coeffs.pi_i)
    error = np.asarray(error, dtype=float)
    integrator = np.asarray(integrator, dtype=float)
    candidate = integrator + error * dt
    cmd_raw = P * error + I * candidate
    saturated = np.abs(cmd_raw) >= 1.0
    integrator = np.where(saturated, integrator, candidate)
    cmd = np.clip(P * error + I * integrator, -1.0, 1.0)
    return cmd, integrator


def frisbee_setpoint(nu_sp: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate the horizontal setpoint into the current body heading so a
    spinning vehicle tracks a straight world-frame line."""
    nu_sp = np.asarray(nu_sp, dtype=float)
    out = nu_sp.copy()
    out[:2] = yaw_rotation_2d(yaw) @ nu_sp[:2]
    return out


@dataclass
class MergedDecoder:
    """Single linear map from concatenated corner pooling spikes to the
    four control commands, with per-tick affine bias.

    The spike path folds decode matrices, flow-unit conversion, the
    least-squares observable solve, the camera-to-body rotation, the
    smoothing recursion's input branch, and the controller's observable
    columns into one matrix. Attitude and setpoint enter through the bias,
    and the smoothing state carries the recursive term. The component
    matrices are retained for the audited sequential path.
    """

    controller: LinearController
    decode: np.ndarray
    cam: CameraModel
    coeffs: RuntimeCoeffs | None = None
    spike_matrix: np.ndarray = field(init=False)
    observable_matrix: np.ndarray = field(init=False)
    smoothed: np.ndarray = field(init=False)

    def __post_init__(self):
        P = self.decode.shape[1]
        if self.decode.shape != (2, P):
            raise ValueError("decode matrix must be 2 x P")
        # spikes (4P) -> corner flows (8), block diagonal, ds px/ms
        D = np.zeros((8, 4 * P))
        for k in range(4):
            D[2 * k: 2 * k + 2, k * P: (k + 1) * P] = self.decode
        # ds px/ms -> normalized 1/s, per corner component
        conv = np.diag(np.tile(flow_unit_factor("ds_px_per_ms", "norm_per_s", self.cam), 4))
        # normalized corner flows -> camera observables
        L = observable_solver_matrix(self.cam.corners_normalized())
        # camera -> body
        R = self.cam.R_CB
        T = np.zeros((4, 4))
        T[:3, :3] = R.T
        T[3, 3] = R[2, 2]
        self.observable_matrix = T @ L @ conv @ D          # spikes -> body obs
        gain = self._input_gain()
        self.spike_matrix = self.controller.M[:, :4] @ np.diag(gain) @ self.observable_matrix
        self.smoothed = np.zeros(4)

    def _input_gain(self) -> np.ndarray:
        if self.coeffs is None:
            return np.ones(4)
        return (1.0 - np.asarray(self.coeffs.alpha)) * np.asarray(self.coeffs.beta)

    def reset(self):
        self.smoothed = np.zeros(4)

    def tick(self, spikes: np.ndarray, abs_roll: float, abs_pitch: float,
             nu_sp: np.ndarray, clamp: bool = True) -> np.ndarray:
        """Merged-path command for one tick; updates the smoothing state."""
        spikes = np.asarray(spikes, dtype=float).reshape(-1)
        rest = np.concatenate([[abs_roll, abs_pitch], nu_sp])
        alpha = np.asarray(self.coeffs.alpha) if self.coeffs is not None else np.zeros(4)
        bias = self.controller.M[:, :4] @ (alpha * self.smoothed) + self.controller.M[:, 4:] @ rest
        cmd = self.spike_matrix @ spikes + bias
        self.smoothed = alpha * self.smoothed + self._input_gain() * (
            self.observable_matrix @ spikes
        )
        if clamp:
            cmd = np.clip(cmd, -1.0, 1.0)
        return cmd

    def sequential_tick(self, spikes: np.ndarray, abs_roll: float, abs_pitch: float,
                        nu_sp: np.ndarray, smoothed_prev: np.ndarray,
                        clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Reference path: decode -> observables -> smooth -> controller.

        Kept deliberately as the chain of module calls so the merged path
        can be audited against it tick by tick.
        """
        P = self.decode.shape[1]
        spikes = np.asarray(spikes, dtype=float).reshape(4, P)
        flows = CornerFlowSet(spikes @ self.decode.T, "ds_px_per_ms")
        obs_c = observables_from_corner_flows(flows, self.cam)
        obs_b = observables_to_body(obs_c, self.cam).as_vector()
        if self.coeffs is not None:
            smoothed = smooth_scale(obs_b, smoothed_prev, self.coeffs)
        else:
            smoothed = obs_b
        inputs = np.concatenate([smoothed, [abs_roll, abs_pitch], nu_sp])
        cmd = self.controller.M @ inputs
        if clamp:
            cmd = np.clip(cmd, -1.0, 1.0)
        return cmd, smoothed


def merge(controller: LinearController, decode: np.ndarray,
          cam: CameraModel | None = None,
          coeffs: RuntimeCoeffs | None = None) -> MergedDecoder:
    """Build the merged spikes-to-commands decoder."""
    return MergedDecoder(controller=controller, decode=np.asarray(decode, dtype=float),
                         cam=cam or CameraModel(), coeffs=coeffs)


TELEMETRY_HEADER = [
    "t", "p_x", "p_y", "p_z", "q_w", "q_x", "q_y", "q_z",
    "v_x", "v_y", "v_z", "omega_x", "omega_y", "omega_z",
    "nu_hat_x", "nu_hat_y", "nu_hat_z", "omega_z_hat",
    "nu_gt_x", "nu_gt_y", "nu_gt_z",
    "sp_x", "sp_y", "sp_z", "omega_z_sp",
    "cmd_f", "cmd_roll", "cmd_pitch", "cmd_yaw", "mode",
]

REPLAY_HEADER = [
    "t", "window",
    "nu_hat_x", "nu_hat_y", "nu_hat_z", "omega_z_hat",
    "sp_x", "sp_y", "sp_z",
    "cmd_f", "cmd_roll", "cmd_pitch", "cmd_yaw",
    "merged_equals_sequential", "mode",
]


@dataclass
class SetpointSchedule:
    """Piecewise-constant setpoints: list of (t_start_s, nu_sp(3), omega_z_sp)."""

    entries: list

    def at(self, t: float):
        nu, wz = np.zeros(3), 0.0
        for ts, nu_i, wz_i in self.entries:
            if t >= ts:
                nu, wz = np.asarray(nu_i, dtype=float), float(wz_i)
        return nu, wz


def closed_loop_sim(controller, schedule: SetpointSchedule, duration: float,
                    seed: int = 0, mode: str = "evolved",
                    coeffs: RuntimeCoeffs | None = None,
                    frisbee: bool = False,
                    noise_std: float | None = None,
                    cam: CameraModel | None = None,
                    params: QuadParams | None = None,
                    state: QuadState | None = None):
    """Simulated-observables closed loop at 50 Hz.

    `controller` is a LinearController (mode "evolved") or ignored for
    mode "pi". Smoothing/scaling applies only when `coeffs` is given (the
    evolved controller was trained on raw estimates). Returns telemetry
    rows; the loop stops early on crash/out-of-bounds.
    """
    cam = cam or CameraModel()
    params = params or QuadParams()
    rng = np.random.default_rng(seed)
    state = state if state is not None else QuadState.hover(1, params=params)
    if noise_std is None:
        noise_std = 0.025
    integrator = np.zeros(4)
    smoothed = np.zeros(4)
    rows = []
    t = 0.0
    n_ticks = int(round(duration / CONTROL_DT))
    for _ in range(n_ticks):
        sample = ground_truth_observables(state, cam, params, rng=rng, noise_std=noise_std)
        obs = sample.obs_body[0]
        if coeffs is not None:
            smoothed = smooth_scale(obs, smoothed, coeffs)
            obs_used = smoothed
        else:
            obs_used = obs
        roll, pitch, yaw = quat_to_euler(state.q)
        nu_sp, wz_sp = schedule.at(t)
        if frisbee:
            nu_sp = frisbee_setpoint(nu_sp, float(yaw[0]))
        if mode == "pi":
            err = np.concatenate([nu_sp - obs_used[:3], [wz_sp - obs_used[3]]])
            cmd, integrator = pi_step(err, integrator, coeffs or RuntimeCoeffs(), CONTROL_DT)
        else:
            inputs = np.concatenate(
                [obs_used, [abs(float(roll[0])), abs(float(pitch[0]))], nu_sp]
            )
            cmd = controller_output(controller.M, inputs)
            if wz_sp != 0.0:
                # training always used a zero yaw-rate setpoint; inject the
                # frisbee spin directly as a yaw-rate command component
                cmd = cmd + np.array([0.0, 0.0, 0.0, wz_sp])
                cmd = np.clip(cmd, -1.0, 1.0)
        if coeffs is not None and mode != "pi":
            cmd = np.clip(cmd * coeffs.command_gain, -1.0, 1.0)
        rows.append(
            (
                t, *state.p[0], *state.q[0], *state.v[0], *state.omega[0],
                *obs_used, *sample.nu_body_true[0],
                *nu_sp, wz_sp, *cmd, mode,
            )
        )
        state = step_control_tick(state, cmd[None], params)
        t += CONTROL_DT
        if out_of_bounds(state, params)[0]:
            break
    return rows, state


def closed_loop_replay(net: QuantizedCornerNet, merged: MergedDecoder,
                       events_path, schedule: SetpointSchedule,
                       attitude_fn=None, mode: str = "evolved"):
    """Replay recorded events through the integer engine and the merged
    decoder at the 200 Hz window cadence.

    Open loop with respect to the recording (the events do not respond to
    the commands); commands and the merged-vs-sequential agreement are
    logged per tick. `attitude_fn(t) -> (|roll|, |pitch|)` defaults to
    level attitude.
    """
    net.reset(4)
    merged.reset()
    smoothed_seq = np.zeros(4)
    rows = []
    for wi, window in enumerate(ev.window_and_route(ev.load_events(events_path))):
        x = ev.encode_window(window)
        pool, _ = net.step(x)
        spikes = pool.reshape(-1)
        t = window.t_start * 1e-6
        nu_sp, _ = schedule.at(t)
        roll, pitch = attitude_fn(t) if attitude_fn else (0.0, 0.0)
        cmd = merged.tick(spikes, roll, pitch, nu_sp)
        cmd_seq, smoothed_seq = merged.sequential_tick(spikes, roll, pitch, nu_sp, smoothed_seq)
        agree = float(np.max(np.abs(cmd - cmd_seq)) <= 1e-6 * max(1.0, float(np.max(np.abs(cmd_seq)))))
        flows = CornerFlowSet(pool @ merged.decode.T, "ds_px_per_ms")
        obs = observables_to_body(observables_from_corner_flows(flows, merged.cam), merged.cam)
        rows.append(
            (
                t, wi, *obs.nu, obs.omega_z, *nu_sp, *cmd, agree, mode,
            )
        )
    return rows
