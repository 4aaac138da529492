"""Compiled batch rollout for fitness evaluation.

The vectorized numpy simulator spends its time in interpreter overhead at
population scale, so the genetic algorithm evaluates episodes through this
numba kernel instead: the per-tick observable pipeline is folded into two
precomputed linear operators and the whole 1000-tick, 8-substep episode
runs as compiled scalar arithmetic, parallel over independent episodes.
Semantics match quadsim/evolve (same equations, same shared noise stream);
a conformance test keeps the two lanes aligned.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is preinstalled in CI images
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn
        return deco

    prange = range

from .homography import CameraModel, corner_flows_from_Hdot, observable_solver_matrix
from .quadsim import GRAVITY, QuadParams, mixer_matrix, _rotor_geometry


def corner_flow_operator(cam: CameraModel) -> np.ndarray:
    """(8, 6) map from [omega_C, v_C / p_z] to corner flows in crop px/s."""
    e3 = np.array([0.0, 0.0, 1.0])
    op = np.zeros((8, 6))
    for j in range(6):
        w = np.zeros(3)
        vbar = np.zeros(3)
        if j < 3:
            w[j] = 1.0
        else:
            vbar[j - 3] = 1.0
        M = np.array(
            [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
        ) + np.outer(vbar, e3)
        Hdot = cam.K @ M @ cam.K_inv
        op[:, j] = corner_flows_from_Hdot(Hdot).flows.reshape(8)
    return op


def observable_operator(cam: CameraModel) -> np.ndarray:
    """(4, 8) map from corner flows in crop px/ms to body observables."""
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    D = np.diag(np.tile([1000.0 / fx, 1000.0 / fy], 4))
    L = observable_solver_matrix(cam.corners_normalized())
    T = np.zeros((4, 4))
    T[:3, :3] = cam.R_CB.T
    T[3, 3] = cam.R_CB[2, 2]
    return T @ L @ D


def pack_params(params: QuadParams, cam: CameraModel) -> dict:
    """All constants the kernel needs, as plain arrays and floats."""
    r, spins = _rotor_geometry(params)
    G = np.zeros((3, 4))
    G[0] = r[:, 1]
    G[1] = -r[:, 0]
    G[2] = spins * params.torque_coeff
    return {
        "flow_op": corner_flow_operator(cam),
        "obs_op": observable_operator(cam),
        "R_CB": cam.R_CB.copy(),
        "T_CB": cam.T_CB.copy(),
        "Minv": np.linalg.inv(mixer_matrix(params)),
        "G": G,
        "J": params.inertia_vec().copy(),
        "rate_gains": np.asarray(params.rate_gains, dtype=float),
        "body_rate_max": np.asarray(params.body_rate_max, dtype=float),
        "drag": np.asarray(params.drag_coeff, dtype=float),
        "mass": float(params.mass),
        "motor_tau": float(params.motor_tau),
        "thrust_map": np.asarray(params.thrust_map, dtype=float),
        "motor_min": float(params.motor_min),
        "motor_max": float(params.motor_max),
        "thrust_gain": float(params.thrust_gain),
        "attitude_gain": float(params.attitude_gain),
        "position_bound": float(params.position_bound),
        "min_altitude": float(params.min_altitude),
    }


@njit(cache=True, parallel=True)
def _rollout(state0, Ms, sp, w_fit, bias_e, noise, sr_of_e,
             flow_op, obs_op, R_CB, T_CB, Minv, G, J, rate_gains, body_rate_max,
             drag_k, mass, motor_tau, tm_a, tm_b, tm_c, motor_min, motor_max,
             thrust_gain, attitude_gain, position_bound, min_altitude,
             n_steps, substeps, dt):  # pragma: no cover - compiled
    E = state0.shape[0]
    fitness = np.zeros(E)
    for e in prange(E):
        p = state0[e, 0:3].copy()
        q = state0[e, 3:7].copy()
        v = state0[e, 7:10].copy()
        om = state0[e, 10:13].copy()
        rot = state0[e, 13:17].copy()
        M = Ms[e]
        sp_e = sp[e]
        w_e = w_fit[e]
        bias = bias_e[e]
        sr = sr_of_e[e]
        acc = 0.0
        for t in range(n_steps):
            # --- body-frame quantities
            qw, qx, qy, qz = q[0], q[1], q[2], q[3]
            # rotate world->body: conj(q) * v * q
            # v_b = R(q)^T v
            tx = 2.0 * (qy * v[2] - qz * v[1])
            ty = 2.0 * (qz * v[0] - qx * v[2])
            tz = 2.0 * (qx * v[1] - qy * v[0])
            vbx = v[0] - qw * tx + (qy * tz - qz * ty)
            vby = v[1] - qw * ty + (qz * tx - qx * tz)
            vbz = v[2] - qw * tz + (qx * ty - qy * tx)
            # camera height: p_z + (R(q) T_CB)_z
            ux = 2.0 * (qy * T_CB[2] - qz * T_CB[1])
            uy = 2.0 * (qz * T_CB[0] - qx * T_CB[2])
            uz = 2.0 * (qx * T_CB[1] - qy * T_CB[0])
            tcb_w_z = T_CB[2] + qw * uz + (qx * uy - qy * ux)
            pz_cam = p[2] + tcb_w_z
            if pz_cam < 1e-3:
                pz_cam = 1e-3
            # omega_C = R_CB omega; v_C = R_CB (v_b + om x T_CB)
            cx = om[1] * T_CB[2] - om[2] * T_CB[1]
            cy = om[2] * T_CB[0] - om[0] * T_CB[2]
            cz = om[0] * T_CB[1] - om[1] * T_CB[0]
            vcx_b = vbx + cx
            vcy_b = vby + cy
            vcz_b = vbz + cz
            x6 = np.empty(6)
            for i in range(3):
                x6[i] = R_CB[i, 0] * om[0] + R_CB[i, 1] * om[1] + R_CB[i, 2] * om[2]
                x6[3 + i] = (R_CB[i, 0] * vcx_b + R_CB[i, 1] * vcy_b
                             + R_CB[i, 2] * vcz_b) / pz_cam
            # corner flows in px/ms plus shared noise
            flows = np.empty(8)
            for i in range(8):
                s = 0.0
                for j in range(6):
                    s += flow_op[i, j] * x6[j]
                flows[i] = s / 1000.0 + noise[t, sr, i]
            # body observables
            obs = np.empty(4)
            for i in range(4):
                s = 0.0
                for j in range(8):
                    s += obs_op[i, j] * flows[j]
                obs[i] = s
            # attitude
            sinr = 2.0 * (qw * qx + qy * qz)
            cosr = 1.0 - 2.0 * (qx * qx + qy * qy)
            roll = np.arctan2(sinr, cosr)
            sinp = 2.0 * (qw * qy - qz * qx)
            if sinp > 1.0:
                sinp = 1.0
            elif sinp < -1.0:
                sinp = -1.0
            pitch = np.arcsin(sinp)
            # controller
            cmd = np.empty(4)
            for i in range(4):
                s = (M[i, 0] * obs[0] + M[i, 1] * obs[1] + M[i, 2] * obs[2]
                     + M[i, 3] * obs[3]
                     + M[i, 4] * (abs(roll) + bias) + M[i, 5] * (abs(pitch) + bias)
                     + M[i, 6] * sp_e[0] + M[i, 7] * sp_e[1] + M[i, 8] * sp_e[2])
                if s > 1.0:
                    s = 1.0
                elif s < -1.0:
                    s = -1.0
                cmd[i] = s
            # fitness accumulation
            pz_body = p[2] if p[2] > 1e-3 else 1e-3
            nu_z_w = v[2] / pz_body
            e0 = sp_e[0] - obs[0]
            e1 = sp_e[1] - obs[1]
            e2 = sp_e[2] - nu_z_w
            acc += w_e[0] * e0 * e0 + w_e[1] * e1 * e1 + w_e[2] * e2 * e2 + obs[3] * obs[3]
            # --- low-level control
            f_bar = cmd[0] * thrust_gain + GRAVITY
            tilt = np.cos(roll) * np.cos(pitch)
            if tilt < 0.5:
                tilt = 0.5
            f_bar /= tilt
            rc = np.empty(3)
            rc[0] = attitude_gain * (cmd[1] - roll)
            rc[1] = attitude_gain * (cmd[2] - pitch)
            rc[2] = cmd[3]
            for i in range(3):
                if rc[i] > body_rate_max[i]:
                    rc[i] = body_rate_max[i]
                elif rc[i] < -body_rate_max[i]:
                    rc[i] = -body_rate_max[i]
            wr = np.empty(4)
            wr[0] = mass * f_bar
            for i in range(3):
                wr[1 + i] = J[i] * rate_gains[i] * (rc[i] - om[i])
            omega_cmd = np.empty(4)
            for i in range(4):
                f_rot = (Minv[i, 0] * wr[0] + Minv[i, 1] * wr[1]
                         + Minv[i, 2] * wr[2] + Minv[i, 3] * wr[3])
                disc = tm_b * tm_b - 4.0 * tm_a * (tm_c - f_rot)
                if disc < 0.0:
                    disc = 0.0
                oc = (-tm_b + np.sqrt(disc)) / (2.0 * tm_a)
                if oc < motor_min:
                    oc = motor_min
                elif oc > motor_max:
                    oc = motor_max
                omega_cmd[i] = oc
            # --- 8 RK4 substeps
            for _ in range(substeps):
                # stage buffers
                kp = np.zeros((4, 3))
                kq = np.zeros((4, 4))
                kv = np.zeros((4, 3))
                kw = np.zeros((4, 3))
                kr = np.zeros((4, 4))
                for stage in range(4):
                    if stage == 0:
                        h = 0.0
                        ps0, ps1, ps2 = p[0], p[1], p[2]
                        qs0, qs1, qs2, qs3 = q[0], q[1], q[2], q[3]
                        vs0, vs1, vs2 = v[0], v[1], v[2]
                        ws0, ws1, ws2 = om[0], om[1], om[2]
                        rs0, rs1, rs2, rs3 = rot[0], rot[1], rot[2], rot[3]
                    else:
                        h = dt / 2.0 if stage < 3 else dt
                        si = stage - 1
                        ps0 = p[0] + h * kp[si, 0]
                        ps1 = p[1] + h * kp[si, 1]
                        ps2 = p[2] + h * kp[si, 2]
                        qs0 = q[0] + h * kq[si, 0]
                        qs1 = q[1] + h * kq[si, 1]
                        qs2 = q[2] + h * kq[si, 2]
                        qs3 = q[3] + h * kq[si, 3]
                        vs0 = v[0] + h * kv[si, 0]
                        vs1 = v[1] + h * kv[si, 1]
                        vs2 = v[2] + h * kv[si, 2]
                        ws0 = om[0] + h * kw[si, 0]
                        ws1 = om[1] + h * kw[si, 1]
                        ws2 = om[2] + h * kw[si, 2]
                        rs0 = rot[0] + h * kr[si, 0]
                        rs1 = rot[1] + h * kr[si, 1]
                        rs2 = rot[2] + h * kr[si, 2]
                        rs3 = rot[3] + h * kr[si, 3]
                    # thrusts
                    f0 = tm_a * rs0 * rs0 + tm_b * rs0 + tm_c
                    f1 = tm_a * rs1 * rs1 + tm_b * rs1 + tm_c
                    f2 = tm_a * rs2 * rs2 + tm_b * rs2 + tm_c
                    f3 = tm_a * rs3 * rs3 + tm_b * rs3 + tm_c
                    fsum = f0 + f1 + f2 + f3
                    fbar = fsum / mass
                    # v_body = R(q)^T v
                    t2x = 2.0 * (qs2 * vs2 - qs3 * vs1)
                    t2y = 2.0 * (qs3 * vs0 - qs1 * vs2)
                    t2z = 2.0 * (qs1 * vs1 - qs2 * vs0)
                    vb0 = vs0 - qs0 * t2x + (qs2 * t2z - qs3 * t2y)
                    vb1 = vs1 - qs0 * t2y + (qs3 * t2x - qs1 * t2z)
                    vb2 = vs2 - qs0 * t2z + (qs1 * t2y - qs2 * t2x)
                    # world z axis in body coordinates: zb = R(q)^T e_z
                    zb0 = 2.0 * (qs1 * qs3 - qs0 * qs2)
                    zb1 = 2.0 * (qs2 * qs3 + qs0 * qs1)
                    zb2 = 1.0 - 2.0 * (qs1 * qs1 + qs2 * qs2)
                    # flat-body drag: kx = ky = kh horizontal, kz vertical
                    kh = drag_k[0]
                    kz = drag_k[2]
                    vdotz = vb0 * zb0 + vb1 * zb1 + vb2 * zb2
                    d0 = -(kh * vb0 + (kz - kh) * vdotz * zb0)
                    d1 = -(kh * vb1 + (kz - kh) * vdotz * zb1)
                    d2 = -(kh * vb2 + (kz - kh) * vdotz * zb2)
                    ab0 = d0
                    ab1 = d1
                    ab2 = d2 + fbar
                    # dv = R(q) a_body - g e_z
                    t3x = 2.0 * (qs2 * ab2 - qs3 * ab1)
                    t3y = 2.0 * (qs3 * ab0 - qs1 * ab2)
                    t3z = 2.0 * (qs1 * ab1 - qs2 * ab0)
                    dv0 = ab0 + qs0 * t3x + (qs2 * t3z - qs3 * t3y)
                    dv1 = ab1 + qs0 * t3y + (qs3 * t3x - qs1 * t3z)
                    dv2 = ab2 + qs0 * t3z + (qs1 * t3y - qs2 * t3x) - GRAVITY
                    # torques and rate dynamics
                    tq0 = G[0, 0] * f0 + G[0, 1] * f1 + G[0, 2] * f2 + G[0, 3] * f3
                    tq1 = G[1, 0] * f0 + G[1, 1] * f1 + G[1, 2] * f2 + G[1, 3] * f3
                    tq2 = G[2, 0] * f0 + G[2, 1] * f1 + G[2, 2] * f2 + G[2, 3] * f3
                    gy0 = ws1 * (J[2] * ws2) - ws2 * (J[1] * ws1)
                    gy1 = ws2 * (J[0] * ws0) - ws0 * (J[2] * ws2)
                    gy2 = ws0 * (J[1] * ws1) - ws1 * (J[0] * ws0)
                    dw0 = (tq0 - gy0) / J[0]
                    dw1 = (tq1 - gy1) / J[1]
                    dw2 = (tq2 - gy2) / J[2]
                    # quaternion kinematics 0.5 q x (0, w)
                    dq0 = 0.5 * (-qs1 * ws0 - qs2 * ws1 - qs3 * ws2)
                    dq1 = 0.5 * (qs0 * ws0 + qs2 * ws2 - qs3 * ws1)
                    dq2 = 0.5 * (qs0 * ws1 - qs1 * ws2 + qs3 * ws0)
                    dq3 = 0.5 * (qs0 * ws2 + qs1 * ws1 - qs2 * ws0)
                    kp[stage, 0] = vs0
                    kp[stage, 1] = vs1
                    kp[stage, 2] = vs2
                    kq[stage, 0] = dq0
                    kq[stage, 1] = dq1
                    kq[stage, 2] = dq2
                    kq[stage, 3] = dq3
                    kv[stage, 0] = dv0
                    kv[stage, 1] = dv1
                    kv[stage, 2] = dv2
                    kw[stage, 0] = dw0
                    kw[stage, 1] = dw1
                    kw[stage, 2] = dw2
                    kr[stage, 0] = (omega_cmd[0] - rs0) / motor_tau
                    kr[stage, 1] = (omega_cmd[1] - rs1) / motor_tau
                    kr[stage, 2] = (omega_cmd[2] - rs2) / motor_tau
                    kr[stage, 3] = (omega_cmd[3] - rs3) / motor_tau
                c = dt / 6.0
                for i in range(3):
                    p[i] += c * (kp[0, i] + 2 * kp[1, i] + 2 * kp[2, i] + kp[3, i])
                    v[i] += c * (kv[0, i] + 2 * kv[1, i] + 2 * kv[2, i] + kv[3, i])
                    om[i] += c * (kw[0, i] + 2 * kw[1, i] + 2 * kw[2, i] + kw[3, i])
                for i in range(4):
                    q[i] += c * (kq[0, i] + 2 * kq[1, i] + 2 * kq[2, i] + kq[3, i])
                    rot[i] += c * (kr[0, i] + 2 * kr[1, i] + 2 * kr[2, i] + kr[3, i])
                    if rot[i] < motor_min:
                        rot[i] = motor_min
                    elif rot[i] > motor_max:
                        rot[i] = motor_max
                qn = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
                for i in range(4):
                    q[i] /= qn
            # termination
            if (abs(p[0]) > position_bound or abs(p[1]) > position_bound
                    or p[2] > position_bound or p[2] < min_altitude):
                break
        fitness[e] = acc
    return fitness


def rollout_fitness(state0: np.ndarray, Ms: np.ndarray, sp: np.ndarray,
                    w_fit: np.ndarray, bias_e: np.ndarray, noise: np.ndarray,
                    sr_of_e: np.ndarray, consts: dict,
                    n_steps: int, substeps: int, dt: float) -> np.ndarray:
    """Compiled-episode fitness; see evolve.evaluate_fitness_batch."""
    tm = consts["thrust_map"]
    return _rollout(
        state0, Ms, sp, w_fit, bias_e, noise, sr_of_e,
        consts["flow_op"], consts["obs_op"], consts["R_CB"], consts["T_CB"],
        consts["Minv"], consts["G"], consts["J"], consts["rate_gains"],
        consts["body_rate_max"], consts["drag"], consts["mass"],
        consts["motor_tau"], tm[0], tm[1], tm[2], consts["motor_min"],
        consts["motor_max"], consts["thrust_gain"], consts["attitude_gain"],
        consts["position_bound"], consts["min_altitude"],
        n_steps, substeps, dt,
    )
