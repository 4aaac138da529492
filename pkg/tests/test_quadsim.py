import numpy as np
import pytest

from evflight.homography import CameraModel, observable_solver_matrix
from evflight.quadsim import (
    GRAVITY,
    BelowMinAltitude,
    ObservableSample,
    QuadParams,
    QuadState,
    SimulationDiverged,
    derivative,
    drag_force,
    ground_truth_observables,
    hover_rotor_speed,
    low_level_control,
    mixer_matrix,
    out_of_bounds,
    quat_normalize,
    quat_rotate,
    quat_rotate_inverse,
    quat_to_euler,
    rk4_step,
    rotor_thrust,
    single_observables,
    step_control_tick,
)

P = QuadParams()
CAM = CameraModel()


def hover_thrusts(batch=1):
    return np.full((batch, 4), P.mass * GRAVITY / 4.0)


class TestQuaternions:
    def test_rotate_round_trip(self):
        rng = np.random.default_rng(0)
        q = quat_normalize(rng.normal(size=(5, 4)))
        v = rng.normal(size=(5, 3))
        back = quat_rotate_inverse(q, quat_rotate(q, v))
        assert np.allclose(back, v, atol=1e-12)

    def test_euler_identity(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        r, p_, y = quat_to_euler(q)
        assert np.allclose([r, p_, y], 0.0)

    def test_euler_pure_roll(self):
        a = 0.3
        q = np.array([[np.cos(a / 2), np.sin(a / 2), 0.0, 0.0]])
        r, p_, y = quat_to_euler(q)
        assert r[0] == pytest.approx(a)
        assert abs(p_[0]) < 1e-12 and abs(y[0]) < 1e-12


class TestDerivative:
    def test_hover_equilibrium(self):
        s = QuadState.hover()
        dp, dq, dv, domega, drotor = derivative(s, hover_thrusts(), s.rotor, P)
        assert np.abs(dv).max() < 1e-9
        assert np.abs(domega).max() < 1e-12
        assert np.abs(dp).max() == 0.0
        assert np.abs(drotor).max() < 1e-9

    def test_zero_thrust_freefall(self):
        s = QuadState.hover()
        _, _, dv, _, _ = derivative(s, np.zeros((1, 4)), s.rotor, P)
        assert np.allclose(dv[0], [0.0, 0.0, -GRAVITY])

    def test_pure_yaw_torque(self):
        s = QuadState.hover()
        t = 0.5
        thrusts = np.array([[t, -t, t, -t]])  # zero force, zero roll/pitch torque
        _, _, dv, domega, _ = derivative(s, thrusts, s.rotor, P)
        tau_z = 4 * t * P.torque_coeff
        assert domega[0, 2] == pytest.approx(tau_z / P.inertia[2])
        assert np.abs(domega[0, :2]).max() < 1e-12
        assert np.allclose(dv[0], [0, 0, -GRAVITY])  # zero net thrust

    def test_gyroscopic_coupling(self):
        s = QuadState.hover()
        s.omega = np.array([[1.0, 2.0, 3.0]])
        _, _, _, domega, _ = derivative(s, np.zeros((1, 4)), s.rotor, P)
        J = np.asarray(P.inertia)
        expected = -np.cross(s.omega[0], J * s.omega[0]) / J
        assert np.allclose(domega[0], expected)


class TestDrag:
    def test_zero_velocity(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        assert np.abs(drag_force(np.zeros((1, 3)), q, P)).max() == 0.0

    def test_level_forward_velocity(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        d = drag_force(np.array([[2.0, 0.0, 0.0]]), q, P)
        assert np.allclose(d[0], [-1.0, 0.0, 0.0])

    def test_level_vertical_velocity_undamped(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        d = drag_force(np.array([[0.0, 0.0, 3.0]]), q, P)
        assert np.abs(d).max() < 1e-12

    def test_flat_body_invariance_under_roll(self):
        # world-vertical velocity stays undamped even when the body rolls
        a = 0.4
        q = np.array([[np.cos(a / 2), np.sin(a / 2), 0.0, 0.0]])
        v_world = np.array([[0.0, 0.0, 1.5]])
        v_body = quat_rotate_inverse(q, v_world)
        d = drag_force(v_body, q, P)
        assert np.abs(d).max() < 1e-9


class TestLowLevelControl:
    def test_hover_command_solves_thrust_map(self):
        s = QuadState.hover()
        omega_cmd = low_level_control(np.zeros((1, 4)), s, P)
        expected = hover_rotor_speed(P)
        assert np.allclose(omega_cmd, expected, rtol=1e-9)
        # sanity: that speed produces mg/4 per rotor
        assert rotor_thrust(np.array(expected), P) == pytest.approx(P.mass * GRAVITY / 4)

    def test_full_thrust_is_seven_g_before_compensation(self):
        from evflight.quadsim import thrust_attitude_commands

        s = QuadState.hover()
        cmd = np.array([[1.0, 0.0, 0.0, 0.0]])
        f_bar, _ = thrust_attitude_commands(cmd, s, P)
        assert f_bar[0] == pytest.approx(7 * GRAVITY)
        # the stock thrust map cannot realize 7g: motors saturate at max rpm
        omega_cmd = low_level_control(cmd, s, P)
        assert np.allclose(omega_cmd, P.motor_max)

    def test_roll_command_maps_to_rate(self):
        s = QuadState.hover()
        cmd = np.array([[0.0, 0.4, 0.0, 0.0]])
        omega_cmd = low_level_control(cmd, s, P)
        thrusts = rotor_thrust(omega_cmd, P)
        M = mixer_matrix(P)
        wrench = M @ thrusts[0]
        expected_tau_x = P.inertia[0] * P.rate_gains[0] * (0.4 * P.attitude_gain)
        assert wrench[1] == pytest.approx(expected_tau_x, rel=1e-6)

    def test_commands_clamped(self):
        s = QuadState.hover()
        cmd = np.array([[5.0, -5.0, 5.0, -5.0]])  # clamps to +/-1
        omega_cmd = low_level_control(cmd, s, P)
        assert np.all(omega_cmd >= P.motor_min) and np.all(omega_cmd <= P.motor_max)

    def test_motor_speed_clamps(self):
        s = QuadState.hover()
        cmd = np.array([[1.0, 1.0, 1.0, 1.0]])
        omega_cmd = low_level_control(cmd, s, P)
        assert omega_cmd.max() <= P.motor_max + 1e-9


class TestRK4:
    def test_hover_fixed_point(self):
        s = QuadState.hover()
        s2 = rk4_step(s, s.rotor.copy(), P)
        assert np.abs(s2.p - s.p).max() < 1e-12
        assert np.abs(s2.v - s.v).max() < 1e-12
        assert np.abs(s2.q - s.q).max() < 1e-12

    def test_ballistic_free_fall(self):
        # thrust forced to zero through a zeroed thrust map
        p0 = QuadParams(thrust_map=(0.0, 0.0, 0.0))
        s = QuadState.hover(pos=(0, 0, 50.0), params=p0)
        for _ in range(400):  # 1 s
            s = rk4_step(s, s.rotor.copy(), p0)
        dz = s.p[0, 2] - 50.0
        assert dz == pytest.approx(-0.5 * GRAVITY, abs=1e-6)

    def test_fourth_order_convergence(self):
        # Richardson: halving dt reduces error ~16x on a maneuvering run
        def run(dt):
            s = QuadState.hover()
            s.omega = np.array([[0.4, -0.3, 0.2]])
            s.v = np.array([[0.5, 0.0, -0.2]])
            cmd = np.full((1, 4), 1100.0)
            t = 0.0
            while t < 0.5 - 1e-12:
                s = rk4_step(s, cmd, P, dt=dt)
                t += dt
            return np.concatenate([s.p[0], s.v[0], s.q[0]])

        ref = run(0.000625 / 2)
        e1 = np.linalg.norm(run(0.005) - ref)
        e2 = np.linalg.norm(run(0.0025) - ref)
        e3 = np.linalg.norm(run(0.00125) - ref)
        r1, r2 = e1 / e2, e2 / e3
        assert 16 * 0.8 < r1 < 16 * 1.2 or 16 * 0.8 < r2 < 16 * 1.2, (r1, r2)

    def test_energy_conservation_without_forces(self):
        p0 = QuadParams(thrust_map=(0.0, 0.0, 0.0), drag_coeff=(0.0, 0.0, 0.0))
        s = QuadState.hover(pos=(0, 0, 100.0), params=p0)
        s.v = np.array([[2.0, -1.0, 0.5]])

        def energy(st):
            return 0.5 * P.mass * (st.v[0] @ st.v[0]) + P.mass * GRAVITY * st.p[0, 2]

        e0 = energy(s)
        for _ in range(400):
            s = rk4_step(s, s.rotor.copy(), p0, drag=False)
        assert abs(energy(s) - e0) / e0 < 1e-9

    def test_quaternion_norm_maintained(self):
        s = QuadState.hover()
        s.omega = np.array([[2.0, -3.0, 1.0]])
        for _ in range(200):
            s = rk4_step(s, s.rotor.copy(), P)
            n = np.linalg.norm(s.q[0])
            assert abs(n - 1.0) < 1e-9

    def test_nan_detection(self):
        s = QuadState.hover()
        s.v = np.array([[np.nan, 0.0, 0.0]])
        with pytest.raises(SimulationDiverged):
            rk4_step(s, s.rotor.copy(), P)

    def test_hover_drift_under_closed_loop(self):
        # attitude-compensated hover command, no noise: < 1 cm over 5 s
        s = QuadState.hover()
        cmd = np.zeros((1, 4))
        for _ in range(250):  # 5 s at 50 Hz
            s = step_control_tick(s, cmd, P)
        drift = np.linalg.norm(s.p[0] - [0, 0, 2.0])
        assert drift < 0.01, drift


class TestGroundTruthObservables:
    def test_noiseless_hover_is_zero(self):
        s = QuadState.hover()
        out = ground_truth_observables(s, CAM, P, rng=None)
        assert np.abs(out.obs_body).max() < 1e-9
        assert np.abs(out.flows_px_ms).max() < 1e-9

    def test_vertical_descent_divergence(self):
        s = QuadState.hover(pos=(0, 0, 2.0))
        s.v = np.array([[0.0, 0.0, -1.0]])
        out = ground_truth_observables(s, CAM, P, rng=None)
        # nu_z^B = v_z / p_z = -0.5 1/s; camera offset shifts it slightly
        assert out.obs_body[0, 2] == pytest.approx(-0.5, rel=0.02)
        assert out.nu_body_true[0, 2] == pytest.approx(-0.5)
        assert out.nu_z_world_true[0] == pytest.approx(-0.5)

    def test_yaw_rate_estimated(self):
        s = QuadState.hover()
        s.omega = np.array([[0.0, 0.0, 0.7]])
        out = ground_truth_observables(s, CAM, P, rng=None)
        assert out.obs_body[0, 3] == pytest.approx(0.7, rel=1e-6)

    def test_noise_propagation_matches_linear_model(self):
        # Monte-Carlo vs analytic covariance through the LS solve
        rng = np.random.default_rng(123)
        s = QuadState.hover(batch=100000)
        out = ground_truth_observables(s, CAM, P, rng=rng, noise_std=0.025)
        emp_std = out.obs_camera.std(axis=0)

        fx, fy = CAM.K[0, 0], CAM.K[1, 1]
        conv = np.tile([1000.0 / fx, 1000.0 / fy], 4)
        L = observable_solver_matrix(CAM.corners_normalized())
        cov = (L * conv**2 * 0.025**2) @ L.T
        ana_std = np.sqrt(np.diag(cov))
        assert np.allclose(emp_std, ana_std, rtol=0.02)

    def test_single_wrapper_raises_below_min_altitude(self):
        s = QuadState.hover(pos=(0, 0, 0.1))
        with pytest.raises(BelowMinAltitude):
            single_observables(s, CAM, P)

    def test_out_of_bounds_mask(self):
        s = QuadState.hover(batch=3)
        s.p[1] = [11.0, 0, 2.0]
        s.p[2] = [0, 0, 0.1]
        assert np.array_equal(out_of_bounds(s, P), [False, True, True])


class TestMixer:
    def test_mixer_invertible(self):
        M = mixer_matrix(P)
        assert abs(np.linalg.det(M)) > 1e-9

    def test_uniform_thrust_no_torque(self):
        M = mixer_matrix(P)
        wrench = M @ np.full(4, 2.0)
        assert wrench[0] == pytest.approx(8.0)
        assert np.abs(wrench[1:]).max() < 1e-12
