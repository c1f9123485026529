"""IMU propagation, preintegration, and bridging checks.

Oracles: closed-form constant-acceleration motion, fine-substep RK4
re-integration, scipy.spatial.transform re-implementations of the discrete
sums, Monte-Carlo noise sampling, and central finite differences.
"""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gnssvio.geodesy import GRAVITY
from gnssvio.imu import (ImuBuffer, ImuNoise, ImuSample, ImuSegments,
                         bridge_to_epoch, empty_preintegration, preintegrate,
                         propagate, segments_from_samples)
from gnssvio.rotations import (apply_left_error, quat_left_error, quat_multiply,
                               quat_normalize, quat_to_matrix, quat_from_rotvec,
                               exp_so3, log_so3)
from gnssvio.state import ClonePose, ExtraImu

from oracles import numerical_jacobian, relative_jacobian_error

GRAV = np.array([0.0, 0.0, GRAVITY])
QUIET_NOISE = ImuNoise(1.7e-4, 2.0e-3, 1.0e-5, 1.0e-4)


def random_clone_extra(rng, t=0.0):
    q = quat_normalize(rng.standard_normal(4))
    clone = ClonePose(q=q, p=rng.standard_normal(3) * 5.0, t=t)
    extra = ExtraImu(v=rng.standard_normal(3), ba=rng.standard_normal(3) * 0.05,
                     bg=rng.standard_normal(3) * 0.005)
    return clone, extra


def random_segments(rng, n=25, dt=0.004, gyro_scale=0.6, accel_scale=4.0):
    g = rng.standard_normal((n + 1, 3)) * gyro_scale
    a = rng.standard_normal((n + 1, 3)) * accel_scale
    samples = [ImuSample(t=i * dt, gyro=g[i], accel=a[i]) for i in range(n + 1)]
    return segments_from_samples(samples)


def test_hover_is_stationary_equilibrium():
    rng = np.random.default_rng(0)
    q = quat_normalize(rng.standard_normal(4))
    ba = rng.standard_normal(3) * 0.02
    bg = rng.standard_normal(3) * 0.002
    R = quat_to_matrix(q)
    samples = [ImuSample(t=i * 0.004, gyro=bg, accel=ba - R.T @ GRAV)
               for i in range(51)]
    clone = ClonePose(q=q, p=np.array([1.0, -2.0, 3.0]), t=0.0)
    extra = ExtraImu(v=np.zeros(3), ba=ba, bg=bg)
    c2, e2, _, _ = propagate(clone, extra, segments_from_samples(samples),
                             QUIET_NOISE, GRAV)
    np.testing.assert_allclose(c2.p, clone.p, atol=1e-12)
    np.testing.assert_allclose(e2.v, 0.0, atol=1e-12)
    np.testing.assert_allclose(quat_to_matrix(c2.q), R, atol=1e-12)


def test_constant_acceleration_closed_form():
    # zero rotation, constant specific force: p = p0 + v0*T + 0.5*(a+g)*T^2
    rng = np.random.default_rng(1)
    a = rng.standard_normal(3) * 3.0
    samples = [ImuSample(t=i * 0.01, gyro=np.zeros(3), accel=a) for i in range(101)]
    clone = ClonePose(q=np.array([0.0, 0.0, 0.0, 1.0]), p=rng.standard_normal(3), t=0.0)
    extra = ExtraImu(v=rng.standard_normal(3), ba=np.zeros(3), bg=np.zeros(3))
    c2, e2, _, _ = propagate(clone, extra, segments_from_samples(samples),
                             QUIET_NOISE, GRAV)
    T = 1.0
    np.testing.assert_allclose(e2.v, extra.v + (a + GRAV) * T, rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        c2.p, clone.p + extra.v * T + 0.5 * (a + GRAV) * T * T, rtol=0, atol=1e-12)


def _rk4_oracle(clone, extra, segments, gravity, substeps=64):
    """Re-integrate the held-input ODE with fine RK4 on (q, p, v)."""
    q, p, v = clone.q.copy(), clone.p.copy(), extra.v.copy()

    def deriv(q, p, v, omega, f):
        R = quat_to_matrix(quat_normalize(q))
        # quaternion kinematics: q_dot = 0.5 * q x [omega, 0]
        qdot = 0.5 * quat_multiply(q, np.append(omega, 0.0))
        return qdot, v, gravity + R @ f

    for dt, w_m, a_m in zip(segments.dts, segments.gyro0, segments.accel0):
        omega, f = w_m - extra.bg, a_m - extra.ba
        h = dt / substeps
        for _ in range(substeps):
            k1 = deriv(q, p, v, omega, f)
            k2 = deriv(q + 0.5 * h * k1[0], p + 0.5 * h * k1[1], v + 0.5 * h * k1[2], omega, f)
            k3 = deriv(q + 0.5 * h * k2[0], p + 0.5 * h * k2[1], v + 0.5 * h * k2[2], omega, f)
            k4 = deriv(q + h * k3[0], p + h * k3[1], v + h * k3[2], omega, f)
            q = quat_normalize(q + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
            p = p + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            v = v + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return q, p, v


def test_propagate_matches_fine_rk4():
    rng = np.random.default_rng(2)
    for _ in range(5):
        clone, extra = random_clone_extra(rng)
        segments = random_segments(rng, n=12, dt=0.01)
        c2, e2, _, _ = propagate(clone, extra, segments, QUIET_NOISE, GRAV)
        q_o, p_o, v_o = _rk4_oracle(clone, extra, segments, GRAV)
        assert np.linalg.norm(quat_left_error(c2.q, q_o)) < 1e-9
        np.testing.assert_allclose(c2.p, p_o, atol=1e-9)
        np.testing.assert_allclose(e2.v, v_o, atol=1e-9)


def _propagate_error_map(clone, extra, segments, gravity):
    """15-dim error in, 15-dim error out, for finite-difference checks."""
    c0, e0, _, _ = propagate(clone, extra, segments, QUIET_NOISE, gravity)

    def fn(dx):
        c = ClonePose(q=apply_left_error(dx[0:3], clone.q), p=clone.p + dx[3:6], t=clone.t)
        e = ExtraImu(v=extra.v + dx[6:9], ba=extra.ba + dx[9:12], bg=extra.bg + dx[12:15])
        c2, e2, _, _ = propagate(c, e, segments, QUIET_NOISE, gravity)
        return np.concatenate([quat_left_error(c2.q, c0.q), c2.p - c0.p,
                               e2.v - e0.v, e2.ba - e0.ba, e2.bg - e0.bg])
    return fn


def test_transition_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(8):
        clone, extra = random_clone_extra(rng)
        segments = random_segments(rng, n=10)
        _, _, Phi, _ = propagate(clone, extra, segments, QUIET_NOISE, GRAV)
        # position-scale outputs need a coarser step to keep roundoff down
        J_num = numerical_jacobian(_propagate_error_map(clone, extra, segments, GRAV),
                                   np.zeros(15), eps=1e-5)
        worst = max(worst, relative_jacobian_error(Phi, J_num))
    assert worst < 1e-5


def _batched_exp(phi):
    """Rodrigues formula over a batch of rotation vectors, (N,3) -> (N,3,3)."""
    return Rotation.from_rotvec(phi).as_matrix()


def test_process_noise_matches_monte_carlo():
    rng = np.random.default_rng(4)
    clone, extra = random_clone_extra(rng)
    n_steps, dt = 20, 0.004
    segments = random_segments(rng, n=n_steps, dt=dt)
    noise = ImuNoise(gyro_white=2e-3, accel_white=2e-2, gyro_walk=1e-4, accel_walk=1e-3)
    _, _, _, Qd = propagate(clone, extra, segments, noise, GRAV)

    draws = 12000
    R = np.broadcast_to(quat_to_matrix(clone.q), (draws, 3, 3)).copy()
    p = np.broadcast_to(clone.p, (draws, 3)).copy()
    v = np.broadcast_to(extra.v, (draws, 3)).copy()
    dba = np.zeros((draws, 3))
    dbg = np.zeros((draws, 3))
    for k in range(n_steps):
        w = segments.gyro0[k] - extra.bg - dbg
        f = segments.accel0[k] - extra.ba - dba
        w = w - rng.standard_normal((draws, 3)) * (noise.gyro_white / np.sqrt(dt))
        f = f - rng.standard_normal((draws, 3)) * (noise.accel_white / np.sqrt(dt))
        theta = w * dt
        ang = np.linalg.norm(theta, axis=1, keepdims=True)
        # exact constant-input step, batched: p uses dt^2*Gamma2, v uses dt*Jl
        Rstep = _batched_exp(theta)
        axis = theta / np.where(ang > 0, ang, 1.0)
        K = np.zeros((draws, 3, 3))
        K[:, 0, 1], K[:, 0, 2], K[:, 1, 0] = -axis[:, 2], axis[:, 1], axis[:, 2]
        K[:, 1, 2], K[:, 2, 0], K[:, 2, 1] = -axis[:, 0], -axis[:, 1], axis[:, 0]
        a = ang[:, :, None]
        sa, ca = np.sin(a), np.cos(a)
        with np.errstate(invalid="ignore", divide="ignore"):
            Jl = (np.eye(3) + np.where(a > 1e-9, (1 - ca) / a, 0.0) * K
                  + np.where(a > 1e-9, (a - sa) / a, 0.0) * (K @ K))
            G2 = (0.5 * np.eye(3) + np.where(a > 1e-9, (a - sa) / a**2, 0.0) * K
                  + np.where(a > 1e-9, (0.5 * a**2 + ca - 1) / a**2, 0.0) * (K @ K))
        Rf_v = np.einsum("nij,njk,nk->ni", R, dt * Jl, f)
        Rf_p = np.einsum("nij,njk,nk->ni", R, dt * dt * G2, f)
        p = p + v * dt + 0.5 * GRAV * dt * dt + Rf_p
        v = v + GRAV * dt + Rf_v
        R = R @ Rstep
        dba = dba + rng.standard_normal((draws, 3)) * (noise.accel_walk * np.sqrt(dt))
        dbg = dbg + rng.standard_normal((draws, 3)) * (noise.gyro_walk * np.sqrt(dt))

    c0, e0, _, _ = propagate(clone, extra, segments, noise, GRAV)
    R0 = quat_to_matrix(c0.q)
    dtheta = Rotation.from_matrix(R @ R0.T).as_rotvec()
    err = np.hstack([dtheta, p - c0.p, v - e0.v, dba, dbg])
    Q_mc = np.cov(err.T)
    scale = np.sqrt(np.outer(np.diag(Q_mc), np.diag(Q_mc)))
    mask = scale > 1e-18
    rel = np.abs(Qd - Q_mc)[mask] / scale[mask]
    assert np.max(rel) < 0.15


def test_split_interval_composition_is_exact():
    rng = np.random.default_rng(5)
    buf = ImuBuffer(retention=10.0)
    for i in range(26):
        buf.push(ImuSample(t=i * 0.004, gyro=rng.standard_normal(3) * 0.5,
                           accel=rng.standard_normal(3) * 3.0))
    clone, extra = random_clone_extra(rng)
    t0, t1, t2 = 0.0, 0.0461, 0.1  # t1 splits a sample interval
    c_full, e_full, Phi_full, Q_full = propagate(
        clone, extra, buf.between(t0, t2), QUIET_NOISE, GRAV)
    c_a, e_a, Phi_a, Q_a = propagate(clone, extra, buf.between(t0, t1), QUIET_NOISE, GRAV)
    c_b, e_b, Phi_b, Q_b = propagate(c_a, e_a, buf.between(t1, t2), QUIET_NOISE, GRAV)
    assert np.linalg.norm(quat_left_error(c_b.q, c_full.q)) < 1e-9
    np.testing.assert_allclose(c_b.p, c_full.p, atol=1e-9)
    np.testing.assert_allclose(e_b.v, e_full.v, atol=1e-9)
    np.testing.assert_allclose(Phi_b @ Phi_a, Phi_full, atol=1e-9)
    # process noise composes exactly only across sample-aligned cuts (a
    # mid-sample cut changes the held-noise discretization of that interval)
    t1 = 0.048
    q_a = propagate(clone, extra, buf.between(t0, t1), QUIET_NOISE, GRAV)
    c_a2, e_a2, Phi_a2, Q_a2 = q_a
    _, _, Phi_b2, Q_b2 = propagate(c_a2, e_a2, buf.between(t1, t2), QUIET_NOISE, GRAV)
    np.testing.assert_allclose(Phi_b2 @ Q_a2 @ Phi_b2.T + Q_b2, Q_full,
                               atol=1e-9 * np.max(np.abs(Q_full)))


def test_circular_motion_preserves_speed():
    # constant-rate coordinated turn: body rates and specific force are constant
    speed, yaw_rate, dt = 5.0, 0.3, 0.004
    f_body = np.array([0.0, speed * yaw_rate, 0.0]) - np.array([0.0, 0.0, GRAVITY])
    n = int(60.0 / dt)
    segs = ImuSegments(dts=np.full(n, dt),
                       gyro0=np.tile([0.0, 0.0, yaw_rate], (n, 1)),
                       accel0=np.tile(f_body, (n, 1)),
                       gyro1=np.tile([0.0, 0.0, yaw_rate], (n, 1)),
                       accel1=np.tile(f_body, (n, 1)))
    clone = ClonePose(q=np.array([0.0, 0.0, 0.0, 1.0]), p=np.zeros(3), t=0.0)
    extra = ExtraImu(v=np.array([speed, 0.0, 0.0]), ba=np.zeros(3), bg=np.zeros(3))
    _, e2, _, _ = propagate(clone, extra, segs, QUIET_NOISE, GRAV)
    assert abs(np.linalg.norm(e2.v) - speed) < 1e-6


def test_preintegration_trivial_and_pure_yaw():
    bg = np.array([0.01, -0.02, 0.005])
    ba = np.array([0.1, 0.0, -0.2])
    samples = [ImuSample(t=i * 0.01, gyro=bg, accel=ba) for i in range(21)]
    pre = preintegrate(segments_from_samples(samples), bg, ba, QUIET_NOISE)
    np.testing.assert_allclose(pre.delta_rot_q, [0, 0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(pre.delta_vel, 0.0, atol=1e-15)
    np.testing.assert_allclose(pre.delta_pos, 0.0, atol=1e-15)

    rate = 0.7
    samples = [ImuSample(t=i * 0.01, gyro=[0, 0, rate], accel=np.zeros(3))
               for i in range(51)]
    pre = preintegrate(segments_from_samples(samples), np.zeros(3), np.zeros(3),
                       QUIET_NOISE)
    np.testing.assert_allclose(quat_to_matrix(pre.delta_rot_q),
                               exp_so3([0, 0, rate * 0.5]), atol=1e-12)


def _direct_sums_oracle(segments, bg, ba, midpoint):
    """Straightforward re-accumulation of the discrete sums via scipy."""
    if midpoint:
        gyr = 0.5 * (segments.gyro0 + segments.gyro1)
        acc = 0.5 * (segments.accel0 + segments.accel1)
    else:
        gyr, acc = segments.gyro0, segments.accel0
    rot = Rotation.identity()
    beta = np.zeros(3)
    alpha = np.zeros(3)
    for dt, w, a in zip(segments.dts, gyr, acc):
        C = rot.as_matrix()
        f = a - ba
        alpha = alpha + beta * dt + 0.5 * C @ f * dt * dt
        beta = beta + C @ f * dt
        rot = rot * Rotation.from_rotvec((w - bg) * dt)
    return rot, beta, alpha


@pytest.mark.parametrize("scheme", ["euler", "midpoint"])
def test_preintegration_matches_direct_sums(scheme):
    rng = np.random.default_rng(6)
    segments = random_segments(rng, n=20, dt=0.01)
    bg, ba = rng.standard_normal(3) * 0.01, rng.standard_normal(3) * 0.1
    pre = preintegrate(segments, bg, ba, QUIET_NOISE, scheme=scheme)
    rot_o, beta_o, alpha_o = _direct_sums_oracle(segments, bg, ba,
                                                 midpoint=(scheme == "midpoint"))
    np.testing.assert_allclose(quat_to_matrix(pre.delta_rot_q), rot_o.as_matrix(),
                               atol=1e-10)
    np.testing.assert_allclose(pre.delta_vel, beta_o, atol=1e-10)
    np.testing.assert_allclose(pre.delta_pos, alpha_o, atol=1e-10)


def test_preintegration_bias_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(8):
        segments = random_segments(rng, n=15)
        bg, ba = rng.standard_normal(3) * 0.01, rng.standard_normal(3) * 0.1
        pre = preintegrate(segments, bg, ba, QUIET_NOISE)

        def fn(db):
            p2 = preintegrate(segments, bg + db[0:3], ba + db[3:6], QUIET_NOISE)
            # rotation error in the bias-Jacobian convention: right-side tangent
            drot = log_so3(quat_to_matrix(pre.delta_rot_q).T
                           @ quat_to_matrix(p2.delta_rot_q))
            return np.concatenate([drot, p2.delta_vel - pre.delta_vel,
                                   p2.delta_pos - pre.delta_pos])

        J = np.zeros((9, 6))
        J[0:3, 0:3] = pre.d_rot_d_bg
        J[3:6, 0:3] = pre.d_vel_d_bg
        J[3:6, 3:6] = pre.d_vel_d_ba
        J[6:9, 0:3] = pre.d_pos_d_bg
        J[6:9, 3:6] = pre.d_pos_d_ba
        worst = max(worst, relative_jacobian_error(J, numerical_jacobian(fn, np.zeros(6))))
    assert worst < 1e-5


def test_bias_correction_error_shrinks_quadratically():
    rng = np.random.default_rng(8)
    segments = random_segments(rng, n=25)
    bg, ba = np.zeros(3), np.zeros(3)
    pre = preintegrate(segments, bg, ba, QUIET_NOISE)

    def correction_error(db_g, db_a):
        exact = preintegrate(segments, bg + db_g, ba + db_a, QUIET_NOISE)
        q_corr = quat_multiply(pre.delta_rot_q,
                               quat_from_rotvec(pre.d_rot_d_bg @ db_g))
        beta = pre.delta_vel + pre.d_vel_d_bg @ db_g + pre.d_vel_d_ba @ db_a
        alpha = pre.delta_pos + pre.d_pos_d_bg @ db_g + pre.d_pos_d_ba @ db_a
        return (np.linalg.norm(quat_left_error(exact.delta_rot_q, q_corr))
                + np.linalg.norm(exact.delta_vel - beta)
                + np.linalg.norm(exact.delta_pos - alpha))

    db_g, db_a = np.array([0.02, -0.015, 0.01]), np.array([0.2, 0.1, -0.15])
    e1 = correction_error(db_g, db_a)
    e2 = correction_error(0.5 * db_g, 0.5 * db_a)
    assert e1 > 0
    assert e1 / e2 > 3.0  # quadratic error halves the step -> ~4x smaller


def test_preintegration_noise_matches_monte_carlo():
    rng = np.random.default_rng(9)
    n_steps, dt = 20, 0.01
    segments = random_segments(rng, n=n_steps, dt=dt)
    noise = ImuNoise(gyro_white=2e-3, accel_white=2e-2, gyro_walk=0.0, accel_walk=0.0)
    pre = preintegrate(segments, np.zeros(3), np.zeros(3), noise)

    draws = 10000
    C = np.broadcast_to(np.eye(3), (draws, 3, 3)).copy()
    beta = np.zeros((draws, 3))
    alpha = np.zeros((draws, 3))
    for k in range(n_steps):
        w = segments.gyro0[k] - rng.standard_normal((draws, 3)) * (noise.gyro_white / np.sqrt(dt))
        f = segments.accel0[k] - rng.standard_normal((draws, 3)) * (noise.accel_white / np.sqrt(dt))
        Cf = np.einsum("nij,nj->ni", C, f)
        alpha = alpha + beta * dt + 0.5 * Cf * dt * dt
        beta = beta + Cf * dt
        C = C @ _batched_exp(w * dt)
    C0 = quat_to_matrix(pre.delta_rot_q)
    dtheta = Rotation.from_matrix(np.einsum("ij,njk->nik", C0.T, C)).as_rotvec()
    err = np.hstack([dtheta, beta - pre.delta_vel, alpha - pre.delta_pos])
    Q_mc = np.cov(err.T)
    scale = np.sqrt(np.outer(np.diag(Q_mc), np.diag(Q_mc)))
    rel = np.abs(pre.noise_cov - Q_mc) / scale
    assert np.max(rel) < 0.15


def test_bridge_identity_for_coincident_epoch():
    rng = np.random.default_rng(10)
    clone, extra = random_clone_extra(rng, t=3.0)
    pre = empty_preintegration(extra.bg, extra.ba)
    out = bridge_to_epoch(clone, extra, pre, GRAV, expected_duration=0.0)
    np.testing.assert_allclose(out.q, clone.q, atol=1e-15)
    np.testing.assert_allclose(out.p, clone.p, atol=1e-15)
    np.testing.assert_allclose(out.v, extra.v, atol=1e-15)
    np.testing.assert_allclose(out.jac[:, :9], np.eye(9), atol=1e-15)
    np.testing.assert_allclose(out.cov, 0.0, atol=1e-15)


def test_bridge_recovers_straight_line_truth():
    # constant-velocity level flight: zero rates, specific force cancels gravity
    v = np.array([3.0, -1.0, 0.0])
    p0 = np.array([10.0, 20.0, -5.0])
    dt, n = 0.004, 50
    samples = [ImuSample(t=i * dt, gyro=np.zeros(3), accel=-GRAV) for i in range(n + 1)]
    segments = segments_from_samples(samples)
    pre = preintegrate(segments, np.zeros(3), np.zeros(3), QUIET_NOISE)
    T = n * dt
    clone_i = ClonePose(q=np.array([0.0, 0.0, 0.0, 1.0]), p=p0 + v * T, t=T)
    extra_i = ExtraImu(v=v, ba=np.zeros(3), bg=np.zeros(3))
    out = bridge_to_epoch(clone_i, extra_i, pre, GRAV, expected_duration=T)
    np.testing.assert_allclose(out.p, p0, atol=1e-6)
    np.testing.assert_allclose(out.v, v, atol=1e-6)


def test_bridge_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(6):
        clone, extra = random_clone_extra(rng, t=1.0)
        segments = random_segments(rng, n=20)
        # stale reference biases exercise the correction path
        bg_ref = extra.bg + rng.standard_normal(3) * 0.002 * (trial % 2)
        ba_ref = extra.ba + rng.standard_normal(3) * 0.02 * (trial % 2)
        pre = preintegrate(segments, bg_ref, ba_ref, QUIET_NOISE)
        base = bridge_to_epoch(clone, extra, pre, GRAV)

        def fn(dx):
            c = ClonePose(q=apply_left_error(dx[0:3], clone.q), p=clone.p + dx[3:6],
                          t=clone.t)
            e = ExtraImu(v=extra.v + dx[6:9], ba=extra.ba + dx[9:12],
                         bg=extra.bg + dx[12:15])
            out = bridge_to_epoch(c, e, pre, GRAV)
            return np.concatenate([quat_left_error(out.q, base.q),
                                   out.p - base.p, out.v - base.v])

        worst = max(worst, relative_jacobian_error(
            base.jac, numerical_jacobian(fn, np.zeros(15), eps=1e-5)))
    assert worst < 1e-5


def test_buffer_slicing_and_errors():
    buf = ImuBuffer(retention=0.5)
    for i in range(100):
        buf.push(ImuSample(t=i * 0.01, gyro=np.full(3, float(i)), accel=np.zeros(3)))
    segs = buf.between(0.902, 0.958)
    np.testing.assert_allclose(segs.duration, 0.056, atol=1e-12)
    # fractional ends: first and last intervals are partial
    np.testing.assert_allclose(segs.dts[0], 0.008, atol=1e-12)
    np.testing.assert_allclose(segs.dts[-1], 0.008, atol=1e-12)
    assert segs.gyro0[0][0] == 90.0 and segs.gyro0[-1][0] == 95.0
    # retention: pushing t=0.99 keeps >= 0.49 coverage only
    with pytest.raises(ValueError):
        buf.between(0.1, 0.2)
    with pytest.raises(ValueError):
        buf.push(ImuSample(t=0.5, gyro=np.zeros(3), accel=np.zeros(3)))
    with pytest.raises(ValueError):
        buf.between(0.9, 0.9)


def test_argument_validation():
    clone = ClonePose(q=np.array([0.0, 0.0, 0.0, 1.0]), p=np.zeros(3), t=0.0)
    extra = ExtraImu(v=np.zeros(3), ba=np.zeros(3), bg=np.zeros(3))
    empty = ImuSegments(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)),
                        np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        propagate(clone, extra, empty, QUIET_NOISE, GRAV)
    with pytest.raises(ValueError):
        segments_from_samples([ImuSample(t=0.0, gyro=np.zeros(3), accel=np.zeros(3))])
    rng = np.random.default_rng(12)
    segs = random_segments(rng, n=5)
    with pytest.raises(ValueError):
        preintegrate(segs, np.zeros(3), np.zeros(3), QUIET_NOISE, scheme="rk7")
    pre = preintegrate(segs, np.zeros(3), np.zeros(3), QUIET_NOISE)
    with pytest.raises(ValueError):
        bridge_to_epoch(clone, extra, pre, GRAV, expected_duration=pre.duration + 0.01)
