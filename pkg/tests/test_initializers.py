"""Alignment and clock bootstrap: convergence, gating, exact recovery."""
import numpy as np
import pytest

from gnssvio import initializers as init
from gnssvio import srif
from gnssvio.geodesy import (EARTH_ROTATION_RATE, SPEED_OF_LIGHT,
                             geodetic_to_ecef, yaw_rotation)
from gnssvio.gnss import (AtmosphereModel, GnssEpoch, RawObservation,
                          receiver_kinematics)
from gnssvio.rotations import quat_from_rotvec
from gnssvio.state import ParamBlock

from oracles import numerical_jacobian, relative_jacobian_error
from test_gnss import make_sat, synth_dopp, synth_psr

NO_ATMOS = AtmosphereModel(troposphere=lambda el, h: 0.0)
ANCHOR = geodetic_to_ecef(0.72, -1.2, 200.0)
DEG = np.deg2rad(1.0)


def make_reference():
    return init.GeodeticReference.from_ecef(ANCHOR)


# ---------------------------------------------------------------------------
# geodetic reference and alignment constraint


def test_reference_composition_orthonormal():
    ref = make_reference()
    np.testing.assert_allclose(ref.ned_from_ecef(ref.ecef), np.zeros(3),
                               atol=1e-9)
    tf = ref.transform(yaw=0.4, ned_origin=np.array([5.0, 3.0, -2.0]))
    R = tf.ecef_rot()
    np.testing.assert_allclose(R, ref.ned_rot @ yaw_rotation(0.4), atol=1e-15)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert not tf.converged and np.isinf(tf.yaw_variance)


def test_fix_constraint_zero_at_truth_and_jacobian():
    truth = make_reference().transform(yaw=np.deg2rad(30.0),
                                       ned_origin=np.array([12.0, -7.0, 3.0]))
    p_w = np.array([8.0, 2.0, -1.0])
    v_w = np.array([1.0, -0.5, 0.2])
    ned_p = truth.ned_from_world(p_w)
    ned_v = yaw_rotation(truth.yaw) @ v_w
    con = init.frame_fix_constraint(truth, p_w, v_w, ned_p, ned_v)
    np.testing.assert_allclose(con.residual, np.zeros(6), atol=1e-12)

    def predict(x):
        tf = make_reference().transform(yaw=truth.yaw + x[0],
                                        ned_origin=truth.ned_origin + x[1:4])
        return np.concatenate([tf.ned_from_world(p_w),
                               yaw_rotation(tf.yaw) @ v_w])

    J_num = numerical_jacobian(predict, np.zeros(4))
    assert relative_jacobian_error(con.blocks["frame"], J_num) < 1e-6


def run_alignment(fix_positions, velocity, truth, fixes_sigma=(0.5, 0.05)):
    """Feed noiseless fixes generated by the truth transform; returns the
    filter, the running estimate, and the yaw-variance history."""
    state = init.add_frame_segment(srif.empty_state())
    est = make_reference().transform()
    history = []
    for p_w in fix_positions:
        ned_p = truth.ned_from_world(p_w)
        ned_v = yaw_rotation(truth.yaw) @ velocity
        state, est, dx = init.frame_init_update(
            state, est, p_w, velocity, ned_p, ned_v,
            sigma_pos=fixes_sigma[0], sigma_vel=fixes_sigma[1])
        assert dx is not None
        history.append(init.frame_yaw_variance(state))
    return state, est, np.array(history)


def test_alignment_converges_from_thirty_degrees():
    truth = make_reference().transform(yaw=np.deg2rad(30.0),
                                       ned_origin=np.array([12.0, -7.0, 3.0]))
    path = [np.array([0.5 * k, 0.0, 0.0]) for k in range(1, 41)]
    state, est, history = run_alignment(path, np.array([1.0, 0.0, 0.0]), truth)
    assert np.all(np.diff(history) <= 1e-12)
    assert abs(est.yaw - truth.yaw) < 0.5 * DEG
    assert np.linalg.norm(est.ned_origin - truth.ned_origin) < 0.2
    assert init.frame_converged(state)


def test_alignment_stationary_never_converges():
    truth = make_reference().transform(yaw=np.deg2rad(30.0),
                                       ned_origin=np.array([12.0, -7.0, 3.0]))
    path = [np.array([3.0, 2.0, -1.0])] * 300   # 60 s of fixes at 5 Hz
    state, est, history = run_alignment(path, np.zeros(3), truth)
    assert np.all(np.diff(history) <= 1e-12)
    assert not init.frame_converged(state)
    # with no baseline the yaw marginal stays at the (huge) prior scale
    assert init.frame_yaw_variance(state) > 1.0


def test_freeze_drops_segment_and_keeps_others():
    state = srif.augment(srif.empty_state(), [("lever", 3)])
    state, _ = srif.update(state, srif.LinearizedConstraint(
        blocks={"lever": np.eye(3)}, residual=np.zeros(3),
        noise_sqrt_inv=np.full(3, 1.0 / 0.1)))
    state = init.add_frame_segment(state)
    truth = make_reference().transform(yaw=np.deg2rad(30.0),
                                       ned_origin=np.array([12.0, -7.0, 3.0]))
    est = make_reference().transform()
    for k in range(1, 41):
        p_w = np.array([0.5 * k, 0.0, 0.0])
        state, est, _ = init.frame_init_update(
            state, est, p_w, np.array([1.0, 0.0, 0.0]),
            truth.ned_from_world(p_w),
            yaw_rotation(truth.yaw) @ np.array([1.0, 0.0, 0.0]),
            sigma_pos=0.5, sigma_vel=0.05)
    assert init.frame_converged(state)
    state, est = init.freeze_frame(state, est)
    assert [sid for sid, _ in state.layout] == ["lever"]
    assert est.converged and est.yaw_variance < DEG ** 2
    # the alignment rows never touched the lever, so its marginal is intact
    np.testing.assert_allclose(state.marginal_covariance(["lever"]),
                               0.01 * np.eye(3), atol=1e-12)


def test_invalid_fix_is_skipped():
    state = init.add_frame_segment(srif.empty_state())
    est = make_reference().transform()
    bad = np.array([np.nan, 0.0, 0.0])
    out_state, out_est, dx = init.frame_init_update(
        state, est, np.zeros(3), np.zeros(3), bad, np.zeros(3))
    assert dx is None and out_state is state and out_est is est


# ---------------------------------------------------------------------------
# stand-alone point fix


def point_fix_scene(n_per_const=4, drop_low=False):
    ref = make_reference()
    truth = ref.transform(yaw=0.3, ned_origin=np.array([50.0, -20.0, 10.0]))
    p_w = np.array([10.0, 5.0, -2.0])
    v_w = np.array([1.2, -0.4, 0.3])
    rec = truth.ecef_from_world(p_w)
    vel = truth.ecef_rot() @ v_w
    bias = np.array([2.1e-7, -3.4e-7])
    drift = 4.3e-10
    rng = np.random.default_rng(11)
    els = np.linspace(0.05 if drop_low else 0.3, 1.25, 2 * n_per_const)
    azs = np.linspace(-2.8, 2.6, 2 * n_per_const)
    obs = []
    for i in range(2 * n_per_const):
        sat = make_sat(rec, els[i], azs[i], constellation=i % 2, prn=i + 1,
                       velocity=rng.normal(scale=2e3, size=3),
                       clock_bias=rng.normal(scale=2e-4),
                       clock_drift=rng.normal(scale=3e-11))
        obs.append(RawObservation(
            sat=sat,
            pseudorange=synth_psr(sat, rec, bias[sat.id[0]]),
            doppler=synth_dopp(sat, rec, vel, drift)))
    return GnssEpoch(time=5.0, rover_obs=obs), rec, vel, bias, drift


def test_point_fix_recovers_truth():
    epoch, rec, vel, bias, drift = point_fix_scene()
    fix = init.point_fix(epoch, 2)
    assert fix is not None and fix.n_psr == 8 and fix.n_dopp == 8
    assert np.linalg.norm(fix.ecef_pos - rec) < 1e-6
    assert np.linalg.norm(fix.ecef_vel - vel) < 1e-9
    np.testing.assert_allclose(fix.clock_bias, bias, atol=1e-13)
    assert abs(fix.clock_drift - drift) < 1e-15


def test_point_fix_applies_elevation_mask():
    epoch, *_ = point_fix_scene(drop_low=True)
    fix = init.point_fix(epoch, 2)
    assert fix is not None and fix.n_psr == 7


def test_point_fix_needs_enough_satellites():
    epoch, *_ = point_fix_scene()
    short = GnssEpoch(time=epoch.time, rover_obs=epoch.rover_obs[:3])
    assert init.point_fix(short, 2) is None


# ---------------------------------------------------------------------------
# clock bootstrap


class ClockScene:
    """Three raw epochs with a drifting two-constellation receiver clock."""

    def __init__(self, n_epochs=3, consts=(0, 1), bias=(1e-4, 2e-4),
                 drift=1e-7):
        self.transform = make_reference().transform(
            yaw=0.3, ned_origin=np.array([50.0, -20.0, 10.0]))
        self.bias = np.array(bias)
        self.drift = drift
        self.t0 = 8.0
        self.q = quat_from_rotvec([0.02, -0.05, 0.1])
        self.v_w = np.array([1.2, -0.4, 0.3])
        self.gyro = np.array([0.01, -0.2, 0.3])
        self.lever = np.array([0.1, -0.05, 0.2])
        rng = np.random.default_rng(7)
        rec0 = self.transform.ecef_from_world(np.array([10.0, 5.0, -2.0]))
        self.sats = []
        els = np.linspace(0.3, 1.25, 8)
        azs = np.linspace(-2.8, 2.6, 8)
        for i in range(8):
            c = consts[i % len(consts)]
            self.sats.append(make_sat(rec0, els[i], azs[i], constellation=c,
                                      prn=i + 1,
                                      velocity=rng.normal(scale=2e3, size=3),
                                      clock_bias=rng.normal(scale=2e-4),
                                      clock_drift=rng.normal(scale=3e-11)))
        self.epochs, self.kins = [], []
        for k in range(n_epochs):
            t = self.t0 + float(k)
            p_w = np.array([10.0, 5.0, -2.0]) + self.v_w * (t - self.t0)
            kin = receiver_kinematics(self.q, p_w, self.v_w, self.gyro,
                                      self.lever)
            rec = self.transform.ecef_from_world(kin.p_w)
            vel = self.transform.ecef_rot() @ kin.v_w
            obs = []
            for s in self.sats:
                b = self.bias[s.id[0]] + self.drift * (t - self.t0)
                obs.append(RawObservation(
                    sat=s, pseudorange=synth_psr(s, rec, b),
                    doppler=synth_dopp(s, rec, vel, self.drift)))
            self.epochs.append(GnssEpoch(time=t, rover_obs=obs))
            self.kins.append(kin)

    def solve(self, **kw):
        kw.setdefault("atmosphere", NO_ATMOS)
        return init.clock_init(self.epochs, self.transform, self.kins, 2, **kw)


def test_clock_init_noiseless_exact():
    scene = ClockScene()
    sol = scene.solve()
    assert sol is not None and sol.inliers.all()
    assert sol.bias_ok.all() and sol.drift_ok
    np.testing.assert_allclose(sol.bias, scene.bias, rtol=1e-12, atol=0)
    np.testing.assert_allclose(sol.drift, scene.drift, rtol=1e-12, atol=0)


def test_clock_init_rejects_gross_outliers():
    scene = ClockScene()
    corrupt = [(0, 1, 1000.0), (0, 6, -1000.0), (1, 3, 1000.0),
               (2, 0, -1000.0), (2, 5, 1000.0)]  # 5 of 24 pseudoranges
    for e, i, delta in corrupt:
        scene.epochs[e].rover_obs[i].pseudorange += delta
    sol = scene.solve()
    assert sol is not None
    # row order per epoch: 8 pseudorange rows then 8 Doppler rows
    bad_rows = {e * 16 + i for e, i, _ in corrupt}
    assert set(np.flatnonzero(~sol.inliers)) == bad_rows
    assert abs(sol.bias[0] - scene.bias[0]) < 1e-12
    assert abs(sol.bias[1] - scene.bias[1]) < 1e-12
    assert abs(sol.drift - scene.drift) < 1e-15
    again = scene.solve()
    assert np.array_equal(again.bias, sol.bias)
    assert np.array_equal(again.inliers, sol.inliers)


def test_clock_init_single_constellation_defers_other():
    scene = ClockScene(consts=(0,))
    sol = scene.solve()
    assert sol is not None
    assert sol.bias_ok[0] and not sol.bias_ok[1]
    assert np.isnan(sol.bias[1])
    assert abs(sol.bias[0] - scene.bias[0]) < 1e-12 * scene.bias[0]
    assert sol.drift_ok


def test_clock_init_constellation_shift_equivariance():
    delta = 7.7e-7
    base = ClockScene().solve()
    shifted_scene = ClockScene()
    for epoch in shifted_scene.epochs:
        for obs in epoch.rover_obs:
            if obs.sat.id[0] == 1:
                obs.pseudorange += SPEED_OF_LIGHT * delta
    shifted = shifted_scene.solve()
    assert abs((shifted.bias[1] - base.bias[1]) - delta) < 1e-12
    assert abs(shifted.bias[0] - base.bias[0]) < 1e-12
    assert abs(shifted.drift - base.drift) < 1e-15


def test_clock_init_deferred_without_consensus():
    scene = ClockScene()
    one = [GnssEpoch(time=scene.epochs[0].time,
                     rover_obs=scene.epochs[0].rover_obs[:1])]
    assert init.clock_init(one, scene.transform, scene.kins[:1], 2,
                           atmosphere=NO_ATMOS) is None


def make_params(bias=(1e-4, 2e-4), drift=1e-7):
    return ParamBlock(cam_q=np.array([0.0, 0.0, 0.0, 1.0]),
                      cam_p=np.zeros(3), lever=np.zeros(3),
                      clock_bias=np.array(bias), clock_drift=drift)


def test_clock_propagate_examples():
    out, phi, q = init.clock_propagate(make_params(), 1.0)
    np.testing.assert_allclose(out.clock_bias, [1.001e-4, 2.001e-4],
                               rtol=1e-15)
    assert out.clock_drift == 1e-7
    np.testing.assert_allclose(phi, [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0],
                                     [0.0, 0.0, 1.0]])
    walk = SPEED_OF_LIGHT * 1e-9
    np.testing.assert_allclose(q, [walk ** 2, walk ** 2,
                                   (SPEED_OF_LIGHT * 1e-11) ** 2])


def test_clock_propagate_edge_cases():
    params = make_params()
    out, _, q = init.clock_propagate(params, 0.0)
    assert np.array_equal(out.clock_bias, params.clock_bias)
    assert np.all(q == 0.0)
    with pytest.raises(ValueError):
        init.clock_propagate(params, -0.5)
    # integrating 300 one-second steps tracks the linear drift
    cur = params
    for _ in range(300):
        cur, _, _ = init.clock_propagate(cur, 1.0)
    np.testing.assert_allclose(cur.clock_bias,
                               params.clock_bias + 300.0 * 1e-7, rtol=1e-12)
