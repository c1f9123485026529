"""IMU kinematics: propagation, preintegration, and epoch bridging.

Measurements are treated as piecewise constant between samples (zero-order
hold).  Each step is integrated with the exact constant-input flow (Exp and
its first and second integrals), which meets the usual RK4 accuracy bound
with fewer evaluations and makes split-interval composition exact.

Error-state component order for one [clone, extra] pair is
[dtheta(3), dp(3), dv(3), dba(3), dbg(3)]; attitude errors are world-frame
left-multiplicative.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .rotations import (exp_so3, gamma2_so3, left_jacobian_so3, quat_from_rotvec,
                        quat_multiply, quat_normalize, quat_to_matrix,
                        right_jacobian_so3, skew)
from .state import ClonePose, ExtraImu

TH, P, V, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray   # rad/s, body frame
    accel: np.ndarray  # specific force, m/s^2, body frame


@dataclass
class ImuNoise:
    """Continuous-time densities: white noise per sqrt(Hz), walks per sqrt(s)."""
    gyro_white: float = 1.7e-4
    accel_white: float = 2.0e-3
    gyro_walk: float = 1.0e-5
    accel_walk: float = 1.0e-4


@dataclass
class ImuSegments:
    """Piecewise-constant integration intervals cut from a sample stream."""
    dts: np.ndarray      # (n,)
    gyro0: np.ndarray    # (n, 3) value at interval start
    accel0: np.ndarray
    gyro1: np.ndarray    # (n, 3) value at interval end (next sample)
    accel1: np.ndarray

    @property
    def duration(self) -> float:
        return float(np.sum(self.dts))


class ImuBuffer:
    """Time-ordered sample store with exact sub-interval slicing."""

    def __init__(self, retention: float = 2.0):
        self.retention = retention
        self._t: list[float] = []
        self._g: list[np.ndarray] = []
        self._a: list[np.ndarray] = []

    def push(self, sample: ImuSample) -> None:
        if self._t and sample.t <= self._t[-1]:
            raise ValueError("IMU samples must be strictly increasing in time")
        self._t.append(sample.t)
        self._g.append(np.asarray(sample.gyro, dtype=float))
        self._a.append(np.asarray(sample.accel, dtype=float))
        horizon = sample.t - self.retention
        drop = bisect.bisect_left(self._t, horizon) - 1
        if drop > 0:
            del self._t[:drop], self._g[:drop], self._a[:drop]

    def between(self, t0: float, t1: float, tol: float = 1e-3) -> ImuSegments:
        """Cut [t0, t1] into held-value intervals; ends may split a sample."""
        if t1 <= t0:
            raise ValueError("empty integration interval")
        if not self._t or t0 < self._t[0] - tol or t1 > self._t[-1] + tol + 0.5:
            raise ValueError("interval not covered by buffered samples")
        i = max(bisect.bisect_right(self._t, t0 + 1e-12) - 1, 0)
        dts, g0, a0, g1, a1 = [], [], [], [], []
        t = t0
        while t < t1 - 1e-12:
            t_next = self._t[i + 1] if i + 1 < len(self._t) else t1
            seg_end = min(t_next, t1)
            if seg_end > t + 1e-12:
                dts.append(seg_end - t)
                g0.append(self._g[i])
                a0.append(self._a[i])
                j = min(i + 1, len(self._t) - 1)
                g1.append(self._g[j])
                a1.append(self._a[j])
            t = seg_end
            if i + 1 < len(self._t) and seg_end >= self._t[i + 1] - 1e-12:
                i += 1
        return ImuSegments(np.array(dts), np.array(g0), np.array(a0),
                           np.array(g1), np.array(a1))


def segments_from_samples(samples: list[ImuSample]) -> ImuSegments:
    if len(samples) < 2:
        raise ValueError("need at least one sample interval")
    t = np.array([s.t for s in samples])
    g = np.array([s.gyro for s in samples], dtype=float)
    a = np.array([s.accel for s in samples], dtype=float)
    return ImuSegments(np.diff(t), g[:-1], a[:-1], g[1:], a[1:])


def _bias_coupling_integrals(omega, f, dt):
    """Simpson quadrature for the gyro-bias coupling into velocity/position.

    Dv = int_0^dt Exp(omega*s) [f]_x J_r(omega*s) s ds, and Dp is its running
    integral.  Both are O(dt^2) small; Simpson keeps them well inside the
    finite-difference tolerance used by the Jacobian tests.
    """
    Sf = skew(f)

    def g(s):
        if s == 0.0:
            return np.zeros((3, 3))
        return exp_so3(omega * s) @ Sf @ right_jacobian_so3(omega * s) * s

    g_half, g_full = g(0.5 * dt), g(dt)
    Dv = (dt / 6.0) * (4.0 * g_half + g_full)
    Dv_half = (dt / 12.0) * (4.0 * g(0.25 * dt) + g_half)
    Dp = (dt / 6.0) * (4.0 * Dv_half + Dv)
    return Dv, Dp


def propagate(clone: ClonePose, extra: ExtraImu, segments: ImuSegments,
              noise: ImuNoise, gravity: np.ndarray
              ) -> tuple[ClonePose, ExtraImu, np.ndarray, np.ndarray]:
    """Integrate the IMU state across the segments.

    Returns the predicted (clone, extra), the error-state transition Phi
    (15x15), and the accumulated discrete process noise Qd.
    """
    if segments.dts.size == 0:
        raise ValueError("propagate needs at least one sample interval")
    q = np.asarray(clone.q, dtype=float).copy()
    p = np.asarray(clone.p, dtype=float).copy()
    v = np.asarray(extra.v, dtype=float).copy()
    ba, bg = np.asarray(extra.ba, dtype=float), np.asarray(extra.bg, dtype=float)
    g = np.asarray(gravity, dtype=float)

    Phi = np.eye(15)
    Qd = np.zeros((15, 15))
    var_g, var_a = noise.gyro_white**2, noise.accel_white**2
    var_wg, var_wa = noise.gyro_walk**2, noise.accel_walk**2

    for dt, w_m, a_m in zip(segments.dts, segments.gyro0, segments.accel0):
        omega = w_m - bg
        f = a_m - ba
        theta = omega * dt
        R = quat_to_matrix(q)
        Rstep = exp_so3(theta)
        A = dt * left_jacobian_so3(theta)
        B = dt * dt * gamma2_so3(theta)
        Jr_dt = right_jacobian_so3(theta) * dt
        Dv, Dp = _bias_coupling_integrals(omega, f, dt)

        R_next = R @ Rstep
        RA_f, RB_f = R @ (A @ f), R @ (B @ f)

        F = np.eye(15)
        F[TH, BG] = -R_next @ Jr_dt
        F[P, TH] = -skew(RB_f)
        F[P, V] = dt * np.eye(3)
        F[P, BA] = -R @ B
        F[P, BG] = R @ Dp
        F[V, TH] = -skew(RA_f)
        F[V, BA] = -R @ A
        F[V, BG] = R @ Dv

        Lg = np.zeros((15, 3))
        Lg[TH] = F[TH, BG]
        Lg[P] = F[P, BG]
        Lg[V] = F[V, BG]
        La = np.zeros((15, 3))
        La[P] = F[P, BA]
        La[V] = F[V, BA]
        Qstep = (var_g / dt) * (Lg @ Lg.T) + (var_a / dt) * (La @ La.T)
        Qstep[BA, BA] += var_wa * dt * np.eye(3)
        Qstep[BG, BG] += var_wg * dt * np.eye(3)

        p = p + v * dt + 0.5 * g * dt * dt + RB_f
        v = v + g * dt + RA_f
        q = quat_normalize(quat_multiply(q, quat_from_rotvec(theta)))
        Phi = F @ Phi
        Qd = F @ Qd @ F.T + Qstep

    clone_out = ClonePose(q=q, p=p, t=clone.t + segments.duration)
    extra_out = ExtraImu(v=v, ba=ba.copy(), bg=bg.copy())
    return clone_out, extra_out, Phi, 0.5 * (Qd + Qd.T)


@dataclass
class Preintegration:
    """Relative IMU terms over [t_start, t_end] at a fixed bias reference.

    delta_rot_q maps end-frame vectors into the start frame; delta_vel and
    delta_pos are the start-frame velocity/position sums of the discrete
    model.  The d_*_d_* members are Jacobians w.r.t. the bias reference, and
    noise_cov covers the stacked error [dtheta_rot, d delta_vel, d delta_pos].
    """
    delta_rot_q: np.ndarray
    delta_vel: np.ndarray
    delta_pos: np.ndarray
    d_rot_d_bg: np.ndarray
    d_vel_d_bg: np.ndarray
    d_vel_d_ba: np.ndarray
    d_pos_d_bg: np.ndarray
    d_pos_d_ba: np.ndarray
    noise_cov: np.ndarray
    duration: float
    bg_ref: np.ndarray
    ba_ref: np.ndarray
    mean_gyro_norm: float


def preintegrate(segments: ImuSegments, bg, ba, noise: ImuNoise,
                 scheme: str = "euler") -> Preintegration:
    """Accumulate the discrete relative-motion sums over the segments.

    scheme="euler" holds each interval's starting sample (the contract the
    rest of the package is pinned to); "midpoint" averages the bracketing
    samples for second-order input accuracy.
    """
    if scheme not in ("euler", "midpoint"):
        raise ValueError(f"unknown integration scheme {scheme!r}")
    bg = np.asarray(bg, dtype=float)
    ba = np.asarray(ba, dtype=float)
    if scheme == "midpoint":
        gyr = 0.5 * (segments.gyro0 + segments.gyro1)
        acc = 0.5 * (segments.accel0 + segments.accel1)
    else:
        gyr, acc = segments.gyro0, segments.accel0

    q = np.array([0.0, 0.0, 0.0, 1.0])
    beta = np.zeros(3)
    alpha = np.zeros(3)
    D_rot = np.zeros((3, 3))
    D_v_bg = np.zeros((3, 3))
    D_v_ba = np.zeros((3, 3))
    D_p_bg = np.zeros((3, 3))
    D_p_ba = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    var_g, var_a = noise.gyro_white**2, noise.accel_white**2
    gyro_norm_sum = 0.0

    for dt, w_m, a_m in zip(segments.dts, gyr, acc):
        omega = w_m - bg
        f = a_m - ba
        theta = omega * dt
        C = quat_to_matrix(q)
        Rstep = exp_so3(theta)
        Jr = right_jacobian_so3(theta)
        CSf = C @ skew(f)
        gyro_norm_sum += np.linalg.norm(omega) * dt

        alpha = alpha + beta * dt + 0.5 * (C @ f) * dt * dt
        D_p_bg = D_p_bg + D_v_bg * dt - 0.5 * dt * dt * (CSf @ D_rot)
        D_p_ba = D_p_ba + D_v_ba * dt - 0.5 * dt * dt * C
        beta = beta + (C @ f) * dt
        D_v_bg = D_v_bg - dt * (CSf @ D_rot)
        D_v_ba = D_v_ba - dt * C

        T = np.eye(9)
        T[0:3, 0:3] = Rstep.T
        T[3:6, 0:3] = -dt * CSf
        T[6:9, 0:3] = -0.5 * dt * dt * CSf
        T[6:9, 3:6] = dt * np.eye(3)
        L = np.zeros((9, 6))
        L[0:3, 0:3] = -Jr * dt
        L[3:6, 3:6] = -C * dt
        L[6:9, 3:6] = -0.5 * C * dt * dt
        cov = T @ cov @ T.T
        cov[:, :] += (var_g / dt) * (L[:, 0:3] @ L[:, 0:3].T)
        cov[:, :] += (var_a / dt) * (L[:, 3:6] @ L[:, 3:6].T)

        D_rot = Rstep.T @ D_rot - Jr * dt
        q = quat_normalize(quat_multiply(q, quat_from_rotvec(theta)))

    duration = segments.duration
    return Preintegration(delta_rot_q=q, delta_vel=beta, delta_pos=alpha,
                          d_rot_d_bg=D_rot, d_vel_d_bg=D_v_bg, d_vel_d_ba=D_v_ba,
                          d_pos_d_bg=D_p_bg, d_pos_d_ba=D_p_ba,
                          noise_cov=0.5 * (cov + cov.T), duration=duration,
                          bg_ref=bg.copy(), ba_ref=ba.copy(),
                          mean_gyro_norm=gyro_norm_sum / max(duration, 1e-12))


def empty_preintegration(bg, ba) -> Preintegration:
    """Zero-span terms for a measurement epoch that coincides with the clone."""
    z33 = np.zeros((3, 3))
    return Preintegration(delta_rot_q=np.array([0.0, 0.0, 0.0, 1.0]),
                          delta_vel=np.zeros(3), delta_pos=np.zeros(3),
                          d_rot_d_bg=z33.copy(), d_vel_d_bg=z33.copy(),
                          d_vel_d_ba=z33.copy(), d_pos_d_bg=z33.copy(),
                          d_pos_d_ba=z33.copy(), noise_cov=np.zeros((9, 9)),
                          duration=0.0, bg_ref=np.asarray(bg, dtype=float).copy(),
                          ba_ref=np.asarray(ba, dtype=float).copy(),
                          mean_gyro_norm=0.0)


@dataclass
class BridgedState:
    """IMU state carried back to a measurement epoch behind the newest clone."""
    q: np.ndarray        # world-from-IMU at the epoch
    p: np.ndarray
    v: np.ndarray
    jac: np.ndarray      # (9, 15) w.r.t. [dtheta_i, dp_i, dv_i, dba, dbg]
    cov: np.ndarray      # (9, 9) integration-noise covariance of [dtheta, dp, dv]
    dt: float            # time from the epoch to the clone, >= 0


def bridge_to_epoch(clone: ClonePose, extra: ExtraImu, preint: Preintegration,
                    gravity: np.ndarray,
                    expected_duration: float | None = None) -> BridgedState:
    """Predict the IMU state at t_clone - preint.duration from the newest clone.

    The preintegration may have been formed at stale bias references; the
    first-order bias Jacobians re-center it on the current estimates, and the
    same Jacobians populate the state sensitivity.
    """
    if expected_duration is not None and abs(preint.duration - expected_duration) > 1e-3:
        raise ValueError("preintegration span does not match the requested epoch")
    g = np.asarray(gravity, dtype=float)
    dbg = extra.bg - preint.bg_ref
    dba = extra.ba - preint.ba_ref
    rot_corr = preint.d_rot_d_bg @ dbg
    rot_q = quat_multiply(preint.delta_rot_q, quat_from_rotvec(rot_corr))
    beta = preint.delta_vel + preint.d_vel_d_bg @ dbg + preint.d_vel_d_ba @ dba
    alpha = preint.delta_pos + preint.d_pos_d_bg @ dbg + preint.d_pos_d_ba @ dba
    dt = preint.duration

    R_i = quat_to_matrix(clone.q)
    C = quat_to_matrix(rot_q)
    R_k = R_i @ C.T
    q_k = quat_normalize(quat_multiply(clone.q, np.append(-rot_q[:3], rot_q[3])))
    v_k = extra.v - g * dt - R_k @ beta
    p_k = clone.p - v_k * dt - 0.5 * g * dt * dt - R_k @ alpha

    S_beta = skew(R_k @ beta)
    S_alpha = skew(R_k @ alpha)
    # the right Jacobian keeps the rotation bias column exact when the
    # preintegration reference is stale (nonzero correction point)
    J = np.zeros((9, 15))
    J[0:3, TH] = np.eye(3)
    J[0:3, BG] = -R_i @ right_jacobian_so3(rot_corr) @ preint.d_rot_d_bg
    # dv_k rows
    J[6:9, TH] = S_beta
    J[6:9, V] = np.eye(3)
    J[6:9, BA] = -R_k @ preint.d_vel_d_ba
    J[6:9, BG] = S_beta @ J[0:3, BG] - R_k @ preint.d_vel_d_bg
    # dp_k rows
    J[3:6, TH] = -dt * J[6:9, TH] + S_alpha
    J[3:6, P] = np.eye(3)
    J[3:6, V] = -dt * np.eye(3)
    J[3:6, BA] = -dt * J[6:9, BA] - R_k @ preint.d_pos_d_ba
    J[3:6, BG] = -dt * J[6:9, BG] + S_alpha @ J[0:3, BG] - R_k @ preint.d_pos_d_bg

    Jn = np.zeros((9, 9))
    Jn[0:3, 0:3] = -R_i
    Jn[6:9, 0:3] = S_beta @ Jn[0:3, 0:3]
    Jn[6:9, 3:6] = -R_k
    Jn[3:6, 0:3] = -dt * Jn[6:9, 0:3] + S_alpha @ Jn[0:3, 0:3]
    Jn[3:6, 3:6] = -dt * Jn[6:9, 3:6]
    Jn[3:6, 6:9] = -R_k
    cov = Jn @ preint.noise_cov @ Jn.T
    return BridgedState(q=q_k, p=p_k, v=v_k, jac=J, cov=0.5 * (cov + cov.T), dt=dt)
