"""Bootstrap estimators run before raw GNSS can be fused tightly.

Three things have to exist before pseudorange-level fusion makes sense:

  * a geodetic reference anchoring the local NED frame (first usable fix),
  * the 4-dof world-to-NED alignment (yaw + translation), estimated by
    feeding point-fix positions and velocities against the odometry
    trajectory until the yaw marginal is tight enough to freeze,
  * receiver clock biases and drift, solved robustly from a short batch of
    raw epochs so the filter's clock segment starts near the truth.

The alignment lives in the filter as segment ``frame`` (yaw, NED origin).
It is created with a weak prior instead of literal infinite covariance so
the square-root factor stays full rank while the yaw is still unobservable
(stationary receiver); the prior is wide enough (a full turn) to be
information-free in practice.  Clock errors are expressed in meters in the
filter; this module converts to and from seconds at the boundary.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import srif
from .geodesy import (SPEED_OF_LIGHT, FrameTransform, ecef_to_geodetic,
                      elevation_azimuth, geodetic_to_ecef, ned_rotation,
                      yaw_rotation)
from .gnss import (ELEVATION_MASK, AtmosphereModel, GnssEpoch,
                   ReceiverKinematics, concat_rows, dopp_residual,
                   psr_residual, sagnac, _sagnac_gradient)
from .state import ParamBlock

logger = logging.getLogger(__name__)

FRAME_SEGMENT = "frame"
# Weak prior that stands in for an infinite-covariance start: one full turn
# of yaw and a kilometer of translation.
FRAME_PRIOR_SIGMA_YAW = 2.0 * np.pi
FRAME_PRIOR_SIGMA_ORIGIN = 1e3
# The alignment freezes once the yaw marginal beats one degree.
FRAME_CONVERGED_SIGMA_YAW = np.deg2rad(1.0)

CLOCK_BIAS_WALK = 1e-9    # s / sqrt(s)
CLOCK_DRIFT_WALK = 1e-11  # (s/s) / sqrt(s)


# ---------------------------------------------------------------------------
# geodetic reference


@dataclass(frozen=True)
class GeodeticReference:
    """Datum pinned at the first usable fix; everything local is NED here."""
    lat: float
    lon: float
    height: float
    ecef: np.ndarray
    ned_rot: np.ndarray   # columns are N, E, D expressed in ECEF

    @classmethod
    def from_ecef(cls, p_ecef) -> "GeodeticReference":
        p = np.asarray(p_ecef, dtype=float)
        lat, lon, h = ecef_to_geodetic(p)
        # re-anchor exactly on the ellipsoidal point so ned_from_ecef(ecef)
        # is zero by construction
        return cls(lat=lat, lon=lon, height=h,
                   ecef=geodetic_to_ecef(lat, lon, h),
                   ned_rot=ned_rotation(lat, lon))

    def ned_from_ecef(self, p_ecef) -> np.ndarray:
        return self.ned_rot.T @ (np.asarray(p_ecef, dtype=float) - self.ecef)

    def transform(self, yaw: float = 0.0, ned_origin=None) -> FrameTransform:
        return FrameTransform(anchor_lat=self.lat, anchor_lon=self.lon,
                              anchor_height=self.height, yaw=yaw,
                              ned_origin=np.zeros(3) if ned_origin is None
                              else ned_origin)


# ---------------------------------------------------------------------------
# single-epoch point fix


@dataclass
class PointFix:
    """Stand-alone least-squares solution for one epoch, in ECEF."""
    time: float
    ecef_pos: np.ndarray
    ecef_vel: np.ndarray | None       # None when Doppler geometry is short
    clock_bias: np.ndarray            # s per constellation, NaN if unseen
    clock_drift: float                # s/s, NaN without Doppler
    n_psr: int
    n_dopp: int


def point_fix(epoch: GnssEpoch, n_constellations: int,
              atmosphere: AtmosphereModel | None = None,
              mask: float = ELEVATION_MASK,
              iterations: int = 8) -> PointFix | None:
    """Gauss-Newton pseudorange fix plus a linear Doppler velocity solve.

    Runs without any prior state, so it starts above the mean satellite
    direction and ignores the elevation mask and troposphere until the
    iterate is on the ground.  Returns None when the geometry cannot
    support the unknowns.
    """
    obs_all = list(epoch.rover_obs)
    consts = sorted({o.sat.id[0] for o in obs_all})
    if not obs_all or len(obs_all) < 3 + len(consts):
        return None
    col = {j: 3 + i for i, j in enumerate(consts)}

    p = np.mean([o.sat.position for o in obs_all], axis=0)
    p = p / np.linalg.norm(p) * 6378137.0
    bias_m = np.zeros(len(consts))
    used = obs_all
    for it in range(iterations):
        settled = it >= 3
        if settled:
            used = [o for o in obs_all
                    if elevation_azimuth(p, o.sat.position)[0] > mask]
            if len(used) < 3 + len({o.sat.id[0] for o in used}):
                return None
        H = np.zeros((len(used), 3 + len(consts)))
        r = np.zeros(len(used))
        for i, o in enumerate(used):
            los = o.sat.position - p
            rng = np.linalg.norm(los)
            kappa = los / rng
            pred = (rng + bias_m[col[o.sat.id[0]] - 3]
                    - SPEED_OF_LIGHT * o.sat.clock_bias
                    + sagnac(o.sat.position, p))
            if settled and atmosphere is not None:
                el = elevation_azimuth(p, o.sat.position)[0]
                h = ecef_to_geodetic(p)[2]
                pred += atmosphere.slant_delays(o, el, h, epoch.time)
            H[i, 0:3] = -kappa + _sagnac_gradient(o.sat.position)
            H[i, col[o.sat.id[0]]] = 1.0
            r[i] = o.pseudorange - pred
        dx, *_ = np.linalg.lstsq(H, r, rcond=None)
        if not np.all(np.isfinite(dx)):
            return None
        p = p + dx[:3]
        bias_m = bias_m + dx[3:]

    bias = np.full(n_constellations, np.nan)
    for j in consts:
        bias[j] = bias_m[col[j] - 3] / SPEED_OF_LIGHT

    dopp = [o for o in used if np.isfinite(o.doppler)]
    vel = None
    drift = np.nan
    if len(dopp) >= 4:
        Hv = np.zeros((len(dopp), 4))
        rv = np.zeros(len(dopp))
        for i, o in enumerate(dopp):
            los = o.sat.position - p
            kappa = los / np.linalg.norm(los)
            pred0 = -(kappa @ o.sat.velocity
                      - SPEED_OF_LIGHT * o.sat.clock_drift) / o.sat.wavelength
            Hv[i, 0:3] = kappa / o.sat.wavelength
            Hv[i, 3] = -1.0 / o.sat.wavelength
            rv[i] = o.doppler - pred0
        xv, *_ = np.linalg.lstsq(Hv, rv, rcond=None)
        vel = xv[:3]
        drift = xv[3] / SPEED_OF_LIGHT
    return PointFix(time=epoch.time, ecef_pos=p, ecef_vel=vel,
                    clock_bias=bias, clock_drift=drift,
                    n_psr=len(used), n_dopp=len(dopp))


# ---------------------------------------------------------------------------
# frame alignment


def add_frame_segment(state: srif.SquareRootState, segment: str = FRAME_SEGMENT,
                      sigma_yaw: float = FRAME_PRIOR_SIGMA_YAW,
                      sigma_origin: float = FRAME_PRIOR_SIGMA_ORIGIN
                      ) -> srif.SquareRootState:
    """Append the 4-dof alignment segment under its weak starting prior."""
    state = srif.augment(state, [(segment, 4)])
    prior = srif.LinearizedConstraint(
        blocks={segment: np.eye(4)}, residual=np.zeros(4),
        noise_sqrt_inv=np.array([1.0 / sigma_yaw] + [1.0 / sigma_origin] * 3))
    state, _ = srif.update(state, prior)
    return state


def frame_fix_constraint(transform: FrameTransform, world_pos, world_vel,
                         ned_pos, ned_vel, segment: str = FRAME_SEGMENT,
                         sigma_pos: float = 3.0, sigma_vel: float = 0.3
                         ) -> srif.LinearizedConstraint | None:
    """Six rows tying one point fix to the odometry pose.

    Position: ned = origin + Rz(yaw) p_world; velocity: ned = Rz(yaw)
    v_world.  The odometry values are treated as known; their uncertainty
    is negligible next to the fix sigmas during initialization.  Returns
    None (fix skipped) when any input is non-finite.
    """
    vals = [np.asarray(v, dtype=float)
            for v in (world_pos, world_vel, ned_pos, ned_vel)]
    if not all(np.all(np.isfinite(v)) and v.shape == (3,) for v in vals):
        logger.warning("skipping alignment fix with invalid entries")
        return None
    p_w, v_w, n_p, n_v = vals
    Rz = yaw_rotation(transform.yaw)
    c, s = np.cos(transform.yaw), np.sin(transform.yaw)
    dRz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])

    H = np.zeros((6, 4))
    H[0:3, 0] = dRz @ p_w
    H[0:3, 1:4] = np.eye(3)
    H[3:6, 0] = dRz @ v_w
    residual = np.concatenate([n_p - (transform.ned_origin + Rz @ p_w),
                               n_v - Rz @ v_w])
    w = np.array([1.0 / sigma_pos] * 3 + [1.0 / sigma_vel] * 3)
    return srif.LinearizedConstraint(blocks={segment: H}, residual=residual,
                                     noise_sqrt_inv=w)


def frame_init_update(state: srif.SquareRootState, transform: FrameTransform,
                      world_pos, world_vel, ned_pos, ned_vel,
                      segment: str = FRAME_SEGMENT, sigma_pos: float = 3.0,
                      sigma_vel: float = 0.3):
    """Fold one point fix into the alignment and retract it immediately.

    Returns (state, transform, correction); the correction spans the whole
    filter, and any segments other than the alignment must be retracted by
    the caller before the next update (the residual is reset here).
    Invalid fixes are skipped and reported with correction None.
    """
    constraint = frame_fix_constraint(transform, world_pos, world_vel,
                                      ned_pos, ned_vel, segment=segment,
                                      sigma_pos=sigma_pos, sigma_vel=sigma_vel)
    if constraint is None:
        return state, transform, None
    state, dx = srif.update(state, constraint)
    c = dx[state.columns(segment)]
    transform = replace(transform, yaw=transform.yaw + c[0],
                        ned_origin=transform.ned_origin + c[1:4])
    state = replace(state, residual=np.zeros_like(state.residual))
    return state, transform, dx


def frame_yaw_variance(state: srif.SquareRootState,
                       segment: str = FRAME_SEGMENT) -> float:
    return float(state.marginal_covariance([segment])[0, 0])


def frame_converged(state: srif.SquareRootState, segment: str = FRAME_SEGMENT,
                    sigma_yaw: float = FRAME_CONVERGED_SIGMA_YAW) -> bool:
    return frame_yaw_variance(state, segment) < sigma_yaw ** 2


def freeze_frame(state: srif.SquareRootState, transform: FrameTransform,
                 segment: str = FRAME_SEGMENT):
    """Drop the alignment from the filter and mark the transform final."""
    var = frame_yaw_variance(state, segment)
    kept = [sid for sid, _ in state.layout if sid != segment]
    state = srif.marginalize(state, [segment], kept)
    transform = replace(transform, converged=True, yaw_variance=var)
    logger.info("alignment frozen: yaw=%.4f rad, sigma=%.3f deg",
                transform.yaw, np.rad2deg(np.sqrt(var)))
    return state, transform


# ---------------------------------------------------------------------------
# receiver clock bootstrap


@dataclass
class ClockSolution:
    """Robust batch clock solve; biases in seconds, NaN where deferred."""
    bias: np.ndarray
    drift: float
    bias_ok: np.ndarray
    drift_ok: bool
    inliers: np.ndarray               # over the stacked visible rows
    kinds: list[str] = field(default_factory=list)
    constellations: np.ndarray = field(default_factory=lambda: np.zeros(0, int))


def _clock_design(epochs, transform, kinematics, n_constellations,
                  atmosphere, mask):
    """Stack zero-clock residual rows; columns are [biases (m), drift (m/s)].

    Uses the measurement builders with an all-zero clock block, so the
    residuals equal the clock contribution plus noise and the builder's
    clock columns are exactly the design matrix.  Pseudorange rows are
    referenced to the first epoch through the builder's lag handling,
    which makes the drift column the elapsed time.
    """
    zero = ParamBlock(cam_q=np.array([0.0, 0.0, 0.0, 1.0]), cam_p=np.zeros(3),
                      lever=np.zeros(3), clock_bias=np.zeros(n_constellations),
                      clock_drift=0.0)
    t0 = epochs[0].time
    parts = []
    for epoch, kin in zip(epochs, kinematics):
        parts.append(psr_residual(epoch, kin, transform, zero, atmosphere,
                                  clock_lag=t0 - epoch.time, mask=mask))
        parts.append(dopp_residual(epoch, kin, transform, zero, mask=mask))
    rows = concat_rows(parts)
    H = np.column_stack([rows.d_clock, rows.d_drift])
    return rows, H


def clock_init(epochs: list[GnssEpoch], transform: FrameTransform,
               kinematics: list[ReceiverKinematics], n_constellations: int,
               atmosphere: AtmosphereModel | None = None, seed: int = 0,
               iterations: int = 100, psr_threshold: float = 10.0,
               dopp_threshold: float = 5.0, min_inliers: int = 4,
               mask: float = ELEVATION_MASK) -> ClockSolution | None:
    """RANSAC-then-refit clock solve over a short batch of raw epochs.

    Each pseudorange row measures its constellation's bias (meters) plus
    elapsed-time times drift; each Doppler row measures the drift alone
    (Hz).  Minimal samples take one pseudorange row per visible
    constellation plus one Doppler row; consensus uses fixed gates of
    psr_threshold meters and dopp_threshold Hz.  The final weighted
    least-squares runs on the consensus rows only.  Returns None while
    fewer than min_inliers rows agree, leaving the start to a later batch.
    """
    if atmosphere is None:
        atmosphere = AtmosphereModel()
    if not epochs or len(epochs) != len(kinematics):
        raise ValueError("need one kinematics entry per epoch")
    rows, H = _clock_design(epochs, transform, kinematics, n_constellations,
                            atmosphere, mask)
    n = rows.size
    if n == 0:
        return None
    b = rows.residual
    kinds = np.array(rows.kinds)
    const = np.array([sid[0] for sid in rows.sats], dtype=int)
    is_psr = kinds == "psr"
    thresh = np.where(is_psr, psr_threshold, dopp_threshold)

    psr_by_const = {j: np.flatnonzero(is_psr & (const == j))
                    for j in range(n_constellations)}
    psr_by_const = {j: idx for j, idx in psr_by_const.items() if idx.size}
    dopp_idx = np.flatnonzero(~is_psr)
    bias_cols = sorted(psr_by_const)
    cols = bias_cols + ([n_constellations] if dopp_idx.size else [])
    if not bias_cols:
        return None

    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        sample = [rng.choice(psr_by_const[j]) for j in bias_cols]
        if dopp_idx.size:
            sample.append(rng.choice(dopp_idx))
        A = H[np.ix_(sample, cols)]
        try:
            x = np.linalg.solve(A, b[sample])
        except np.linalg.LinAlgError:
            continue
        inl = np.abs(b - H[:, cols] @ x) < thresh
        if inl.sum() > best.sum():
            best = inl

    if best.sum() < min_inliers:
        logger.info("clock init deferred: %d consensus rows", int(best.sum()))
        return None

    # refit on the consensus set, only over unknowns it actually touches
    fit_bias = [j for j in bias_cols if np.any(best & is_psr & (const == j))]
    drift_ok = bool(np.any(best & ~is_psr))
    fit_cols = fit_bias + ([n_constellations] if drift_ok else [])
    w = 1.0 / np.sqrt(np.diag(rows.cov)[best])
    x, *_ = np.linalg.lstsq(H[np.ix_(best, fit_cols)] * w[:, None],
                            b[best] * w, rcond=None)
    full = np.zeros(n_constellations + 1)
    full[fit_cols] = x
    inliers = np.abs(b - H @ full) < thresh

    bias = np.full(n_constellations, np.nan)
    bias_ok = np.zeros(n_constellations, dtype=bool)
    for j in fit_bias:
        bias[j] = full[j] / SPEED_OF_LIGHT
        bias_ok[j] = True
    drift = full[n_constellations] / SPEED_OF_LIGHT if drift_ok else np.nan
    return ClockSolution(bias=bias, drift=drift, bias_ok=bias_ok,
                         drift_ok=drift_ok, inliers=inliers,
                         kinds=list(kinds), constellations=const)


def clock_propagate(params: ParamBlock, dt: float,
                    bias_walk: float = CLOCK_BIAS_WALK,
                    drift_walk: float = CLOCK_DRIFT_WALK):
    """Advance the clock block by dt seconds.

    Returns (params, phi, q_diag): the propagated block, the transition
    over the meter-scaled error [biases, drift], and the random-walk
    increment variances in the same units.
    """
    if dt < 0:
        raise ValueError("clock propagation requires dt >= 0")
    n = len(params.clock_bias)
    out = replace(params,
                  clock_bias=params.clock_bias + params.clock_drift * dt,
                  clock_drift=params.clock_drift)
    phi = np.eye(n + 1)
    phi[:n, n] = dt
    q_diag = np.concatenate([
        np.full(n, (SPEED_OF_LIGHT * bias_walk) ** 2 * dt),
        [(SPEED_OF_LIGHT * drift_walk) ** 2 * dt]])
    return out, phi, q_diag
