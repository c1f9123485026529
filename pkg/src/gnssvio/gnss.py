"""Raw GNSS measurement models.

Four residual families against satellites in ECEF: pseudorange (psr),
Doppler (dopp), base-differenced pseudorange (dpsr), and double-differenced
carrier phase (ddcp).  All residuals are measured minus predicted, in meters
except Doppler rows (Hz).

Receiver clock errors are parameterized in meters (seconds times c) to keep
the information factor well scaled.  Pseudorange rows reference the clock
bias at the epoch, which trails the stored bias state by the bridging gap:
the drift column carries that -dt chain.

Atmospheric delays are treated as corrections evaluated at the current
estimate; the Sagnac term keeps its exact position gradient so every row
matches finite differences of the builder itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geodesy import EARTH_ROTATION_RATE, SPEED_OF_LIGHT, elevation_azimuth
from .rotations import quat_to_matrix, skew
from .srif import LinearizedConstraint, SquareRootState, chi2_cut

GPS_L1_WAVELENGTH = SPEED_OF_LIGHT / 1575.42e6
ELEVATION_MASK = np.deg2rad(10.0)

logger = logging.getLogger(__name__)


def default_troposphere(elevation: float, height: float = 0.0) -> float:
    """Zenith delay through a 1/sin(el) mapping, clamped near the horizon."""
    del height
    return 2.3 / np.sin(max(elevation, np.deg2rad(5.0)))


def zero_ionosphere(elevation: float, time: float = 0.0) -> float:
    del elevation, time
    return 0.0


@dataclass
class AtmosphereModel:
    """Delay models used on the prediction side of the residuals.

    use_iono_truth subtracts the per-observation slant value carried by the
    scenario (known-model mode); otherwise the iono evaluator is used, whose
    zero default leaves any injected delay as unmodeled error.
    """
    troposphere: Callable[[float, float], float] = default_troposphere
    ionosphere: Callable[[float, float], float] = zero_ionosphere
    use_iono_truth: bool = False

    def slant_delays(self, obs: "RawObservation", elevation: float,
                     height: float, time: float) -> float:
        tropo = self.troposphere(elevation, height)
        iono = obs.iono if self.use_iono_truth else self.ionosphere(elevation, time)
        return tropo + iono


@dataclass
class SatelliteState:
    id: tuple[int, int]        # (constellation index, prn)
    position: np.ndarray       # ECEF, m
    velocity: np.ndarray       # ECEF, m/s
    clock_bias: float          # s
    clock_drift: float         # s/s
    wavelength: float = GPS_L1_WAVELENGTH

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        r = np.linalg.norm(self.position)
        if not 2.0e7 <= r <= 4.5e7:
            raise ValueError(f"satellite radius {r:.3e} outside orbital range")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")


@dataclass
class RawObservation:
    sat: SatelliteState
    pseudorange: float                 # m
    doppler: float                     # Hz, positive approaching
    carrier_phase: float | None = None  # cycles
    sigma_pr: float = 1.0              # m
    sigma_dop: float = 0.1             # Hz
    sigma_cp: float = 0.01             # cycles
    iono: float = 0.0                  # slant ionosphere truth, m

    def __post_init__(self):
        if min(self.sigma_pr, self.sigma_dop, self.sigma_cp) <= 0:
            raise ValueError("noise sigmas must be positive")
        if not 1.5e7 <= self.pseudorange <= 5e7:
            raise ValueError("pseudorange outside plausible range")


@dataclass
class GnssEpoch:
    time: float
    rover_obs: list[RawObservation]
    base_obs: list[RawObservation] | None = None
    base_position: np.ndarray | None = None
    base_clock: np.ndarray | None = None   # per-constellation bias, s
    dd_ambiguities: dict[tuple[tuple[int, int], tuple[int, int]], int] | None = None
    # receiver point-positioning output (antenna, ECEF); None when the
    # receiver produced no fix for this epoch
    spp_pos: np.ndarray | None = None      # m
    spp_vel: np.ndarray | None = None      # m/s
    spp_sigma_pos: float = 0.0             # advertised 1-sigma per axis, m
    spp_sigma_vel: float = 0.0             # m/s


@dataclass
class ReceiverKinematics:
    """Antenna position/velocity in the VIO world frame with error Jacobians.

    Jacobian columns: [dtheta(3), dp(3), dv(3), lever(3)].
    """
    p_w: np.ndarray
    v_w: np.ndarray
    jac_pos: np.ndarray   # (3, 12)
    jac_vel: np.ndarray   # (3, 12)


def receiver_kinematics(pose_q, pose_p, vel, gyro, lever) -> ReceiverKinematics:
    """Offset the IMU state to the antenna through the lever arm.

    gyro is the bias-corrected body rate at the epoch; it drives the
    rotational velocity contribution R [w]x lever.
    """
    R = quat_to_matrix(pose_q)
    lever = np.asarray(lever, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    arm_w = R @ lever
    spin_w = R @ np.cross(gyro, lever)

    jac_pos = np.zeros((3, 12))
    jac_pos[:, 0:3] = -skew(arm_w)
    jac_pos[:, 3:6] = np.eye(3)
    jac_pos[:, 9:12] = R
    jac_vel = np.zeros((3, 12))
    jac_vel[:, 0:3] = -skew(spin_w)
    jac_vel[:, 6:9] = np.eye(3)
    jac_vel[:, 9:12] = R @ skew(gyro)
    return ReceiverKinematics(p_w=np.asarray(pose_p, dtype=float) + arm_w,
                              v_w=np.asarray(vel, dtype=float) + spin_w,
                              jac_pos=jac_pos, jac_vel=jac_vel)


@dataclass
class GnssRows:
    """Residual rows with geometry Jacobians, before state-column assembly."""
    residual: np.ndarray            # (n,)
    d_pos: np.ndarray               # (n, 3) wrt world receiver position
    d_vel: np.ndarray               # (n, 3) wrt world receiver velocity
    d_clock: np.ndarray             # (n, n_const) wrt clock biases, m
    d_drift: np.ndarray             # (n,) wrt clock drift, m/s
    cov: np.ndarray                 # (n, n) measurement covariance
    sats: list[tuple[int, int]] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.residual.size


def _empty_rows(n_const: int) -> GnssRows:
    return GnssRows(residual=np.zeros(0), d_pos=np.zeros((0, 3)),
                    d_vel=np.zeros((0, 3)), d_clock=np.zeros((0, n_const)),
                    d_drift=np.zeros(0), cov=np.zeros((0, 0)))


def concat_rows(parts: list[GnssRows]) -> GnssRows:
    parts = [p for p in parts if p.size]
    if not parts:
        return _empty_rows(1)
    n = sum(p.size for p in parts)
    cov = np.zeros((n, n))
    off = 0
    for p in parts:
        cov[off:off + p.size, off:off + p.size] = p.cov
        off += p.size
    return GnssRows(residual=np.concatenate([p.residual for p in parts]),
                    d_pos=np.vstack([p.d_pos for p in parts]),
                    d_vel=np.vstack([p.d_vel for p in parts]),
                    d_clock=np.vstack([p.d_clock for p in parts]),
                    d_drift=np.concatenate([p.d_drift for p in parts]),
                    cov=cov,
                    sats=sum([p.sats for p in parts], []),
                    kinds=sum([p.kinds for p in parts], []))


def sagnac(sat_pos, rec_pos) -> float:
    """Earth-rotation range correction for the signal transit."""
    return (EARTH_ROTATION_RATE / SPEED_OF_LIGHT) * (
        sat_pos[0] * rec_pos[1] - sat_pos[1] * rec_pos[0])


def _sagnac_gradient(sat_pos) -> np.ndarray:
    w = EARTH_ROTATION_RATE / SPEED_OF_LIGHT
    return np.array([-w * sat_pos[1], w * sat_pos[0], 0.0])


def _visible(epoch: GnssEpoch, rec_ecef, mask: float):
    """Rover observations above the elevation mask, with elevation."""
    out = []
    for obs in epoch.rover_obs:
        el, _ = elevation_azimuth(rec_ecef, obs.sat.position)
        if el >= mask:
            out.append((obs, el))
    return out


def _clock_meters(params, constellation: int, lag: float) -> float:
    """Receiver clock bias at the epoch, meters; lag is state minus epoch time."""
    bias = params.clock_bias[constellation] - params.clock_drift * lag
    return SPEED_OF_LIGHT * bias


def psr_residual(epoch: GnssEpoch, kin: ReceiverKinematics, transform,
                 params, atmos: AtmosphereModel, clock_lag: float = 0.0,
                 mask: float = ELEVATION_MASK) -> GnssRows:
    """One meter-level row per visible satellite.

    Model: range + clock(rover at epoch) - c*sat_clock + troposphere +
    ionosphere + Sagnac.  Residual is measured pseudorange minus that.
    """
    R_ew = transform.ecef_rot()
    p_r = transform.ecef_from_world(kin.p_w)
    n_const = len(params.clock_bias)
    rows = _empty_rows(n_const)
    res, dp, dc, dd, var = [], [], [], [], []
    for obs, el in _visible(epoch, p_r, mask):
        const = obs.sat.id[0]
        los = obs.sat.position - p_r
        rng = np.linalg.norm(los)
        kappa = los / rng
        predicted = (rng + _clock_meters(params, const, clock_lag)
                     - SPEED_OF_LIGHT * obs.sat.clock_bias
                     + atmos.slant_delays(obs, el, 0.0, epoch.time)
                     + sagnac(obs.sat.position, p_r))
        res.append(obs.pseudorange - predicted)
        dp.append((-kappa + _sagnac_gradient(obs.sat.position)) @ R_ew)
        crow = np.zeros(n_const)
        crow[const] = 1.0
        dc.append(crow)
        dd.append(-clock_lag)
        var.append((obs.sigma_pr / np.sin(el)) ** 2)
        rows.sats.append(obs.sat.id)
        rows.kinds.append("psr")
    if not res:
        return rows
    # blocks are derivatives of the prediction, so that r ~= H dx + n
    rows.residual = np.array(res)
    rows.d_pos = np.array(dp)
    rows.d_vel = np.zeros((len(res), 3))
    rows.d_clock = np.array(dc)
    rows.d_drift = np.array(dd)
    rows.cov = np.diag(var)
    return rows


def dopp_residual(epoch: GnssEpoch, kin: ReceiverKinematics, transform,
                  params, mask: float = ELEVATION_MASK) -> GnssRows:
    """One Hz row per visible satellite.

    Doppler is positive for closing geometry: the predicted shift is
    -(1/lambda) (kappa . (v_s - v_r) + c(drift_r - drift_s)).
    """
    R_ew = transform.ecef_rot()
    p_r = transform.ecef_from_world(kin.p_w)
    v_r = R_ew @ kin.v_w
    n_const = len(params.clock_bias)
    rows = _empty_rows(n_const)
    res, dp, dv, dd, var = [], [], [], [], []
    for obs, el in _visible(epoch, p_r, mask):
        los = obs.sat.position - p_r
        rng = np.linalg.norm(los)
        kappa = los / rng
        rel_v = obs.sat.velocity - v_r
        drift_m = SPEED_OF_LIGHT * params.clock_drift
        predicted = -(kappa @ rel_v + drift_m
                      - SPEED_OF_LIGHT * obs.sat.clock_drift) / obs.sat.wavelength
        res.append(obs.doppler - predicted)
        # kappa depends on the receiver position: dkappa/dp_r = -(I-kk^T)/rng
        dk = -(np.eye(3) - np.outer(kappa, kappa)) / rng
        dp.append((-(rel_v @ dk) / obs.sat.wavelength) @ R_ew)
        dv.append((kappa / obs.sat.wavelength) @ R_ew)
        dd.append(-1.0 / obs.sat.wavelength)
        var.append((obs.sigma_dop / np.sin(el)) ** 2)
        rows.sats.append(obs.sat.id)
        rows.kinds.append("dopp")
    if not res:
        return rows
    rows.residual = np.array(res)
    rows.d_pos = np.array(dp)
    rows.d_vel = np.array(dv)
    rows.d_clock = np.zeros((len(res), n_const))
    rows.d_drift = np.array(dd)
    rows.cov = np.diag(var)
    return rows


def dpsr_residual(epoch: GnssEpoch, kin: ReceiverKinematics, transform,
                  params, clock_lag: float = 0.0,
                  mask: float = ELEVATION_MASK) -> GnssRows:
    """Rover-minus-base pseudorange rows; atmosphere cancels by subtraction.

    The base clock is removed with its known solve, leaving the rover's
    per-constellation bias as the only clock state in the row.
    """
    if epoch.base_obs is None or epoch.base_position is None:
        raise ValueError("dpsr requires base observations and position")
    base_by_sat = {o.sat.id: o for o in epoch.base_obs}
    R_ew = transform.ecef_rot()
    p_r = transform.ecef_from_world(kin.p_w)
    p_b = np.asarray(epoch.base_position, dtype=float)
    base_clock = epoch.base_clock if epoch.base_clock is not None else None
    n_const = len(params.clock_bias)
    rows = _empty_rows(n_const)
    res, dp, dc, dd, var = [], [], [], [], []
    for obs, el in _visible(epoch, p_r, mask):
        mate = base_by_sat.get(obs.sat.id)
        if mate is None:
            continue
        const = obs.sat.id[0]
        los = obs.sat.position - p_r
        rng_r = np.linalg.norm(los)
        kappa = los / rng_r
        rng_b = np.linalg.norm(obs.sat.position - p_b)
        base_clk_m = SPEED_OF_LIGHT * (base_clock[const] if base_clock is not None else 0.0)
        predicted = (rng_r - rng_b
                     + _clock_meters(params, const, clock_lag) - base_clk_m
                     + sagnac(obs.sat.position, p_r) - sagnac(obs.sat.position, p_b))
        res.append((obs.pseudorange - mate.pseudorange) - predicted)
        dp.append((-kappa + _sagnac_gradient(obs.sat.position)) @ R_ew)
        crow = np.zeros(n_const)
        crow[const] = 1.0
        dc.append(crow)
        dd.append(-clock_lag)
        var.append((obs.sigma_pr / np.sin(el)) ** 2 + mate.sigma_pr ** 2)
        rows.sats.append(obs.sat.id)
        rows.kinds.append("dpsr")
    if not res:
        return rows
    rows.residual = np.array(res)
    rows.d_pos = np.array(dp)
    rows.d_vel = np.zeros((len(res), 3))
    rows.d_clock = np.array(dc)
    rows.d_drift = np.array(dd)
    rows.cov = np.diag(var)
    return rows


def select_base_satellites(epoch: GnssEpoch, mask: float = ELEVATION_MASK
                           ) -> dict[int, tuple[int, int]]:
    """Highest-elevation common satellite per constellation, at the base.

    Using the (known) base position keeps the choice independent of the
    rover estimate, so simulator and estimator always agree.
    """
    if epoch.base_obs is None or epoch.base_position is None:
        return {}
    rover_ids = {o.sat.id for o in epoch.rover_obs if o.carrier_phase is not None}
    best: dict[int, tuple[float, tuple[int, int]]] = {}
    for obs in epoch.base_obs:
        if obs.carrier_phase is None or obs.sat.id not in rover_ids:
            continue
        el, _ = elevation_azimuth(np.asarray(epoch.base_position), obs.sat.position)
        if el < mask:
            continue
        const = obs.sat.id[0]
        if const not in best or el > best[const][0]:
            best[const] = (el, obs.sat.id)
    return {const: sid for const, (el, sid) in best.items()}


def _dd_ambiguity(amb: dict, sat_j, sat_i) -> int | None:
    """Direct, reversed, or chained-through-common-reference lookup."""
    if amb is None:
        return None
    if (sat_j, sat_i) in amb:
        return amb[(sat_j, sat_i)]
    if (sat_i, sat_j) in amb:
        return -amb[(sat_i, sat_j)]
    for (a, ref), n_a in amb.items():
        if a == sat_j:
            n_b = amb.get((sat_i, ref))
            if n_b is not None:
                return n_a - n_b
    return None


def ddcp_residual(epoch: GnssEpoch, kin: ReceiverKinematics, transform,
                  params, mask: float = ELEVATION_MASK) -> GnssRows:
    """Double-differenced carrier rows in meters, one per non-base satellite.

    Receiver and satellite clocks cancel; the integer ambiguity enters as a
    known lambda*N offset.  Rows within a constellation share the base
    satellite's noise, which the covariance off-diagonals carry exactly.
    """
    if epoch.base_obs is None or epoch.base_position is None:
        raise ValueError("ddcp requires base observations and position")
    base_sats = select_base_satellites(epoch, mask)
    base_by_sat = {o.sat.id: o for o in epoch.base_obs}
    rover_by_sat = {o.sat.id: o for o in epoch.rover_obs}
    R_ew = transform.ecef_rot()
    p_r = transform.ecef_from_world(kin.p_w)
    p_b = np.asarray(epoch.base_position, dtype=float)
    n_const = len(params.clock_bias)
    rows = _empty_rows(n_const)

    def one_way(obs_r, obs_b, sat):
        rng_r = np.linalg.norm(sat.position - p_r)
        rng_b = np.linalg.norm(sat.position - p_b)
        model = (rng_r - rng_b + sagnac(sat.position, p_r)
                 - sagnac(sat.position, p_b))
        meas = sat.wavelength * (obs_r.carrier_phase - obs_b.carrier_phase)
        kappa = (sat.position - p_r) / rng_r
        drow = (-kappa + _sagnac_gradient(sat.position)) @ R_ew
        return meas, model, drow

    res, dp, var_j, groups = [], [], [], []
    for obs, el in _visible(epoch, p_r, mask):
        sat_j = obs.sat.id
        const = sat_j[0]
        sat_i = base_sats.get(const)
        if sat_i is None or sat_j == sat_i or obs.carrier_phase is None:
            continue
        mate_j = base_by_sat.get(sat_j)
        obs_i, mate_i = rover_by_sat.get(sat_i), base_by_sat.get(sat_i)
        if mate_j is None or obs_i is None or mate_i is None:
            continue
        n_dd = _dd_ambiguity(epoch.dd_ambiguities, sat_j, sat_i)
        if n_dd is None:
            logger.info("ddcp: no ambiguity for pair %s-%s, skipping row",
                        sat_j, sat_i)
            continue
        lam = obs.sat.wavelength
        meas_j, model_j, drow_j = one_way(obs, mate_j, obs.sat)
        meas_i, model_i, drow_i = one_way(obs_i, mate_i, obs_i.sat)
        predicted = model_j - model_i + lam * n_dd
        res.append((meas_j - meas_i) - predicted)
        dp.append(drow_j - drow_i)
        var_j.append((lam * obs.sigma_cp / np.sin(el)) ** 2
                     + (lam * mate_j.sigma_cp) ** 2)
        el_i, _ = elevation_azimuth(p_r, obs_i.sat.position)
        groups.append((const, (lam * obs_i.sigma_cp / np.sin(max(el_i, mask))) ** 2
                       + (lam * mate_i.sigma_cp) ** 2))
        rows.sats.append(sat_j)
        rows.kinds.append("ddcp")
    if not res:
        return rows
    n = len(res)
    cov = np.diag(np.array(var_j))
    # rows differencing the same base satellite share its one-way noise
    for a in range(n):
        for b in range(n):
            if groups[a][0] == groups[b][0]:
                cov[a, b] += groups[a][1]
    rows.residual = np.array(res)
    rows.d_pos = np.array(dp)
    rows.d_vel = np.zeros((n, 3))
    rows.d_clock = np.zeros((n, len(params.clock_bias)))
    rows.d_drift = np.zeros(n)
    rows.cov = cov
    return rows


def compose_covariance(meas_cov: np.ndarray, bridge_jacobian: np.ndarray,
                       preint_noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total per-epoch covariance and its symmetric inverse square root.

    Sigma = Sigma_m + J Sigma_g J^T; the whitener is Sigma^(-1/2) from the
    eigendecomposition.  Raises on non-positive-definite input.
    """
    sigma = np.asarray(meas_cov, dtype=float)
    if bridge_jacobian is not None and preint_noise is not None:
        J = np.asarray(bridge_jacobian, dtype=float)
        sigma = sigma + J @ preint_noise @ J.T
    sigma = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(sigma)
    if sigma.size and vals.min() <= 0:
        raise ValueError("measurement covariance is not positive definite")
    whitener = (vecs / np.sqrt(vals)) @ vecs.T
    return sigma, whitener


def row_gate_mask(sq: SquareRootState | None, blocks: dict[str, np.ndarray],
                  residual: np.ndarray, sigma: np.ndarray,
                  quantile: float = 0.95) -> np.ndarray:
    """Per-row 95% chi-square mask using the current marginal covariance."""
    n = residual.size
    if sq is None or n == 0:
        return np.ones(n, dtype=bool)
    ids = [sid for sid in blocks if sq.has(sid)]
    if ids:
        H = np.hstack([blocks[sid] for sid in ids])
        P = sq.marginal_covariance(ids)
        S = H @ P @ H.T + sigma
    else:
        S = sigma
    cut = chi2_cut(quantile, 1)
    return residual**2 / np.maximum(np.diag(S), 1e-300) < cut


def epoch_constraint(rows: GnssRows, kin: ReceiverKinematics,
                     bridge_jac: np.ndarray | None, bridge_cov: np.ndarray | None,
                     clone_sid: str, extra_sid: str, clock_sid: str | None,
                     lever_active: bool = True,
                     gate_state: SquareRootState | None = None,
                     gate_quantile: float = 0.95
                     ) -> tuple[LinearizedConstraint, int]:
    """Chain geometry rows into state-segment columns and whiten jointly.

    bridge_jac (9x15) maps the epoch-time [dtheta, dp, dv] back to the
    newest clone and extra segments; bridge_cov is the IMU integration noise
    folded into the measurement covariance.  Returns the constraint and the
    number of rows that survived gating.
    """
    n = rows.size
    if n == 0:
        return LinearizedConstraint(blocks={}, residual=np.zeros(0)), 0
    # rows over the epoch-time 9-state [theta, p, v]
    H9 = (rows.d_pos @ kin.jac_pos[:, 0:9]) + (rows.d_vel @ kin.jac_vel[:, 0:9])
    H_lever = (rows.d_pos @ kin.jac_pos[:, 9:12]) + (rows.d_vel @ kin.jac_vel[:, 9:12])
    if not lever_active:
        H_lever = np.zeros_like(H_lever)
    sigma, _ = compose_covariance(rows.cov, H9 if bridge_cov is not None else None,
                                  bridge_cov)
    if bridge_jac is not None:
        H15 = H9 @ bridge_jac
        blocks = {clone_sid: H15[:, 0:6], extra_sid: H15[:, 6:15]}
    else:
        extra = np.zeros((n, 9))
        extra[:, 0:3] = H9[:, 6:9]
        blocks = {clone_sid: H9[:, 0:6], extra_sid: extra}
    blocks["lever"] = H_lever
    if clock_sid is not None:
        blocks[clock_sid] = np.column_stack([rows.d_clock, rows.d_drift])

    keep = row_gate_mask(gate_state, blocks, rows.residual, sigma, gate_quantile)
    if not keep.all():
        if not keep.any():
            return LinearizedConstraint(blocks={}, residual=np.zeros(0)), 0
        blocks = {sid: b[keep] for sid, b in blocks.items()}
        sigma = sigma[np.ix_(keep, keep)]
        residual = rows.residual[keep]
    else:
        residual = rows.residual
    _, whitener = compose_covariance(sigma, None, None)
    return LinearizedConstraint(blocks=blocks, residual=residual,
                                noise_sqrt_inv=whitener), int(keep.sum())
