"""Deterministic synthetic world: trajectories, IMU, camera tracks, GNSS.

Design notes that matter to consumers:

  * All event times are integer milliseconds divided by 1000, so events
    that are nominally simultaneous compare exactly equal as floats and
    repeated runs are bit-identical.
  * IMU samples are interval increments (what an integrating gyro/accel
    pair reports): the rotation sample is the exact yaw increment over the
    sample period and the specific-force sample is solved so that the
    closed-form propagation reproduces the true velocity exactly.  The
    residual position error is third order per step, which keeps a
    noiseless propagation within ~1e-5 m of truth over a minute.
  * Carrier phases are emitted minus a per-satellite lock offset shared by
    the rover and base legs; double differences and their integer
    ambiguities are unaffected while magnitudes stay small.
  * Measurement noise is drawn with the same 1/sin(elevation) scaling the
    residual models use for weighting (rover legs only; base receivers get
    the flat sigma, matching the differential covariance model).
  * Satellites fly analytic circular orbits expressed directly in ECEF;
    there is no Earth-rotation bookkeeping between inertial and fixed
    frames, and the measurement models see the same convention.
"""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np

from .geodesy import (GRAVITY, SPEED_OF_LIGHT, elevation_azimuth,
                      FrameTransform, geodetic_to_ecef, ned_rotation)
from .gnss import (ELEVATION_MASK, GnssEpoch, RawObservation, SatelliteState,
                   default_troposphere, sagnac, select_base_satellites)
from .imu import ImuNoise, ImuSample
from .rotations import left_jacobian_so3, quat_from_rotvec, quat_to_matrix
from .vision import CameraIntrinsics, FeatureObservation

logger = logging.getLogger(__name__)

IMU_RATE = 250
CAMERA_RATE = 20
GNSS_RATE = 5
_TICK = 1000                      # event clock resolution, ticks per second
MU_EARTH = 3.986004418e14         # m^3/s^2
IONO_VERTICAL = 4.0               # m of L1 zenith delay at scale 1
INTRINSICS = CameraIntrinsics(focal=(500.0, 500.0), principal=(320.0, 240.0),
                              resolution=(640, 480))
TARGET_FEATURES = 45
MAX_GROUND_POINTS = 40000

TRAJECTORY_KINDS = ("line", "circle", "lawnmower", "figure-eight")


@dataclass
class TrajectorySpec:
    kind: str = "circle"
    speed: float = 8.0            # m/s along track
    height: float = 50.0          # m above the world origin plane
    duration: float = 60.0        # s
    seed: int = 0                 # picks the course angle

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.speed <= 0 or self.duration <= 0:
            raise ValueError("speed and duration must be positive")


@dataclass
class ConstellationSpec:
    count: int = 2
    per_constellation: int = 28
    radius: float = 26.56e6       # m, orbital radius
    inclination: float = np.deg2rad(55.0)
    frequencies: tuple = (1575.42e6, 1561.098e6)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("need at least one constellation")
        if not 2.0e7 <= self.radius <= 4.5e7:
            raise ValueError("orbital radius outside sanity range")
        if len(self.frequencies) < self.count:
            raise ValueError("need a carrier frequency per constellation")


@dataclass
class ErrorBudget:
    """Truth values and noise levels for everything the estimator recovers.

    noise_scale multiplies every drawn noise sample (0 gives noiseless
    streams while keeping the advertised sigmas positive for weighting).
    sigma_cp is in cycles; the other GNSS sigmas are meters / Hz.  The
    receiver's own point-positioning output is emitted alongside the raw
    observations as truth plus white noise at sigma_spp_pos / sigma_spp_vel
    (the fix engine is not simulated, only its advertised quality).
    """
    imu: ImuNoise = field(default_factory=ImuNoise)
    gyro_bias0: tuple = (0.002, -0.001, 0.0015)
    accel_bias0: tuple = (0.05, -0.02, 0.03)
    pixel_sigma: float = 1.0
    sigma_pr: float = 1.0
    sigma_dop: float = 0.1
    sigma_cp: float = 0.01
    sigma_spp_pos: float = 2.0
    sigma_spp_vel: float = 0.1
    clock_bias0: tuple = (1.2e-4, -0.8e-4)
    clock_drift: float = 1e-7
    base_clock: tuple = (4.1e-7, -2.2e-7)
    sat_clock_bias_scale: float = 2e-4
    sat_clock_drift_scale: float = 3e-11
    iono_scale: float = 1.0
    tropo_scale: float = 1.0
    outlier_rate: float = 0.0
    lever: tuple = (0.10, -0.05, 0.25)
    cam_rotvec: tuple = (0.01, -0.02, 0.015)
    cam_p: tuple = (0.08, -0.02, 0.03)
    anchor_lat: float = 0.72
    anchor_lon: float = -1.2
    anchor_height: float = 200.0
    frame_yaw: float = 0.3
    ned_origin: tuple = (0.0, 0.0, 0.0)
    base_ned: tuple = (2000.0, 1500.0, -5.0)
    gnss_latency: float = 0.08
    resolve_ambiguities: bool = True
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pixel_sigma", "sigma_pr", "sigma_dop", "sigma_cp",
                     "sigma_spp_pos", "sigma_spp_vel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")


def quiet_budget(**overrides) -> ErrorBudget:
    """All-truth budget: no noise, no outliers, no atmosphere."""
    defaults = dict(noise_scale=0.0, outlier_rate=0.0, iono_scale=0.0,
                    tropo_scale=0.0)
    defaults.update(overrides)
    return ErrorBudget(**defaults)


# ---------------------------------------------------------------------------
# analytic trajectories (planar, constant height, yaw follows course)


class Trajectory:
    """Closed-form planar path; position/velocity/acceleration in world."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        course = float(np.random.default_rng(spec.seed).uniform(-np.pi, np.pi))
        c, s = np.cos(course), np.sin(course)
        self._rot = np.array([[c, -s], [s, c]])
        self._course = course
        if spec.kind == "lawnmower":
            self._build_lawnmower()

    def _build_lawnmower(self):
        v = self.spec.speed
        leg, r = 10.0 * v, 2.0 * v
        total = v * self.spec.duration + leg
        self._segments = []      # (s_start, kind, anchor xy, heading/center)
        s, x, y, heading = 0.0, 0.0, 0.0, 0.0
        while s <= total:
            self._segments.append((s, "leg", np.array([x, y]), heading))
            s += leg
            x += leg * np.cos(heading)
            # half turns always advance +y; the turn sense alternates
            sign = 1.0 if heading == 0.0 else -1.0
            center = np.array([x, y + r])
            self._segments.append((s, "turn", center, (heading, sign, r)))
            s += np.pi * r
            y += 2.0 * r
            heading = np.pi if heading == 0.0 else 0.0
        self._starts = [seg[0] for seg in self._segments]

    def _lawnmower_raw(self, t):
        v = self.spec.speed
        s = v * t
        i = bisect.bisect_right(self._starts, s) - 1
        s0, kind, anchor, extra = self._segments[i]
        ds = s - s0
        if kind == "leg":
            heading = extra
            d = np.array([np.cos(heading), np.sin(heading)])
            return anchor + ds * d, v * d, np.zeros(2), heading, 0.0
        heading0, sign, r = extra
        phi = ds / r
        psi = heading0 + sign * phi
        # point on the circle whose tangent has heading psi
        radial = sign * np.array([np.sin(psi), -np.cos(psi)])
        pos = anchor + r * radial
        vel = v * np.array([np.cos(psi), np.sin(psi)])
        rate = sign * v / r
        acc = v * rate * np.array([-np.sin(psi), np.cos(psi)])
        return pos, vel, acc, psi, rate

    def _raw(self, t):
        """Unrotated planar (pos2, vel2, acc2, heading, heading_rate)."""
        v = self.spec.speed
        kind = self.spec.kind
        if kind == "line":
            return (np.array([v * t, 0.0]), np.array([v, 0.0]), np.zeros(2),
                    0.0, 0.0)
        if kind == "circle":
            r = 4.0 * v
            w = v / r
            psi = w * t
            pos = r * np.array([np.sin(psi), 1.0 - np.cos(psi)])
            vel = v * np.array([np.cos(psi), np.sin(psi)])
            acc = v * w * np.array([-np.sin(psi), np.cos(psi)])
            return pos, vel, acc, psi, w
        if kind == "figure-eight":
            a = 4.0 * v
            w = v / a
            pos = np.array([a * np.sin(w * t), 0.5 * a * np.sin(2 * w * t)])
            vel = np.array([a * w * np.cos(w * t), a * w * np.cos(2 * w * t)])
            acc = np.array([-a * w * w * np.sin(w * t),
                            -2 * a * w * w * np.sin(2 * w * t)])
            psi = np.arctan2(vel[1], vel[0])
            rate = (vel[0] * acc[1] - vel[1] * acc[0]) / (vel @ vel)
            return pos, vel, acc, psi, rate
        return self._lawnmower_raw(t)

    def position(self, t: float) -> np.ndarray:
        pos, *_ = self._raw(t)
        return np.array([*(self._rot @ pos), -self.spec.height])

    def velocity(self, t: float) -> np.ndarray:
        _, vel, *_ = self._raw(t)
        return np.array([*(self._rot @ vel), 0.0])

    def acceleration(self, t: float) -> np.ndarray:
        _, _, acc, *_ = self._raw(t)
        return np.array([*(self._rot @ acc), 0.0])

    def heading(self, t: float) -> float:
        return self._raw(t)[3] + self._course

    def heading_rate(self, t: float) -> float:
        return self._raw(t)[4]

    def attitude(self, t: float) -> np.ndarray:
        return quat_from_rotvec([0.0, 0.0, self.heading(t)])

    def body_rate(self, t: float) -> np.ndarray:
        return np.array([0.0, 0.0, self.heading_rate(t)])


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Constellation:
    """Analytic circular orbits, low-discrepancy plane/phase spread."""

    def __init__(self, spec: ConstellationSpec, clock_rng: np.random.Generator,
                 bias_scale: float, drift_scale: float):
        self.spec = spec
        self.mean_motion = np.sqrt(MU_EARTH / spec.radius ** 3)
        self.wavelengths = [SPEED_OF_LIGHT / f for f in spec.frequencies]
        self._planes, self._phases, self.clocks = {}, {}, {}
        i = 0
        for c in range(spec.count):
            for k in range(spec.per_constellation):
                raan = 2.0 * np.pi * ((i * 0.6180339887498949) % 1.0)
                u0 = 2.0 * np.pi * ((i * 0.7548776662466927) % 1.0)
                self._planes[(c, k + 1)] = _rot_z(raan) @ _rot_x(spec.inclination)
                self._phases[(c, k + 1)] = u0
                self.clocks[(c, k + 1)] = (
                    bias_scale * clock_rng.standard_normal(),
                    drift_scale * clock_rng.standard_normal())
                i += 1

    def ids(self):
        return sorted(self._planes)

    def state(self, sat_id, t: float) -> SatelliteState:
        r = self.spec.radius
        u = self._phases[sat_id] + self.mean_motion * t
        plane = self._planes[sat_id]
        pos = plane @ (r * np.array([np.cos(u), np.sin(u), 0.0]))
        vel = plane @ (r * self.mean_motion * np.array([-np.sin(u), np.cos(u), 0.0]))
        bias, drift = self.clocks[sat_id]
        return SatelliteState(id=sat_id, position=pos, velocity=vel,
                              clock_bias=bias + drift * t, clock_drift=drift,
                              wavelength=self.wavelengths[sat_id[0]])


# ---------------------------------------------------------------------------
# event containers


@dataclass
class TruthState:
    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    clock_bias: np.ndarray
    clock_drift: float


@dataclass
class CameraFrame:
    t: float
    step: int
    observations: list


@dataclass
class EpochArrival:
    arrival: float
    epoch: GnssEpoch


@dataclass
class ScenarioHeader:
    version: int
    duration: float
    imu_rate: float
    camera_rate: float
    gnss_rate: float
    gnss_latency: float
    n_constellations: int
    frequencies: tuple
    anchor_lat: float
    anchor_lon: float
    anchor_height: float
    frame_yaw: float
    ned_origin: np.ndarray
    base_position: np.ndarray
    base_clock: np.ndarray
    lever: np.ndarray
    cam_rotvec: np.ndarray
    cam_p: np.ndarray
    gravity: float
    scale: float                    # max |p_world|, divergence yardstick
    intrinsics: CameraIntrinsics
    pixel_sigma: float
    sigma_pr: float
    sigma_dop: float
    sigma_cp: float
    tropo_scale: float
    iono_scale: float
    imu_noise: ImuNoise
    clock_bias0: np.ndarray
    clock_drift: float


def event_time(event) -> float:
    """Delivery time used for stream ordering."""
    if isinstance(event, EpochArrival):
        return event.arrival
    return event.t


def _event_priority(event) -> int:
    for i, cls in enumerate((ImuSample, TruthState, CameraFrame, EpochArrival)):
        if isinstance(event, cls):
            return i
    raise TypeError(f"unknown event {type(event)!r}")


# ---------------------------------------------------------------------------
# generation


def _imu_stream(traj: Trajectory, budget: ErrorBudget, n_samples: int,
                rng: np.random.Generator):
    """Increment-style samples plus per-interval truth-bias snapshots."""
    dt = 1.0 / IMU_RATE
    g = np.array([0.0, 0.0, GRAVITY])
    scale = budget.noise_scale
    noise = budget.imu
    bg = np.array(budget.gyro_bias0, dtype=float)
    ba = np.array(budget.accel_bias0, dtype=float)
    samples, bg_snap, ba_snap = [], [], []
    sq = np.sqrt(dt)
    for k in range(n_samples):
        t0 = (k * _TICK // IMU_RATE) / _TICK
        t1 = ((k + 1) * _TICK // IMU_RATE) / _TICK
        dpsi = (traj.heading(t1) - traj.heading(t0) + np.pi) % (2 * np.pi) - np.pi
        theta = np.array([0.0, 0.0, dpsi])
        R0 = quat_to_matrix(traj.attitude(t0))
        dv = traj.velocity(t1) - traj.velocity(t0)
        f = np.linalg.solve(dt * left_jacobian_so3(theta),
                            R0.T @ (dv - g * dt))
        gyro = theta / dt + bg + scale * (noise.gyro_white / sq) * rng.standard_normal(3)
        accel = f + ba + scale * (noise.accel_white / sq) * rng.standard_normal(3)
        samples.append(ImuSample(t=t0, gyro=gyro, accel=accel))
        bg_snap.append(bg.copy())
        ba_snap.append(ba.copy())
        bg = bg + scale * noise.gyro_walk * sq * rng.standard_normal(3)
        ba = ba + scale * noise.accel_walk * sq * rng.standard_normal(3)
    return samples, bg_snap, ba_snap


def _ground_points(traj: Trajectory, spec: TrajectorySpec,
                   rng: np.random.Generator) -> np.ndarray:
    times = np.arange(0.0, spec.duration + 0.5, 0.5)
    path = np.array([traj.position(t)[:2] for t in times])
    intr = INTRINSICS
    half_x = spec.height * intr.principal[0] / intr.focal[0]
    half_y = spec.height * intr.principal[1] / intr.focal[1]
    margin = max(half_x, half_y) + 10.0
    lo = path.min(axis=0) - margin
    hi = path.max(axis=0) + margin
    density = TARGET_FEATURES / (4.0 * half_x * half_y)
    count = int(min(MAX_GROUND_POINTS,
                    np.ceil(density * np.prod(hi - lo))))
    pts = rng.uniform(lo, hi, size=(count, 2))
    return np.column_stack([pts, np.zeros(count)])


def _camera_frame(traj: Trajectory, budget: ErrorBudget, points: np.ndarray,
                  t: float, step: int, rng: np.random.Generator) -> CameraFrame:
    R_wi = quat_to_matrix(traj.attitude(t))
    R_ci = quat_to_matrix(quat_from_rotvec(budget.cam_rotvec))
    p_i = traj.position(t)
    R_wc = R_wi @ R_ci.T
    p_c = p_i + R_wi @ np.asarray(budget.cam_p)
    intr = INTRINSICS
    half_x = abs(p_c[2]) * intr.principal[0] / intr.focal[0]
    near = np.flatnonzero(
        (np.abs(points[:, 0] - p_c[0]) < 1.5 * half_x + 5.0)
        & (np.abs(points[:, 1] - p_c[1]) < 1.5 * half_x + 5.0))
    obs = []
    for idx in near:
        pc = R_wc.T @ (points[idx] - p_c)
        if pc[2] < 1.0:
            continue
        pixel = intr.pixel(pc[:2] / pc[2])
        pixel = pixel + budget.noise_scale * budget.pixel_sigma * rng.standard_normal(2)
        if not (0.0 <= pixel[0] < intr.resolution[0]
                and 0.0 <= pixel[1] < intr.resolution[1]):
            continue
        obs.append(FeatureObservation(feature_id=int(idx), clone_id=step,
                                      pixel=pixel,
                                      sigma_px=budget.pixel_sigma))
        if len(obs) >= 60:
            break
    return CameraFrame(t=t, step=step, observations=obs)


class _GnssSynth:
    """Per-scenario GNSS synthesis state: offsets, ambiguities, clocks."""

    def __init__(self, cons: Constellation, budget: ErrorBudget,
                 transform: FrameTransform, base_ecef: np.ndarray,
                 first_epoch_time: float, rng: np.random.Generator):
        self.cons = cons
        self.budget = budget
        self.transform = transform
        self.base_ecef = base_ecef
        self.rng = rng
        self.amb_rover, self.amb_base, self.lock_m = {}, {}, {}
        for sid in cons.ids():
            self.amb_rover[sid] = int(rng.integers(-50, 50))
            self.amb_base[sid] = int(rng.integers(-50, 50))
            sat = cons.state(sid, first_epoch_time)
            rng_b = np.linalg.norm(sat.position - base_ecef)
            # phase lock point in meters; the shared constant cancels when
            # legs are differenced, so the large range never meets the
            # cycle-scale division and rounding stays sub-nanometer
            self.lock_m[sid] = (float(np.round(rng_b / sat.wavelength))
                                * sat.wavelength)

    def _delays(self, el):
        tropo = self.budget.tropo_scale * default_troposphere(el, 0.0)
        iono = self.budget.iono_scale * IONO_VERTICAL / np.sin(el)
        return tropo, iono

    def _observation(self, sat, rec, vel, clock_m, drift_m, amb, rover: bool):
        budget = self.budget
        el = elevation_azimuth(rec, sat.position)[0]
        tropo, iono = self._delays(el)
        scale = budget.noise_scale
        wfac = 1.0 / np.sin(el) if rover else 1.0
        rng_geom = np.linalg.norm(sat.position - rec)
        # term order mirrors the residual models so noiseless residuals
        # vanish to rounding
        psr = (rng_geom + clock_m - SPEED_OF_LIGHT * sat.clock_bias
               + (tropo + iono) + sagnac(sat.position, rec))
        psr += scale * budget.sigma_pr * wfac * self.rng.standard_normal()
        if rover and budget.outlier_rate > 0.0 and self.rng.uniform() < budget.outlier_rate:
            psr += float(self.rng.choice([-1.0, 1.0])
                         * self.rng.uniform(200.0, 1000.0))
        kappa = (sat.position - rec) / rng_geom
        dopp = -(kappa @ (sat.velocity - vel) + drift_m
                 - SPEED_OF_LIGHT * sat.clock_drift) / sat.wavelength
        dopp += scale * budget.sigma_dop * wfac * self.rng.standard_normal()
        phase_m = ((rng_geom - self.lock_m[sat.id]) + clock_m
                   - SPEED_OF_LIGHT * sat.clock_bias
                   + tropo - iono + sagnac(sat.position, rec))
        phase = (phase_m / sat.wavelength + amb
                 + scale * budget.sigma_cp * wfac * self.rng.standard_normal())
        return RawObservation(sat=sat, pseudorange=psr, doppler=dopp,
                              carrier_phase=phase, sigma_pr=budget.sigma_pr,
                              sigma_dop=budget.sigma_dop,
                              sigma_cp=budget.sigma_cp, iono=iono)

    def epoch(self, t: float, p_ant_w, v_ant_w) -> GnssEpoch:
        budget = self.budget
        rec = self.transform.ecef_from_world(p_ant_w)
        vel = self.transform.ecef_rot() @ v_ant_w
        rover, base = [], []
        for sid in self.cons.ids():
            sat = self.cons.state(sid, t)
            clock_m = SPEED_OF_LIGHT * (budget.clock_bias0[sid[0]]
                                        + budget.clock_drift * t)
            drift_m = SPEED_OF_LIGHT * budget.clock_drift
            if elevation_azimuth(rec, sat.position)[0] > ELEVATION_MASK:
                rover.append(self._observation(sat, rec, vel, clock_m,
                                               drift_m, self.amb_rover[sid],
                                               rover=True))
            if elevation_azimuth(self.base_ecef, sat.position)[0] > ELEVATION_MASK:
                base_clock_m = SPEED_OF_LIGHT * budget.base_clock[sid[0]]
                base.append(self._observation(sat, self.base_ecef, np.zeros(3),
                                              base_clock_m, 0.0,
                                              self.amb_base[sid], rover=False))
        scale = budget.noise_scale
        epoch = GnssEpoch(time=t, rover_obs=rover, base_obs=base,
                          base_position=self.base_ecef.copy(),
                          base_clock=np.array(budget.base_clock, dtype=float),
                          spp_pos=rec + scale * budget.sigma_spp_pos
                          * self.rng.standard_normal(3),
                          spp_vel=vel + scale * budget.sigma_spp_vel
                          * self.rng.standard_normal(3),
                          spp_sigma_pos=budget.sigma_spp_pos,
                          spp_sigma_vel=budget.sigma_spp_vel)
        if budget.resolve_ambiguities:
            refs = select_base_satellites(epoch)
            dd = {}
            for obs in rover:
                sid = obs.sat.id
                ref = refs.get(sid[0])
                if ref is None or ref == sid:
                    continue
                dd[(sid, ref)] = ((self.amb_rover[sid] - self.amb_base[sid])
                                  - (self.amb_rover[ref] - self.amb_base[ref]))
            epoch.dd_ambiguities = dd
        return epoch


def generate(traj_spec: TrajectorySpec, const_spec: ConstellationSpec,
             budget: ErrorBudget):
    """Build one scenario; returns (header, events ordered by delivery)."""
    if const_spec.count != len(budget.clock_bias0) or \
            const_spec.count != len(budget.base_clock):
        raise ValueError("budget clock truths must match constellation count")
    seeds = np.random.SeedSequence(budget.seed).spawn(5)
    imu_rng, cam_rng, gnss_rng, world_rng, sat_rng = map(
        np.random.default_rng, seeds)

    traj = Trajectory(traj_spec)
    cons = Constellation(const_spec, sat_rng, budget.sat_clock_bias_scale,
                         budget.sat_clock_drift_scale)
    transform = FrameTransform(anchor_lat=budget.anchor_lat,
                               anchor_lon=budget.anchor_lon,
                               anchor_height=budget.anchor_height,
                               yaw=budget.frame_yaw,
                               ned_origin=np.array(budget.ned_origin))
    base_ecef = (geodetic_to_ecef(budget.anchor_lat, budget.anchor_lon,
                                  budget.anchor_height)
                 + ned_rotation(budget.anchor_lat, budget.anchor_lon)
                 @ np.asarray(budget.base_ned, dtype=float))

    total_ticks = int(round(traj_spec.duration * _TICK))
    imu_tick = _TICK // IMU_RATE
    cam_tick = _TICK // CAMERA_RATE
    gnss_tick = _TICK // GNSS_RATE

    n_imu = total_ticks // imu_tick
    samples, bg_snap, ba_snap = _imu_stream(traj, budget, n_imu, imu_rng)
    points = _ground_points(traj, traj_spec, world_rng)

    entries = []
    for s in samples:
        entries.append((int(round(s.t * _TICK)), s))

    latency_ticks = int(round(budget.gnss_latency * _TICK))
    synth = _GnssSynth(cons, budget, transform, base_ecef,
                       first_epoch_time=0.0, rng=gnss_rng)

    step = 0
    for tick in range(0, total_ticks + 1, cam_tick):
        t = tick / _TICK
        idx = min(tick // imu_tick, n_imu - 1)
        entries.append((tick, TruthState(
            t=t, q=traj.attitude(t), p=traj.position(t), v=traj.velocity(t),
            ba=ba_snap[idx], bg=bg_snap[idx],
            clock_bias=np.array(budget.clock_bias0) + budget.clock_drift * t,
            clock_drift=budget.clock_drift)))
        entries.append((tick, _camera_frame(traj, budget, points, t, step,
                                            cam_rng)))
        step += 1

    for tick in range(0, total_ticks + 1, gnss_tick):
        t = tick / _TICK
        R = quat_to_matrix(traj.attitude(t))
        lever = np.asarray(budget.lever, dtype=float)
        p_ant = traj.position(t) + R @ lever
        v_ant = traj.velocity(t) + R @ np.cross(traj.body_rate(t), lever)
        epoch = synth.epoch(t, p_ant, v_ant)
        entries.append((tick + latency_ticks,
                        EpochArrival(arrival=(tick + latency_ticks) / _TICK,
                                     epoch=epoch)))

    entries.sort(key=lambda e: (e[0], _event_priority(e[1])))
    events = [e for _, e in entries]

    span = np.array([traj.position(t) for t in
                     np.arange(0.0, traj_spec.duration + 0.5, 0.5)])
    scale = float(max(1.0, np.linalg.norm(span, axis=1).max()))

    header = ScenarioHeader(
        version=1, duration=traj_spec.duration, imu_rate=IMU_RATE,
        camera_rate=CAMERA_RATE, gnss_rate=GNSS_RATE,
        gnss_latency=budget.gnss_latency, n_constellations=const_spec.count,
        frequencies=tuple(const_spec.frequencies[:const_spec.count]),
        anchor_lat=budget.anchor_lat, anchor_lon=budget.anchor_lon,
        anchor_height=budget.anchor_height, frame_yaw=budget.frame_yaw,
        ned_origin=np.array(budget.ned_origin, dtype=float),
        base_position=base_ecef, base_clock=np.array(budget.base_clock),
        lever=np.array(budget.lever, dtype=float),
        cam_rotvec=np.array(budget.cam_rotvec, dtype=float),
        cam_p=np.array(budget.cam_p, dtype=float), gravity=GRAVITY,
        scale=scale, intrinsics=INTRINSICS, pixel_sigma=budget.pixel_sigma,
        sigma_pr=budget.sigma_pr, sigma_dop=budget.sigma_dop,
        sigma_cp=budget.sigma_cp, tropo_scale=budget.tropo_scale,
        iono_scale=budget.iono_scale, imu_noise=budget.imu,
        clock_bias0=np.array(budget.clock_bias0, dtype=float),
        clock_drift=budget.clock_drift)
    logger.info("generated %d events over %.1f s (%s)", len(events),
                traj_spec.duration, traj_spec.kind)
    return header, events
