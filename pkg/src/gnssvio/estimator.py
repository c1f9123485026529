"""Sliding-window square-root fusion over a scenario event stream.

The camera clock drives the filter.  Each frame runs one cycle:

    propagate (IMU + clock random walk, new clone/extra/clock generations)
    -> marginalize (old generations, expired clones, canonical reorder)
    -> SLAM reobservation update
    -> feature promotion (delayed initialization)
    -> MSCKF updates for finished tracks
    -> pending GNSS epochs, oldest first
    -> frame-alignment / clock-bootstrap side machinery as applicable

GNSS epochs arrive with latency, always behind the newest clone; they are
tied back to it by IMU preintegration (the bridge), or pinned to the clone
directly when bridging is disabled for ablation.  Raw GNSS only enters the
filter once the frame alignment has converged and (for the tightly coupled
tiers) the receiver clocks have been bootstrapped.
"""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import replace

import numpy as np
import scipy.linalg

from . import srif
from .config import BASE_TIERS, ConfigError, RunConfig
from .geodesy import FrameTransform, yaw_rotation
from .gnss import (AtmosphereModel, GnssEpoch, GnssRows, ReceiverKinematics,
                   concat_rows, ddcp_residual, dopp_residual, dpsr_residual,
                   epoch_constraint, psr_residual, receiver_kinematics)
from .imu import (ImuBuffer, ImuSample, bridge_to_epoch,
                  empty_preintegration, preintegrate, propagate)
from .initializers import (GeodeticReference, add_frame_segment, clock_init,
                           clock_propagate, frame_converged,
                           frame_fix_constraint, freeze_frame)
from .rotations import quat_from_rotvec
from .sim import CameraFrame, EpochArrival, ScenarioHeader, TruthState
from .srif import (FilterError, InitRejectedError, LinearizedConstraint,
                   SquareRootState)
from .state import ClonePose, ExtraImu, NavState, ParamBlock, retract
from .vision import (BehindCameraError, _observation_rows, msckf_update,
                     slam_update, triangulate)

logger = logging.getLogger(__name__)

GNSS_TIERS = ("vio+dopp", "vio+dopp+psr", "vio+dopp+dpsr", "vio+dopp+ddcp")


class DivergenceError(FilterError):
    """Raised by the harness when the position error passes the sentinel."""


def gnssvel_rows(transform: FrameTransform, kin: ReceiverKinematics,
                 ned_vel_meas: np.ndarray, sigma: float,
                 n_constellations: int) -> GnssRows | None:
    """NED velocity fix as measurement rows; None before frame convergence."""
    if not transform.converged:
        return None
    Rz = yaw_rotation(transform.yaw)
    residual = np.asarray(ned_vel_meas, dtype=float) - Rz @ kin.v_w
    n = residual.size
    return GnssRows(residual=residual, d_pos=np.zeros((n, 3)), d_vel=Rz,
                    d_clock=np.zeros((n, n_constellations)),
                    d_drift=np.zeros(n), cov=sigma**2 * np.eye(n),
                    sats=[(-1, i) for i in range(n)],
                    kinds=["gnssvel"] * n)


class Estimator:
    """Replays one scenario's events; the harness feeds them in order."""

    def __init__(self, header: ScenarioHeader, config: RunConfig):
        config.validate()
        self.header = header
        self.config = config
        self.gravity = np.array([0.0, 0.0, header.gravity])
        self.intr = header.intrinsics
        self.imu_noise = header.imu_noise
        self.n_const = header.n_constellations
        self.atmos = AtmosphereModel(use_iono_truth=(config.iono_mode == "truth"))

        self.sq = srif.empty_state(dtype=config.dtype)
        self.nav: NavState | None = None
        self.buffer = ImuBuffer(retention=config.imu_retention)
        self.pending: deque[GnssEpoch] = deque()
        self.tracks: dict[int, list] = {}
        self.geo_ref: GeodeticReference | None = None
        self.clock_sid: str | None = None
        self.extra_sid: str | None = None
        self.step: int | None = None
        self.clock_batch: list[tuple[GnssEpoch, ReceiverKinematics]] = []
        self._init_truth: TruthState | None = None
        self._last_gyro_norm = 0.0

        self.estimate_log: list[tuple[float, np.ndarray, np.ndarray, np.ndarray]] = []
        self.cond_log: list[float] = []
        self.timers = {"propagate": 0.0, "vision": 0.0, "gnss": 0.0,
                       "init": 0.0}
        self.counters = {"slam_rows": 0, "msckf_rows": 0, "gnss_rows": 0,
                         "gnss_rows_gated": 0, "epochs": 0, "fixes": 0}

    # ------------------------------------------------------------------
    # event intake

    def feed(self, event) -> None:
        if isinstance(event, ImuSample):
            self.buffer.push(event)
        elif isinstance(event, TruthState):
            if self._init_truth is None:
                self._init_truth = event
        elif isinstance(event, EpochArrival):
            if len(self.pending) >= self.config.queue_capacity:
                raise FilterError("pending GNSS queue overflow")
            self.pending.append(event.epoch)
        elif isinstance(event, CameraFrame):
            self.cycle(event)
        else:
            raise TypeError(f"unknown event {type(event)!r}")

    @property
    def transform(self) -> FrameTransform | None:
        return self.nav.frame if self.nav is not None else None

    def newest_clone(self) -> ClonePose:
        return self.nav.clones[self.step]

    # ------------------------------------------------------------------
    # cycle stages

    def cycle(self, frame: CameraFrame) -> None:
        if self.nav is None:
            self._initialize(frame)
        else:
            t0 = time.perf_counter()
            self._propagate_merge(frame.step, frame.t)
            self.timers["propagate"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        self._slam(frame)
        self._promote(frame)
        self._msckf(frame)
        self.timers["vision"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        while self.pending:
            self._process_epoch(self.pending.popleft())
        self.timers["gnss"] += time.perf_counter() - t0
        clone = self.newest_clone()
        self.estimate_log.append((clone.t, clone.q.copy(), clone.p.copy(),
                                  self.nav.extra.v.copy()))
        self.cond_log.append(self.sq.condition_estimate())

    def _initialize(self, frame: CameraFrame) -> None:
        if self._init_truth is None:
            raise FilterError("no reference state before the first frame")
        truth = self._init_truth
        if abs(truth.t - frame.t) > 1e-6:
            raise FilterError("first frame does not match the reference time")
        cfg = self.config
        lever_err = cfg.lever_error0 / np.sqrt(3.0) * np.array([1.0, -1.0, 1.0])
        nav = NavState()
        nav.params = ParamBlock(cam_q=quat_from_rotvec(self.header.cam_rotvec),
                                cam_p=np.asarray(self.header.cam_p, float).copy(),
                                lever=np.asarray(self.header.lever, float) + lever_err,
                                clock_bias=np.zeros(self.n_const),
                                clock_drift=0.0)
        nav.extra = ExtraImu(v=truth.v.copy(), ba=truth.ba.copy(),
                             bg=truth.bg.copy())
        nav.clone_pose(frame.step, truth.q, truth.p, frame.t)
        self.nav = nav
        self.step = frame.step
        self.extra_sid = f"e{frame.step}"

        clone_sid = f"c{frame.step}"
        segments = [(clone_sid, 6), ("cam_extr", 6), ("lever", 3),
                    (self.extra_sid, 9)]
        sigmas = np.array(
            [cfg.sigma_init_rot] * 3 + [cfg.sigma_init_pos] * 3
            + [cfg.sigma_init_cam_rot] * 3 + [cfg.sigma_init_cam_pos] * 3
            + [max(cfg.sigma_init_lever, cfg.lever_error0)] * 3
            + [cfg.sigma_init_vel] * 3 + [cfg.sigma_init_ba] * 3
            + [cfg.sigma_init_bg] * 3)
        # one stacked prior: every new segment must leave this update solvable
        total = int(sigmas.size)
        blocks, off = {}, 0
        for sid, dim in segments:
            b = np.zeros((total, dim))
            b[off:off + dim] = np.eye(dim)
            blocks[sid] = b
            off += dim
        prior = LinearizedConstraint(blocks=blocks, residual=np.zeros(total),
                                     noise_sqrt_inv=1.0 / sigmas)
        sq = srif.augment(self.sq, segments)
        sq, _ = srif.update(sq, prior)
        self.sq = replace(sq, residual=np.zeros_like(sq.residual))

    def _propagate_merge(self, step: int, t: float) -> None:
        cfg = self.config
        nav = self.nav
        prev = self.newest_clone()
        segments = self.buffer.between(prev.t, t)
        clone, extra, phi, qd = propagate(prev, nav.extra, segments,
                                          self.imu_noise, self.gravity)
        self._last_gyro_norm = float(np.mean(np.linalg.norm(
            segments.gyro0 - nav.extra.bg, axis=1)))

        L = scipy.linalg.cholesky(qd, lower=True)
        W = scipy.linalg.solve_triangular(L, np.eye(15), lower=True,
                                          check_finite=False)
        WP = W @ phi
        old_clone, old_extra = f"c{self.step}", self.extra_sid
        new_clone, new_extra = f"c{step}", f"e{step}"
        rows = 15
        new_segments = [(new_clone, 6), (new_extra, 9)]
        blocks = {new_clone: W[:, 0:6], new_extra: W[:, 6:15],
                  old_clone: -WP[:, 0:6], old_extra: -WP[:, 6:15]}
        drop = [old_extra]

        if self.clock_sid is not None:
            dt = t - prev.t
            nav.params, phi_k, q_diag = clock_propagate(
                nav.params, dt, bias_walk=cfg.clock_bias_walk,
                drift_walk=cfg.clock_drift_walk)
            nk = phi_k.shape[0]
            wk = 1.0 / np.sqrt(q_diag)
            new_clock = f"k{step}"
            full = {sid: np.zeros((rows + nk, b.shape[1]))
                    for sid, b in blocks.items()}
            for sid, b in blocks.items():
                full[sid][:rows] = b
            full[new_clock] = np.zeros((rows + nk, nk))
            full[new_clock][rows:] = np.diag(wk)
            full[self.clock_sid] = np.zeros((rows + nk, nk))
            full[self.clock_sid][rows:] = -(wk[:, None] * phi_k)
            blocks = full
            new_segments.append((new_clock, nk))
            drop.append(self.clock_sid)
            self.clock_sid = new_clock
            rows += nk

        prior = LinearizedConstraint(blocks=blocks, residual=np.zeros(rows))
        self.sq = srif.augment(self.sq, new_segments, cross_jacobian=prior)

        nav.clone_pose(step, clone.q, clone.p, t)
        nav.extra = extra
        self.step = step
        self.extra_sid = new_extra

        if len(nav.clones) > cfg.window:
            dropped_step = nav.oldest_step()
            retired = nav.drop_oldest()
            drop.append(f"c{dropped_step}")
            drop.extend(f"f{fid}" for fid in retired)
        kept = [sid for sid, _ in self.sq.layout if sid not in drop]
        self.sq = srif.marginalize(self.sq, drop, nav.canonical_order(kept))

    def _apply(self, constraint: LinearizedConstraint) -> np.ndarray:
        self.sq, dx = srif.update(self.sq, constraint)
        self.nav = retract(self.nav, np.asarray(dx, dtype=float),
                           self.sq.layout)
        self.sq = replace(self.sq, residual=np.zeros_like(self.sq.residual))
        return dx

    def _slam(self, frame: CameraFrame) -> None:
        in_state, fresh = [], []
        for obs in frame.observations:
            (in_state if self.sq.has(f"f{obs.feature_id}") else fresh).append(obs)
        if in_state:
            con = slam_update(self.sq, self.nav, in_state, self.intr,
                              self.config.vision_gate_quantile)
            if con.rows:
                self.counters["slam_rows"] += con.rows
                self._apply(con)
        for obs in fresh:
            self.tracks.setdefault(obs.feature_id, []).append(obs)

    def _promote(self, frame: CameraFrame) -> None:
        cfg = self.config
        seen = {o.feature_id for o in frame.observations}
        capacity = cfg.max_slam_features - len(self.nav.features)
        if capacity <= 0:
            return
        for fid in list(self.tracks):
            if capacity <= 0:
                break
            if fid not in seen:
                continue
            in_window = [o for o in self.tracks[fid]
                         if o.clone_id in self.nav.clones]
            if len({o.clone_id for o in in_window}) < cfg.promote_min_track:
                continue
            # newest observation anchors: the feature then outlives the
            # older clones instead of retiring with the track's first one
            in_window.sort(key=lambda o: o.clone_id, reverse=True)
            feature = triangulate(
                [(self.nav.clones[o.clone_id], o.pixel) for o in in_window],
                self.nav.params, self.intr,
                cond_limit=cfg.triangulation_cond_limit)
            if feature is None:
                continue
            feature.anchor = in_window[0].clone_id
            self.nav.features[fid] = feature
            try:
                constraints = []
                for obs in in_window:
                    blocks, res = _observation_rows(self.nav, obs, self.intr)
                    constraints.append(LinearizedConstraint(
                        blocks=blocks, residual=res,
                        noise_sqrt_inv=np.full(2, 1.0 / obs.sigma_px)))
                self.sq = srif.delayed_init(self.sq, (f"f{fid}", 3),
                                            constraints)
            except (InitRejectedError, BehindCameraError):
                del self.nav.features[fid]
                continue
            dx = srif.solve_current(self.sq)
            self.nav = retract(self.nav, np.asarray(dx, dtype=float),
                               self.sq.layout)
            self.sq = replace(self.sq, residual=np.zeros_like(self.sq.residual))
            del self.tracks[fid]
            capacity -= 1

    def _msckf(self, frame: CameraFrame) -> None:
        cfg = self.config
        seen = {o.feature_id for o in frame.observations}
        window = set(self.nav.clones)
        for fid in list(self.tracks):
            track = self.tracks[fid]
            clone_ids = {o.clone_id for o in track if o.clone_id in window}
            alive = fid in seen
            full = len(clone_ids) >= cfg.window
            if alive and not full:
                continue
            del self.tracks[fid]
            if len(clone_ids) < cfg.msckf_min_clones:
                continue
            con = msckf_update(self.sq, self.nav, track, self.intr,
                               cfg.vision_gate_quantile)
            if con is not None and con.rows:
                self.counters["msckf_rows"] += con.rows
                self._apply(con)

    # ------------------------------------------------------------------
    # GNSS path

    def _process_epoch(self, epoch: GnssEpoch) -> None:
        cfg = self.config
        if cfg.tier == "vio":
            return
        self.counters["epochs"] += 1
        clone = self.newest_clone()
        span = clone.t - epoch.time
        if span < 0 or span > cfg.imu_retention:
            logger.warning("epoch at %.3f outside the window of clone %.3f",
                           epoch.time, clone.t)
            return
        use_bridge = cfg.bridging and span > 0
        if use_bridge:
            segments = self.buffer.between(epoch.time, clone.t)
            preint = preintegrate(segments, self.nav.extra.bg,
                                  self.nav.extra.ba, self.imu_noise,
                                  scheme=cfg.preint_scheme)
            gyro = segments.gyro0[0] - self.nav.extra.bg
            excitation = preint.mean_gyro_norm
        else:
            preint = empty_preintegration(self.nav.extra.bg, self.nav.extra.ba)
            gyro = self._gyro_near(clone.t)
            excitation = self._last_gyro_norm
        bridged = bridge_to_epoch(clone, self.nav.extra, preint, self.gravity)
        kin = receiver_kinematics(bridged.q, bridged.p, bridged.v, gyro,
                                  self.nav.params.lever)

        if self.transform is None or not self.transform.converged:
            t0 = time.perf_counter()
            self._frame_align_step(epoch, kin)
            self.timers["init"] += time.perf_counter() - t0
            return
        if cfg.tier == "vio+gnssvel":
            self._gnssvel_step(epoch, kin, bridged, use_bridge, excitation)
            return
        if self.clock_sid is None:
            t0 = time.perf_counter()
            self._clock_boot_step(epoch, kin)
            self.timers["init"] += time.perf_counter() - t0
            return
        self._tight_update(epoch, kin, bridged, span, use_bridge, excitation)

    def _gyro_near(self, t: float) -> np.ndarray:
        seg = self.buffer.between(t - 2.0 / self.header.imu_rate, t)
        return seg.gyro1[-1] - self.nav.extra.bg

    def _valid_fix(self, epoch: GnssEpoch) -> bool:
        """Fix form present with positive advertised sigmas."""
        return (epoch.spp_pos is not None and epoch.spp_vel is not None
                and epoch.spp_sigma_pos > 0 and epoch.spp_sigma_vel > 0)

    def _frame_align_step(self, epoch: GnssEpoch, kin: ReceiverKinematics) -> None:
        cfg = self.config
        if not self._valid_fix(epoch):
            return
        self.counters["fixes"] += 1
        if self.geo_ref is None:
            self.geo_ref = GeodeticReference.from_ecef(epoch.spp_pos)
            self.nav.frame = self.geo_ref.transform()
            self.sq = add_frame_segment(self.sq)
        ned_pos = self.geo_ref.ned_from_ecef(epoch.spp_pos)
        ned_vel = self.geo_ref.ned_rot.T @ epoch.spp_vel
        con = frame_fix_constraint(self.nav.frame, kin.p_w, kin.v_w, ned_pos,
                                   ned_vel, sigma_pos=epoch.spp_sigma_pos,
                                   sigma_vel=epoch.spp_sigma_vel)
        if con is None:
            return
        self._apply(con)
        sigma_yaw = np.deg2rad(cfg.frame_sigma_yaw_deg)
        if frame_converged(self.sq, sigma_yaw=sigma_yaw):
            self.sq, frozen = freeze_frame(self.sq, self.nav.frame)
            self.nav.frame = frozen

    def _clock_boot_step(self, epoch: GnssEpoch, kin: ReceiverKinematics) -> None:
        cfg = self.config
        self.clock_batch.append((epoch, kin))
        if len(self.clock_batch) > cfg.clock_batch_len:
            self.clock_batch.pop(0)
        epochs = [e for e, _ in self.clock_batch]
        kins = [k for _, k in self.clock_batch]
        solution = clock_init(epochs, self.nav.frame, kins, self.n_const,
                              atmosphere=self.atmos, seed=cfg.seed,
                              iterations=cfg.clock_ransac_iterations,
                              psr_threshold=cfg.clock_psr_threshold,
                              dopp_threshold=cfg.clock_dopp_threshold,
                              min_inliers=cfg.clock_min_inliers,
                              mask=cfg.elevation_mask)
        if (solution is None or not solution.drift_ok
                or not bool(np.all(solution.bias_ok))):
            return
        params = replace(self.nav.params, clock_bias=solution.bias.copy(),
                         clock_drift=solution.drift)
        clone = self.newest_clone()
        params, _, _ = clock_propagate(params, clone.t - epochs[0].time,
                                       bias_walk=cfg.clock_bias_walk,
                                       drift_walk=cfg.clock_drift_walk)
        self.nav.params = params
        nk = self.n_const + 1
        sid = f"k{self.step}"
        sig = np.concatenate([np.full(self.n_const, cfg.clock_init_sigma_bias),
                              [cfg.clock_init_sigma_drift]])
        prior = LinearizedConstraint(blocks={sid: np.eye(nk)},
                                     residual=np.zeros(nk),
                                     noise_sqrt_inv=1.0 / sig)
        self.sq = srif.delayed_init(self.sq, (sid, nk), [prior])
        self.clock_sid = sid
        self.clock_batch.clear()
        logger.info("clocks bootstrapped at t=%.2f: bias=%s drift=%.3e",
                    clone.t, solution.bias, solution.drift)

    def _tight_update(self, epoch: GnssEpoch, kin: ReceiverKinematics,
                      bridged, span: float, use_bridge: bool,
                      excitation: float) -> None:
        cfg = self.config
        params = self.nav.params
        transform = self.nav.frame
        parts = [dopp_residual(epoch, kin, transform, params,
                               mask=cfg.elevation_mask)]
        if cfg.tier == "vio+dopp+psr":
            psr = psr_residual(epoch, kin, transform, params, self.atmos,
                               clock_lag=span, mask=cfg.elevation_mask)
            if psr.size and cfg.iono_mode == "zero":
                psr.cov = psr.cov + cfg.psr_iono_sigma**2 * np.eye(psr.size)
            parts.append(psr)
        elif cfg.tier == "vio+dopp+dpsr":
            parts.append(dpsr_residual(epoch, kin, transform, params,
                                       clock_lag=span, mask=cfg.elevation_mask))
        elif cfg.tier == "vio+dopp+ddcp":
            parts.append(ddcp_residual(epoch, kin, transform, params,
                                       mask=cfg.elevation_mask))
        rows = concat_rows(parts)
        if rows.size == 0:
            return
        lever_on = cfg.estimate_lever and excitation >= cfg.lever_gyro_min
        bridge_jac = bridged.jac if use_bridge else None
        bridge_cov = bridged.cov if use_bridge else None
        gate_state = self.sq if cfg.gnss_gate_quantile else None
        con, kept = epoch_constraint(rows, kin, bridge_jac, bridge_cov,
                                     clone_sid=f"c{self.step}",
                                     extra_sid=self.extra_sid,
                                     clock_sid=self.clock_sid,
                                     lever_active=lever_on,
                                     gate_state=gate_state,
                                     gate_quantile=cfg.gnss_gate_quantile)
        self.counters["gnss_rows"] += kept
        self.counters["gnss_rows_gated"] += rows.size - kept
        if con.rows:
            self._apply(con)

    def _gnssvel_step(self, epoch: GnssEpoch, kin: ReceiverKinematics,
                      bridged, use_bridge: bool, excitation: float) -> None:
        cfg = self.config
        if not self._valid_fix(epoch):
            return
        self.counters["fixes"] += 1
        ned_vel = self.geo_ref.ned_rot.T @ epoch.spp_vel
        rows = gnssvel_rows(self.nav.frame, kin, ned_vel, epoch.spp_sigma_vel,
                            self.n_const)
        if rows is None:
            return
        lever_on = cfg.estimate_lever and excitation >= cfg.lever_gyro_min
        con, kept = epoch_constraint(
            rows, kin, bridged.jac if use_bridge else None,
            bridged.cov if use_bridge else None,
            clone_sid=f"c{self.step}", extra_sid=self.extra_sid,
            clock_sid=None, lever_active=lever_on,
            gate_state=self.sq if cfg.gnss_gate_quantile else None,
            gate_quantile=cfg.gnss_gate_quantile)
        self.counters["gnss_rows"] += kept
        if con.rows:
            self._apply(con)


def check_tier_support(config: RunConfig, first_epoch: GnssEpoch | None) -> None:
    """Raise ConfigError when the scenario cannot feed the requested tier."""
    if config.tier in BASE_TIERS:
        if first_epoch is None or first_epoch.base_obs is None:
            raise ConfigError(
                f"tier {config.tier!r} needs base-station data, "
                "but the scenario carries none")
        if config.tier == "vio+dopp+ddcp" and first_epoch.dd_ambiguities is None:
            raise ConfigError("tier 'vio+dopp+ddcp' needs resolved "
                              "double-difference ambiguities in the scenario")
