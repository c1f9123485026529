"""Navigation state container and the error-state retraction.

Segment id scheme used throughout the estimator:
  f<n>      anchored inverse-depth feature, 3 error dims (alpha, beta, rho)
  c<n>      pose clone at camera step n, 6 dims (dtheta world-frame, dp)
  frame     4-dof global alignment (yaw, NED origin), present during init
  cam_extr  camera-IMU extrinsic, 6 dims (dtheta, dp)
  lever     IMU->antenna lever arm, 3 dims
  k<n>      receiver clocks at step n: one bias per constellation + shared
            drift, error-scaled to meters / meters-per-second
  e<n>      extra IMU state at step n, 9 dims (dv, dba, dbg)

Attitude errors are left-multiplicative world-frame angles; everything else
is additive.  Clock storage stays in seconds; only the error columns carry
the speed-of-light scaling, which keeps the factor well conditioned.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .geodesy import SPEED_OF_LIGHT
from .rotations import apply_left_error

# Inverse depth is clamped away from zero so the anchored point stays finite.
RHO_MIN = 1e-4


@dataclass
class ClonePose:
    """Pose of the IMU at one camera time: world-from-IMU rotation + position."""
    q: np.ndarray          # [x, y, z, w], rotates IMU vectors into the world frame
    p: np.ndarray          # m, world frame
    t: float


@dataclass
class InverseDepthFeature:
    anchor: int            # clone step of the first observing camera pose
    alpha: float           # bearing x in the anchor camera frame
    beta: float            # bearing y
    rho: float             # inverse depth along the anchor optical axis, 1/m


@dataclass
class ParamBlock:
    cam_q: np.ndarray      # camera-from-IMU rotation [x, y, z, w]
    cam_p: np.ndarray      # camera origin expressed in the IMU frame, m
    lever: np.ndarray      # antenna position in the IMU frame, m
    clock_bias: np.ndarray  # per-constellation receiver clock biases, s
    clock_drift: float     # shared clock drift, s/s


@dataclass
class ExtraImu:
    v: np.ndarray          # m/s, world frame
    ba: np.ndarray         # accelerometer bias, m/s^2
    bg: np.ndarray         # gyro bias, rad/s


@dataclass
class NavState:
    """Everything the sliding-window estimator keeps an estimate of."""
    features: dict[int, InverseDepthFeature] = field(default_factory=dict)
    clones: dict[int, ClonePose] = field(default_factory=dict)
    params: ParamBlock | None = None
    extra: ExtraImu | None = None
    frame: Any = None      # global alignment object while it sits in the state

    def newest_step(self) -> int:
        return max(self.clones)

    def oldest_step(self) -> int:
        return min(self.clones)

    def clone_pose(self, step: int, q, p, t) -> None:
        self.clones[step] = ClonePose(q=np.asarray(q, dtype=float).copy(),
                                      p=np.asarray(p, dtype=float).copy(), t=t)

    def drop_oldest(self) -> list[int]:
        """Remove the oldest clone; returns ids of features it anchored."""
        step = self.oldest_step()
        del self.clones[step]
        retired = [fid for fid, f in self.features.items() if f.anchor == step]
        for fid in retired:
            del self.features[fid]
        return retired

    def canonical_order(self, ids: list[str]) -> list[str]:
        """Features, clones oldest to newest, parameters, then extra state."""
        def key(sid: str):
            # exact ids first: "frame" and "cam_extr" share first letters
            # with the indexed feature/clone ids
            if sid == "frame":
                return (2, 0)
            if sid == "cam_extr":
                return (3, 0)
            if sid == "lever":
                return (4, 0)
            if sid.startswith("f"):
                return (0, int(sid[1:]))
            if sid.startswith("c"):
                return (1, int(sid[1:]))
            if sid.startswith("k"):
                return (5, int(sid[1:]))
            if sid.startswith("e"):
                return (6, int(sid[1:]))
            raise ValueError(f"unknown segment id {sid!r}")
        return sorted(ids, key=key)


def copy_nav(nav: NavState) -> NavState:
    """Independent copy; cheaper than deepcopy on the hot retraction path."""
    out = NavState()
    out.features = {fid: replace(f) for fid, f in nav.features.items()}
    out.clones = {step: ClonePose(q=c.q.copy(), p=c.p.copy(), t=c.t)
                  for step, c in nav.clones.items()}
    if nav.params is not None:
        p = nav.params
        out.params = replace(p, cam_q=p.cam_q.copy(), cam_p=p.cam_p.copy(),
                             lever=p.lever.copy(),
                             clock_bias=p.clock_bias.copy())
    if nav.extra is not None:
        out.extra = ExtraImu(v=nav.extra.v.copy(), ba=nav.extra.ba.copy(),
                             bg=nav.extra.bg.copy())
    if nav.frame is not None:
        # duck-typed (anything with yaw / ned_origin); small, so deepcopy
        out.frame = copy.deepcopy(nav.frame)
    return out


def retract(nav: NavState, correction: np.ndarray, layout: list[tuple[str, int]]
            ) -> NavState:
    """Apply a layout-aligned error correction; returns a new NavState."""
    out = copy_nav(nav)
    off = 0
    for sid, d in layout:
        c = np.asarray(correction[off:off + d], dtype=float)
        off += d
        if sid == "frame":
            out.frame.yaw += c[0]
            out.frame.ned_origin = out.frame.ned_origin + c[1:4]
        elif sid == "cam_extr":
            out.params.cam_q = apply_left_error(c[:3], out.params.cam_q)
            out.params.cam_p = out.params.cam_p + c[3:6]
        elif sid.startswith("f"):
            f = out.features[int(sid[1:])]
            f.alpha += c[0]
            f.beta += c[1]
            f.rho = max(f.rho + c[2], RHO_MIN)
        elif sid.startswith("c"):
            cl = out.clones[int(sid[1:])]
            cl.q = apply_left_error(c[:3], cl.q)
            cl.p = cl.p + c[3:6]
        elif sid == "lever":
            out.params.lever = out.params.lever + c
        elif sid.startswith("k"):
            out.params.clock_bias = out.params.clock_bias + c[:-1] / SPEED_OF_LIGHT
            out.params.clock_drift += c[-1] / SPEED_OF_LIGHT
        elif sid.startswith("e"):
            out.extra.v = out.extra.v + c[0:3]
            out.extra.ba = out.extra.ba + c[3:6]
            out.extra.bg = out.extra.bg + c[6:9]
        else:
            raise ValueError(f"unknown segment id {sid!r}")
    return out
