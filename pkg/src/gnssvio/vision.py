"""Camera measurement models.

Features are anchored inverse-depth points: [alpha, beta, rho] places the
point at [alpha, beta, 1]/rho in the camera frame of the anchoring clone
(one of the observing poses, chosen at initialization).  Reobservations of
in-state features become SLAM constraints; tracks that leave the window are
compressed into pose-only constraints by projecting out the feature
direction (the MSCKF construction).

Residual convention everywhere: measured minus predicted, so constraint
jacobians are plain derivatives of the prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as _qr

from .rotations import quat_to_matrix, skew
from .srif import LinearizedConstraint, SquareRootState, chi2_cut
from .state import RHO_MIN, ClonePose, InverseDepthFeature, NavState, ParamBlock

# points closer than this to the image plane are treated as behind the camera
MIN_DEPTH = 0.05


class BehindCameraError(ValueError):
    """Predicted point does not lie in front of the camera."""


@dataclass
class FeatureObservation:
    feature_id: int
    clone_id: int
    pixel: np.ndarray    # (u, v), px
    sigma_px: float = 1.0


@dataclass
class CameraIntrinsics:
    focal: tuple[float, float]
    principal: tuple[float, float]
    resolution: tuple[int, int] = (640, 480)

    def __post_init__(self):
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise ValueError("focal lengths must be positive")

    def normalized(self, pixel) -> np.ndarray:
        return np.array([(pixel[0] - self.principal[0]) / self.focal[0],
                         (pixel[1] - self.principal[1]) / self.focal[1]])

    def pixel(self, xy) -> np.ndarray:
        return np.array([self.focal[0] * xy[0] + self.principal[0],
                         self.focal[1] * xy[1] + self.principal[1]])


def camera_pose(clone: ClonePose, params: ParamBlock) -> tuple[np.ndarray, np.ndarray]:
    """World-from-camera rotation and world position of the camera origin."""
    R_wi = quat_to_matrix(clone.q)
    R_ci = quat_to_matrix(params.cam_q)
    return R_wi @ R_ci.T, clone.p + R_wi @ params.cam_p


def project(feature: InverseDepthFeature, anchor_clone: ClonePose,
            observing_clone: ClonePose, params: ParamBlock,
            intr: CameraIntrinsics) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Predict the pixel and its error-state Jacobian blocks.

    Blocks: "feature" (2x3), "anchor"/"observer" (2x6, [dtheta, dp]),
    "cam_extr" (2x6).  Raises BehindCameraError on cheirality failure.
    """
    if feature.rho < RHO_MIN:
        raise ValueError("inverse depth below the representable minimum")
    R_ci = quat_to_matrix(params.cam_q)
    p_ic = params.cam_p
    R_wa = quat_to_matrix(anchor_clone.q)
    R_wo = quat_to_matrix(observing_clone.q)

    pf_anchor_cam = np.array([feature.alpha, feature.beta, 1.0]) / feature.rho
    pf_world = R_wa @ (R_ci.T @ pf_anchor_cam + p_ic) + anchor_clone.p
    in_imu = R_wo.T @ (pf_world - observing_clone.p)
    u = R_ci @ (in_imu - p_ic)
    if u[2] < MIN_DEPTH:
        raise BehindCameraError("point behind the observing camera")

    x, y, z = u
    fx, fy = intr.focal
    pixel = np.array([fx * x / z + intr.principal[0],
                      fy * y / z + intr.principal[1]])
    J_px = np.array([[fx / z, 0.0, -fx * x / z**2],
                     [0.0, fy / z, -fy * y / z**2]])

    E = R_ci @ R_wo.T                       # d u / d pf_world
    rho = feature.rho
    d_anchor_pt = np.array([[1.0, 0.0, -feature.alpha / rho],
                            [0.0, 1.0, -feature.beta / rho],
                            [0.0, 0.0, -1.0 / rho]]) / rho

    J = {}
    J["feature"] = J_px @ E @ (R_wa @ R_ci.T) @ d_anchor_pt
    J["anchor"] = J_px @ np.hstack([E @ -skew(pf_world - anchor_clone.p), E])
    J["observer"] = J_px @ np.hstack([E @ skew(pf_world - observing_clone.p), -E])
    # extrinsic rotation enters twice: observing-side prefix and anchor-side
    # back-rotation of the anchored point
    d_th = -skew(u) + E @ R_wa @ R_ci.T @ skew(pf_anchor_cam)
    d_p = R_ci @ (R_wo.T @ R_wa - np.eye(3))
    J["cam_extr"] = J_px @ np.hstack([d_th, d_p])
    return pixel, J


def _merge_rows(blocks: dict[str, np.ndarray], add: dict[str, np.ndarray]) -> None:
    for sid, b in add.items():
        if sid in blocks:
            blocks[sid] = blocks[sid] + b
        else:
            blocks[sid] = b


def _observation_rows(nav: NavState, obs: FeatureObservation,
                      intr: CameraIntrinsics):
    """Jacobian blocks keyed by segment id plus the pixel residual."""
    feature = nav.features[obs.feature_id]
    anchor = nav.clones[feature.anchor]
    observer = nav.clones[obs.clone_id]
    pixel, J = project(feature, anchor, observer, nav.params, intr)
    blocks: dict[str, np.ndarray] = {f"f{obs.feature_id}": J["feature"]}
    _merge_rows(blocks, {f"c{feature.anchor}": J["anchor"]})
    _merge_rows(blocks, {f"c{obs.clone_id}": J["observer"]})
    _merge_rows(blocks, {"cam_extr": J["cam_extr"]})
    return blocks, np.asarray(obs.pixel, dtype=float) - pixel


def _gate_passes(sq: SquareRootState, blocks: dict[str, np.ndarray],
                 residual: np.ndarray, sigma: float, quantile: float,
                 cov: np.ndarray | None = None) -> bool:
    """Chi-square test against the current marginal covariance.

    cov, when given, is the precomputed full state covariance; repeated
    gates against one factor then share a single pair of triangular solves.
    """
    ids = [sid for sid in blocks if sq.has(sid)]
    H = np.hstack([blocks[sid] for sid in ids])
    if cov is None:
        P = sq.marginal_covariance(ids)
    else:
        off = sq.offsets()
        idx = np.concatenate([np.arange(off[s][0], off[s][0] + off[s][1])
                              for s in ids])
        P = cov[np.ix_(idx, idx)]
    S = H @ P @ H.T + sigma**2 * np.eye(len(residual))
    stat = float(residual @ np.linalg.solve(S, residual))
    return stat < chi2_cut(quantile, len(residual))


def slam_update(sq: SquareRootState, nav: NavState,
                observations: list[FeatureObservation], intr: CameraIntrinsics,
                gate_quantile: float = 0.95) -> LinearizedConstraint:
    """Stack reobservation rows for features currently in the state.

    Observations failing cheirality or the per-observation 95% gate are
    skipped; an all-gated (or empty) input yields an empty constraint.
    """
    blocks: dict[str, list[np.ndarray]] = {}
    residuals: list[np.ndarray] = []
    weights: list[float] = []
    rows = 0
    cov = sq.covariance() if (gate_quantile and observations) else None
    for obs in sorted(observations, key=lambda o: o.feature_id):
        if not sq.has(f"f{obs.feature_id}"):
            continue
        try:
            obs_blocks, res = _observation_rows(nav, obs, intr)
        except BehindCameraError:
            continue
        if gate_quantile and not _gate_passes(sq, obs_blocks, res,
                                              obs.sigma_px, gate_quantile,
                                              cov=cov):
            continue
        for sid, b in obs_blocks.items():
            blocks.setdefault(sid, []).append((rows, b))
        residuals.append(res)
        weights.extend([1.0 / obs.sigma_px] * 2)
        rows += 2

    if rows == 0:
        return LinearizedConstraint(blocks={}, residual=np.zeros(0))
    stacked = {}
    for sid, pieces in blocks.items():
        full = np.zeros((rows, pieces[0][1].shape[1]))
        for r0, b in pieces:
            full[r0:r0 + 2] = b
        stacked[sid] = full
    return LinearizedConstraint(blocks=stacked,
                                residual=np.concatenate(residuals),
                                noise_sqrt_inv=np.array(weights))


def triangulate(observations: list[tuple[ClonePose, np.ndarray]],
                params: ParamBlock, intr: CameraIntrinsics,
                max_iterations: int = 5, cond_limit: float = 1e6
                ) -> InverseDepthFeature | None:
    """Anchored two-view linear init refined by Gauss-Newton over all views.

    observations pair each clone with its measured pixel; the first entry is
    the anchor.  Returns None when the geometry is too weak (condition limit,
    cheirality, or negative depth).
    """
    if len(observations) < 2:
        return None
    anchor_clone = observations[0][0]
    R_wa, p_wa = camera_pose(anchor_clone, params)
    xy0 = intr.normalized(observations[0][1])

    # linear init for rho from the remaining rays:
    # cross([x, y, 1], R_j [a, b, 1] + rho t_j) = 0, alpha/beta fixed by anchor
    rows, rhs = [], []
    bearing = np.array([xy0[0], xy0[1], 1.0])
    for clone, pixel in observations[1:]:
        R_wj, p_wj = camera_pose(clone, params)
        R_j = R_wj.T @ R_wa
        t_j = R_wj.T @ (p_wa - p_wj)
        xy = intr.normalized(pixel)
        Rb = R_j @ bearing
        rows.extend([t_j[0] - xy[0] * t_j[2], t_j[1] - xy[1] * t_j[2]])
        rhs.extend([xy[0] * Rb[2] - Rb[0], xy[1] * Rb[2] - Rb[1]])
    rows, rhs = np.array(rows), np.array(rhs)
    denom = float(rows @ rows)
    if denom < 1e-12:
        return None
    rho = float(rows @ rhs) / denom
    if rho < RHO_MIN:
        return None
    feature = InverseDepthFeature(anchor=0, alpha=xy0[0], beta=xy0[1], rho=rho)

    for _ in range(max_iterations):
        J_list, r_list = [], []
        for clone, pixel in observations:
            try:
                pred, J = project(feature, anchor_clone, clone, params, intr)
            except BehindCameraError:
                return None
            J_list.append(J["feature"])
            r_list.append(np.asarray(pixel, dtype=float) - pred)
        A = np.vstack(J_list)
        N = A.T @ A
        if np.linalg.cond(N) > cond_limit:
            return None
        dx = np.linalg.solve(N, A.T @ np.concatenate(r_list))
        feature.alpha += dx[0]
        feature.beta += dx[1]
        feature.rho += dx[2]
        if feature.rho < RHO_MIN:
            return None
        if np.linalg.norm(dx) < 1e-10:
            break
    return feature


def msckf_update(sq: SquareRootState, nav: NavState,
                 track: list[FeatureObservation], intr: CameraIntrinsics,
                 gate_quantile: float = 0.95) -> LinearizedConstraint | None:
    """Pose-only constraint from a retired track.

    The feature is triangulated from the window, its Jacobian eliminated by
    left null-space projection, and the remaining rows gated as one block.
    Returns None when the track is unusable.
    """
    track = [o for o in track if o.clone_id in nav.clones]
    if len({o.clone_id for o in track}) < 3:
        return None
    track = sorted(track, key=lambda o: o.clone_id)
    anchor_id = track[0].clone_id
    anchor_clone = nav.clones[anchor_id]
    feature = triangulate([(nav.clones[o.clone_id], o.pixel) for o in track],
                          nav.params, intr)
    if feature is None:
        return None
    feature.anchor = anchor_id

    ids: list[str] = []
    Hf_rows, rows_by_sid, residuals = [], {}, []
    sigma = track[0].sigma_px
    n = len(track)
    for i, obs in enumerate(track):
        try:
            pixel, J = project(feature, anchor_clone, nav.clones[obs.clone_id],
                               nav.params, intr)
        except BehindCameraError:
            return None
        blocks = {}
        _merge_rows(blocks, {f"c{anchor_id}": J["anchor"]})
        _merge_rows(blocks, {f"c{obs.clone_id}": J["observer"]})
        _merge_rows(blocks, {"cam_extr": J["cam_extr"]})
        for sid, b in blocks.items():
            if sid not in rows_by_sid:
                rows_by_sid[sid] = np.zeros((2 * n, 6))
                ids.append(sid)
            rows_by_sid[sid][2 * i:2 * i + 2] += b
        Hf_rows.append(J["feature"])
        residuals.append(np.asarray(obs.pixel, dtype=float) - pixel)

    Hf = np.vstack(Hf_rows)
    r = np.concatenate(residuals)
    # left null space of the feature Jacobian: last 2n-3 columns of full Q
    Q, _ = _qr(Hf, mode="full")
    N = Q[:, 3:]
    blocks = {sid: N.T @ rows_by_sid[sid] for sid in ids}
    projected = LinearizedConstraint(blocks=blocks, residual=N.T @ r,
                                     noise_sqrt_inv=np.full(2 * n - 3, 1.0 / sigma))
    if gate_quantile:
        present = [sid for sid in blocks if sq.has(sid)]
        H = np.hstack([blocks[sid] for sid in present])
        P = sq.marginal_covariance(present)
        S = H @ P @ H.T + sigma**2 * np.eye(2 * n - 3)
        stat = float(projected.residual @ np.linalg.solve(S, projected.residual))
        if stat > chi2_cut(gate_quantile, 2 * n - 3):
            return None
    return projected
