"""State container bookkeeping and retraction conventions."""
import numpy as np
import pytest

from gnssvio.geodesy import SPEED_OF_LIGHT
from gnssvio.rotations import quat_left_error, quat_normalize
from gnssvio.state import (RHO_MIN, ClonePose, ExtraImu, InverseDepthFeature,
                           NavState, ParamBlock, retract)


class FrameStub:
    def __init__(self):
        self.yaw = 0.2
        self.ned_origin = np.array([1.0, 2.0, 3.0])


def build_nav(rng):
    nav = NavState()
    nav.features[4] = InverseDepthFeature(anchor=1, alpha=0.1, beta=-0.2, rho=0.5)
    nav.features[9] = InverseDepthFeature(anchor=2, alpha=0.0, beta=0.3, rho=0.25)
    for step in (1, 2, 3):
        nav.clone_pose(step, quat_normalize(rng.standard_normal(4)),
                       rng.standard_normal(3), t=0.05 * step)
    nav.params = ParamBlock(cam_q=quat_normalize(rng.standard_normal(4)),
                            cam_p=rng.standard_normal(3),
                            lever=np.array([0.1, 0.0, -0.05]),
                            clock_bias=np.array([1e-6, 2e-6]),
                            clock_drift=1e-9)
    nav.extra = ExtraImu(v=rng.standard_normal(3), ba=np.zeros(3), bg=np.zeros(3))
    nav.frame = FrameStub()
    return nav


def test_canonical_order():
    nav = NavState()
    ids = ["e3", "k3", "c2", "f10", "c1", "frame", "lever", "cam_extr", "f2"]
    assert nav.canonical_order(ids) == [
        "f2", "f10", "c1", "c2", "frame", "cam_extr", "lever", "k3", "e3"]
    with pytest.raises(ValueError):
        nav.canonical_order(["bogus"])


def test_drop_oldest_retires_anchored_features():
    nav = build_nav(np.random.default_rng(0))
    assert nav.oldest_step() == 1 and nav.newest_step() == 3
    retired = nav.drop_oldest()
    assert retired == [4]
    assert set(nav.features) == {9}
    assert nav.oldest_step() == 2


def test_retraction_applies_each_segment():
    rng = np.random.default_rng(1)
    nav = build_nav(rng)
    layout = [("f4", 3), ("f9", 3), ("c1", 6), ("c2", 6), ("c3", 6),
              ("frame", 4), ("cam_extr", 6), ("lever", 3), ("k3", 3), ("e3", 9)]
    dx = rng.standard_normal(sum(d for _, d in layout)) * 0.01
    out = retract(nav, dx, layout)

    # original untouched
    assert out is not nav and out.clones[1].p is not nav.clones[1].p
    np.testing.assert_allclose(out.features[4].alpha - nav.features[4].alpha, dx[0])
    np.testing.assert_allclose(out.features[9].rho - nav.features[9].rho, dx[5])
    np.testing.assert_allclose(quat_left_error(out.clones[2].q, nav.clones[2].q),
                               dx[12:15], atol=1e-12)
    np.testing.assert_allclose(out.clones[2].p - nav.clones[2].p, dx[15:18])
    np.testing.assert_allclose(out.frame.yaw - nav.frame.yaw, dx[24])
    np.testing.assert_allclose(out.frame.ned_origin - nav.frame.ned_origin, dx[25:28])
    np.testing.assert_allclose(quat_left_error(out.params.cam_q, nav.params.cam_q),
                               dx[28:31], atol=1e-12)
    np.testing.assert_allclose(out.params.lever - nav.params.lever, dx[34:37])
    # clock corrections arrive in meters, storage is seconds
    np.testing.assert_allclose(out.params.clock_bias - nav.params.clock_bias,
                               dx[37:39] / SPEED_OF_LIGHT)
    np.testing.assert_allclose(out.params.clock_drift - nav.params.clock_drift,
                               dx[39] / SPEED_OF_LIGHT)
    np.testing.assert_allclose(out.extra.v - nav.extra.v, dx[40:43])
    np.testing.assert_allclose(out.extra.bg - nav.extra.bg, dx[46:49])


def test_inverse_depth_clamped():
    nav = build_nav(np.random.default_rng(2))
    out = retract(nav, np.array([0.0, 0.0, -99.0]), [("f4", 3)])
    assert out.features[4].rho == RHO_MIN
