"""WGS-84 geodesy, local-frame rotations, and shared physical constants."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0          # m/s, exact
EARTH_ROTATION_RATE = 7.2921151467e-5  # rad/s
GRAVITY = 9.80665                      # m/s^2, standard value; world frame is z-down

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


def geodetic_to_ecef(lat, lon, height):
    """Latitude/longitude in radians, height in meters above the ellipsoid."""
    s, c = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * s * s)
    return np.array([(n + height) * c * np.cos(lon),
                     (n + height) * c * np.sin(lon),
                     (n * (1.0 - WGS84_E2) + height) * s])


def ecef_to_geodetic(p, iterations=8):
    """Iterative inverse; converges well below 1e-6 m for terrestrial points."""
    x, y, z = np.asarray(p, dtype=float)
    lon = np.arctan2(y, x)
    r = np.hypot(x, y)
    lat = np.arctan2(z, r * (1.0 - WGS84_E2))  # Bowring-style first guess
    height = 0.0
    for _ in range(iterations):
        s = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * s * s)
        height = r / np.cos(lat) - n if abs(lat) < 1.4 else z / s - n * (1.0 - WGS84_E2)
        lat = np.arctan2(z, r * (1.0 - WGS84_E2 * n / (n + height)))
    return lat, lon, height


def ned_rotation(lat, lon):
    """Columns are the local north/east/down axes in ECEF coordinates."""
    sp, cp = np.sin(lat), np.cos(lat)
    sl, cl = np.sin(lon), np.cos(lon)
    return np.array([
        [-sp * cl, -sl, -cp * cl],
        [-sp * sl, cl, -cp * sl],
        [cp, 0.0, -sp],
    ])


def elevation_azimuth(receiver_ecef, target_ecef):
    """Elevation and azimuth (radians) of a target as seen from a receiver."""
    lat, lon, _ = ecef_to_geodetic(receiver_ecef)
    los = np.asarray(target_ecef, dtype=float) - np.asarray(receiver_ecef, dtype=float)
    ned = ned_rotation(lat, lon).T @ (los / np.linalg.norm(los))
    el = np.arcsin(np.clip(-ned[2], -1.0, 1.0))
    az = np.arctan2(ned[1], ned[0])
    return el, az


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the shared down axis mapping world vectors into NED."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class FrameTransform:
    """Mapping between the z-down estimation world frame and ECEF.

    A NED frame is pinned at the geodetic anchor; the world frame differs
    from it by a yaw about the common down axis plus a translation
    (ned_origin = world origin expressed in NED).  yaw and ned_origin are
    the four alignment unknowns the initializer estimates; the anchor is a
    fixed datum.
    """
    anchor_lat: float
    anchor_lon: float
    anchor_height: float
    yaw: float = 0.0
    ned_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    converged: bool = False       # alignment frozen, safe to consume raw GNSS
    yaw_variance: float = np.inf  # marginal yaw variance at freeze time, rad^2

    def __post_init__(self):
        self.ned_origin = np.asarray(self.ned_origin, dtype=float)
        self._anchor_ecef = geodetic_to_ecef(self.anchor_lat, self.anchor_lon,
                                             self.anchor_height)
        self._r_en = ned_rotation(self.anchor_lat, self.anchor_lon)

    def anchor_ecef(self) -> np.ndarray:
        return self._anchor_ecef.copy()

    def ecef_rot(self) -> np.ndarray:
        return self._r_en @ yaw_rotation(self.yaw)

    def ned_from_world(self, p_w) -> np.ndarray:
        return yaw_rotation(self.yaw) @ np.asarray(p_w, dtype=float) + self.ned_origin

    def ned_from_ecef(self, p_e) -> np.ndarray:
        return self._r_en.T @ (np.asarray(p_e, dtype=float) - self._anchor_ecef)

    def ecef_from_world(self, p_w) -> np.ndarray:
        return self._anchor_ecef + self._r_en @ self.ned_from_world(p_w)

    def world_from_ecef(self, p_e) -> np.ndarray:
        local = self.ned_from_ecef(p_e)
        return yaw_rotation(self.yaw).T @ (local - self.ned_origin)
