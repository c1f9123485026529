"""Quaternion and SO(3) helpers.

Convention used everywhere in this package: Hamilton quaternions stored
[x, y, z, w] (real part last), and a left-multiplicative small-angle error
q = dq (x) q_hat with dq ~ [0.5*dtheta, 1], i.e. R = Exp(dtheta) @ R_hat.
"""
from __future__ import annotations

import numpy as np

_EPS = 1e-12


def skew(v):
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.sqrt(q @ q)


def quat_identity():
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_multiply(q1, q2):
    """Hamilton product q1 (x) q2, both [x, y, z, w]."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q):
    x, y, z, w = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotvec(phi):
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < _EPS:
        q = np.array([0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2], 1.0])
        return quat_normalize(q)
    axis = phi / angle
    s = np.sin(0.5 * angle)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * angle)])


def quat_to_rotvec(q):
    q = quat_normalize(q)
    if q[3] < 0.0:
        q = -q
    n = np.linalg.norm(q[:3])
    if n < _EPS:
        return 2.0 * q[:3]
    return (2.0 * np.arctan2(n, q[3]) / n) * q[:3]


def exp_so3(phi):
    """Rodrigues formula, Exp: R^3 -> SO(3)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3)
            + (np.sin(angle) / angle) * K
            + ((1.0 - np.cos(angle)) / angle**2) * (K @ K))


def log_so3(R):
    """Log: SO(3) -> R^3, via the quaternion path for stability."""
    return quat_to_rotvec(matrix_to_quat(R))


def matrix_to_quat(R):
    # Shepperd's method, numerically safe for all quadrants.
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        w = 0.5 * np.sqrt(1.0 + t)
        s = 0.25 / w
        q = np.array([(R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s, w])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        v = 0.5 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        s = 0.25 / v
        q = np.empty(4)
        q[i] = v
        q[j] = (R[j, i] + R[i, j]) * s
        q[k] = (R[k, i] + R[i, k]) * s
        q[3] = (R[k, j] - R[j, k]) * s
    return quat_normalize(q)


def left_jacobian_so3(phi):
    """J_l(phi) = integral_0^1 Exp(s*phi) ds."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * K + (1.0 / 6.0) * (K @ K)
    a2 = angle * angle
    return (np.eye(3)
            + ((1.0 - np.cos(angle)) / a2) * K
            + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K))


def right_jacobian_so3(phi):
    """J_r(phi): Exp(phi + d) ~ Exp(phi) Exp(J_r(phi) d)."""
    return left_jacobian_so3(-np.asarray(phi, dtype=float))


def gamma2_so3(phi):
    """G2(phi) = integral_0^1 integral_0^s Exp(u*phi) du ds (double integral of Exp)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-6:
        return 0.5 * np.eye(3) + (1.0 / 6.0) * K + (1.0 / 24.0) * (K @ K)
    a2 = angle * angle
    return (0.5 * np.eye(3)
            + ((angle - np.sin(angle)) / (a2 * angle)) * K
            + ((0.5 * a2 + np.cos(angle) - 1.0) / (a2 * a2)) * (K @ K))


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_left_error(q, q_ref):
    """Small-angle error dtheta with q = Exp(dtheta) applied on the left of q_ref."""
    dq = quat_multiply(q, quat_conjugate(q_ref))
    return quat_to_rotvec(dq)


def apply_left_error(dtheta, q):
    """Retract: q <- Exp(dtheta) (x) q."""
    return quat_normalize(quat_multiply(quat_from_rotvec(dtheta), q))
