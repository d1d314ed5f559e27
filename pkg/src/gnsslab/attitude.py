"""Quaternion attitude utilities.

Quaternions are scalar-first numpy arrays [w, x, y, z] and represent the
rotation body->reference: ``v_ref = R(q) @ v_body``.
"""
from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q)


def quat_mult(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (apply b first, then a)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle, radians)."""
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        # second-order small-angle expansion keeps the norm accurate
        half = 0.5 * np.asarray(rv, dtype=float)
        w = 1.0 - 0.5 * (half @ half)
        return quat_normalize(np.array([w, half[0], half[1], half[2]]))
    axis = np.asarray(rv, dtype=float) / angle
    s = np.sin(0.5 * angle)
    return np.array([np.cos(0.5 * angle), s * axis[0], s * axis[1], s * axis[2]])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Inverse of quat_from_rotvec; angle wrapped to [0, pi]."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    vec = q[1:4]
    sin_half = np.linalg.norm(vec)
    if sin_half < 1e-12:
        return 2.0 * vec  # small-angle: rv ~ 2*vector part
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return (angle / sin_half) * vec


def quat_to_dcm(q: np.ndarray) -> np.ndarray:
    """Direction cosine matrix R such that v_ref = R @ v_body."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def dcm_to_quat(r: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with non-negative scalar part."""
    tr = np.trace(r)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_dcm(q) @ v


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def euler_zyx_from_quat(q: np.ndarray) -> tuple[float, float, float]:
    """(yaw, pitch, roll) about reference z, then y, then x. For telemetry."""
    r = quat_to_dcm(q)
    yaw = float(np.arctan2(r[1, 0], r[0, 0]))
    pitch = float(np.arcsin(np.clip(-r[2, 0], -1.0, 1.0)))
    roll = float(np.arctan2(r[2, 1], r[2, 2]))
    return yaw, pitch, roll
