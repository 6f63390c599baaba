"""Small rotation helpers: quaternions, orthonormalization, axis rotations.

Quaternions are unit, Hamilton convention, stored as (w, x, y, z).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError


def quat_to_rotmat(q) -> np.ndarray:
    """3x3 rotation matrix from a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=float)
    nq = float(q @ q)
    if nq < 1e-12:
        raise ValidationError("quaternion has near-zero norm")
    w, x, y, z = q / math.sqrt(nq)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def orthonormality_defect(r) -> float:
    """Frobenius norm of R Rᵀ − I."""
    r = np.asarray(r, dtype=float)
    return float(np.linalg.norm(r @ r.T - np.eye(3)))


def check_rotation(r, tol: float = 1e-6) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValidationError("rotation must be a 3x3 matrix")
    if orthonormality_defect(r) > tol:
        raise ValidationError("matrix is not orthonormal within tolerance")
    if np.linalg.det(r) < 0:
        raise ValidationError("rotation must have determinant +1")
    return r


def nearest_rotation(m) -> np.ndarray:
    """Closest rotation to m in Frobenius norm (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(r) -> float:
    """Rotation angle of R in radians, in [0, pi].

    atan2 of the skew norm against the trace stays accurate near zero,
    where the plain acos formulation loses half the significant digits.
    """
    r = np.asarray(r, dtype=float)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = float(np.linalg.norm(skew)) / 2.0
    c = (float(np.trace(r)) - 1.0) / 2.0
    return math.atan2(s, c)
