"""SE(3) and quaternion helpers.

Conventions: quaternions are (w, x, y, z) with unit norm; rotation matrices
map column vectors; tangent 6-vectors are (translation, rotation) applied
left-multiplicatively, T <- Exp(xi) @ T.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_to_rot(q):
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R):
    """3x3 rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def hat(w):
    """3-vector -> skew-symmetric cross-product matrix."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Rodrigues formula; small angles handled by series."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation matrix -> axis-angle 3-vector."""
    cos_t = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # near pi: use the symmetric part
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from off-diagonals
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = A[i, j] / axis[i] * np.sign(1.0)
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * (
        theta / (2 * np.sin(theta))
    )


def se3_exp(xi):
    """Tangent (v, w) -> (R, t) with the standard SE(3) exponential."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    R = so3_exp(w)
    K = hat(w)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        V = (
            np.eye(3)
            + ((1 - np.cos(theta)) / theta**2) * K
            + ((theta - np.sin(theta)) / theta**3) * (K @ K)
        )
    return R, V @ v


def se3_log(R, t):
    """(R, t) -> tangent (v, w)."""
    w = so3_log(R)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        half = 0.5 * theta
        cot = half / np.tan(half)
        Vinv = np.eye(3) - 0.5 * K + ((1 - cot) / theta**2) * (K @ K)
    return np.concatenate([Vinv @ t, w])
