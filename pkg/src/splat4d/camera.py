"""Camera pose (world-to-camera SE(3)) and pinhole intrinsics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import se3_exp


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def project(self, points_cam):
        """Camera-frame points (N,3) -> pixel coords (N,2). Caller culls z<=0."""
        p = np.asarray(points_cam, dtype=float)
        z = p[..., 2]
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def backproject(self, uv, depth):
        """Pixel coords (N,2) + depth (N,) -> camera-frame points (N,3)."""
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)


class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    __slots__ = ("R", "t", "intrinsics")

    def __init__(self, R, t, intrinsics: Intrinsics):
        R = np.asarray(R, dtype=float).reshape(3, 3)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-5 or abs(np.linalg.det(R) - 1.0) > 1e-5 or not np.all(np.isfinite(R)):
            raise ValueError("rotation must be orthonormal with determinant +1")
        if err > 1e-12:
            # composition chains (motion prediction feeding the next estimate)
            # otherwise amplify round-off geometrically; snap to the nearest
            # rotation
            U, _, Vt = np.linalg.svd(R)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ D @ Vt
        self.R = R
        self.t = np.asarray(t, dtype=float).reshape(3)
        self.intrinsics = intrinsics

    @classmethod
    def identity(cls, intrinsics: Intrinsics) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3), intrinsics)

    def copy(self) -> "CameraPose":
        return CameraPose(self.R.copy(), self.t.copy(), self.intrinsics)

    def world_to_camera(self, points):
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def camera_center(self):
        return -self.R.T @ self.t

    def inverse_matrix(self):
        """4x4 camera-to-world matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R.T
        M[:3, 3] = self.camera_center()
        return M

    def matrix(self):
        """4x4 world-to-camera matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def retract(self, xi) -> "CameraPose":
        """Left-multiplicative update: T <- Exp(xi) @ T, xi = (v, w)."""
        dR, dt = se3_exp(xi)
        return CameraPose(dR @ self.R, dR @ self.t + dt, self.intrinsics)

    def relative_translation(self, other: "CameraPose") -> float:
        """Distance between camera centers, meters."""
        return float(np.linalg.norm(self.camera_center() - other.camera_center()))
