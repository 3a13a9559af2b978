"""Trajectory and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .dataset import associate_timestamps
from .errors import InvalidParameterError

PSNR_CAP_DB = 99.0


@dataclass
class TrajectoryPair:
    """Estimated vs ground-truth translations matched by timestamp."""

    est_xyz: np.ndarray  # (N,3)
    gt_xyz: np.ndarray  # (N,3)

    @classmethod
    def from_timestamped(cls, est, gt, tolerance=0.02) -> "TrajectoryPair":
        """est/gt: lists of (timestamp, position, quat) as loaded from disk."""
        pairs = associate_timestamps([e[0] for e in est], [g[0] for g in gt], tolerance)
        if len(pairs) < 2:
            raise InvalidParameterError("need at least 2 matched poses for trajectory metrics")
        est_xyz = np.array([est[i][1] for i, _ in pairs])
        gt_xyz = np.array([gt[j][1] for _, j in pairs])
        return cls(est_xyz=est_xyz, gt_xyz=gt_xyz)


def umeyama_alignment(src, dst):
    """Closed-form rigid (no scale) least-squares alignment src -> dst.

    Returns (R, t) with dst ~= src @ R.T + t.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(pair: TrajectoryPair, align: bool = True) -> float:
    """RMSE of absolute translational errors, in centimeters."""
    est = pair.est_xyz
    gt = pair.gt_xyz
    if est.shape[0] < 2:
        raise InvalidParameterError("need at least 2 matched poses")
    if align:
        R, t = umeyama_alignment(est, gt)
        est = est @ R.T + t
    err = np.linalg.norm(est - gt, axis=1)
    return float(np.sqrt(np.mean(err**2)) * 100.0)


def psnr(a, b, cap_db: float = PSNR_CAP_DB) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images report the cap."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidParameterError("psnr: shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return float(min(10.0 * np.log10(1.0 / mse), cap_db))


_LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Standard single-scale SSIM on the luma channel, mean over valid
    (fully inside) window positions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidParameterError("ssim: shape mismatch")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    if min(a.shape) < window_size:
        raise InvalidParameterError(f"ssim: image smaller than {window_size}x{window_size} window")
    w = _gaussian_window(window_size, sigma)
    half = window_size // 2

    def filt(img):
        return convolve(img, w, mode="constant")[half:-half, half:-half]

    mu_a = filt(a)
    mu_b = filt(b)
    s_aa = filt(a * a) - mu_a**2
    s_bb = filt(b * b) - mu_b**2
    s_ab = filt(a * b) - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))
