"""Per-frame camera pose estimation.

Keeps the tracked-anchor list healthy, filters unstable tracks with the
four-gate test (visibility, dynamics, reliability quantile, track length),
and minimizes the weighted photometric/geometric L1 residual over patches
around the surviving anchors by first-order descent on the SE(3) tangent
with backtracking. The map is never mutated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose
from .errors import InvalidParameterError, TrackingDegenerateError
from .gaussians import GaussianMap
from .info import anchor_subregion, select_anchors
from .renderer import condition_map, render


@dataclass
class FilterThresholds:
    """Track-filter gates; defaults follow the reference operating point."""

    gamma_v: float = 0.9
    gamma_d: float = 0.9
    gamma_u: float = 0.8
    gamma_track: int = 3

    def __post_init__(self):
        for name in ("gamma_v", "gamma_d", "gamma_u"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must be in [0,1], got {v}")
        if self.gamma_track < 1:
            raise InvalidParameterError("gamma_track must be >= 1")


@dataclass
class TrackingResult:
    pose: CameraPose
    inlier_anchor_ids: list
    final_energy: float
    iterations: int
    energy_log: list = field(default_factory=list)


def filter_tracks(histories, current_frame, th: FilterThresholds):
    """Anchor ids passing all four gates at `current_frame`.

    histories: {anchor_id: [TrackRecord, ...]} covering the current frame.
    The reliability gate compares against the empirical gamma_u quantile
    (linear interpolation) of reliabilities among anchors that passed the
    visibility and dynamics gates this frame; with fewer than two such
    candidates the quantile gate passes everything.
    """
    current = {}
    for aid, recs in histories.items():
        for r in recs:
            if r.frame == current_frame:
                current[aid] = r
                break
    candidates = {
        aid: r for aid, r in current.items()
        if r.visibility >= th.gamma_v and r.dynamics < th.gamma_d
    }
    if len(candidates) >= 2:
        rels = np.array([r.reliability for r in candidates.values()])
        q = float(np.quantile(rels, th.gamma_u))
        passing = {aid for aid, r in candidates.items() if r.reliability >= q}
    else:
        passing = set(candidates)
    out = set()
    for aid in passing:
        n_visible = sum(1 for r in histories[aid] if r.visibility >= th.gamma_v)
        if n_visible >= th.gamma_track:
            out.add(aid)
    return out


def replenish_anchors(active_positions, frame_rgb, min_count, grid, pool, birth_frame, start_id):
    """Fresh anchors for grid subregions not occupied by an active anchor.

    active_positions: current pixel positions of live anchors. Returns [] if
    the population is already at least min_count; otherwise one anchor per
    unoccupied subregion (the whole remaining grid).
    """
    if len(active_positions) >= min_count:
        return []
    shape = frame_rgb.shape[:2]
    occupied = set()
    for pos in active_positions:
        if 0 <= pos[0] < shape[1] and 0 <= pos[1] < shape[0]:
            occupied.add(anchor_subregion(pos, shape, grid, pool))
    fresh = select_anchors(frame_rgb, grid=grid, pool=pool,
                           birth_frame=birth_frame, start_id=start_id)
    out = []
    aid = start_id
    for anchor, region in zip(fresh, [(r, c) for r in range(grid[0]) for c in range(grid[1])]):
        if region in occupied:
            continue
        anchor.id = aid
        aid += 1
        out.append(anchor)
    return out


def patch_mask(shape, positions, radius):
    """Union of (2r+1)-square patches centered at the given pixel positions."""
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    for pos in positions:
        u = int(round(pos[0]))
        v = int(round(pos[1]))
        if u < -radius or u >= w + radius or v < -radius or v >= h + radius:
            continue
        mask[max(0, v - radius):v + radius + 1, max(0, u - radius):u + radius + 1] = True
    return mask


@dataclass
class PoseOptConfig:
    max_iterations: int = 100
    min_update_norm: float = 1e-6
    fd_step_translation: float = 1e-5  # meters, Jacobian finite-difference step
    fd_step_rotation: float = 1e-5  # radians
    max_step_translation: float = 0.05
    max_step_rotation: float = 0.05
    damping_init: float = 1e-3
    damping_grow: float = 5.0
    damping_shrink: float = 0.25
    max_backtracks: int = 15
    irls_delta: float = 1e-4  # residual floor for the 1/|r| reweighting
    jacobian_refresh: int = 3  # rebuild J every k-th iteration (6 renders each)


def estimate_pose(gmap: GaussianMap, rgb, depth, t, init: CameraPose, inlier_positions,
                  inlier_ids, lambda_pho: float, cfg: PoseOptConfig | None = None, *,
                  patch_radius: int = 3, time_invariant: bool = False,
                  threads: int = 1) -> TrackingResult:
    """Minimize the patch-restricted tracking energy from `init`.

    Steps come from a damped Gauss-Newton solve on the per-pixel residuals
    (finite-difference Jacobian over the 6 tangent directions, rows
    reweighted by 1/|r| so the direction matches the L1 objective); every
    step is accepted only if the true L1 energy does not increase, so the
    energy log is non-increasing, and rejected trials raise the damping.
    Raises TrackingDegenerateError when no residual pixels exist (the caller
    falls back to its motion prediction).
    """
    if cfg is None:
        cfg = PoseOptConfig()
    if len(gmap) == 0:
        raise TrackingDegenerateError("cannot track against an empty map")
    mask = patch_mask(depth.shape, inlier_positions, patch_radius)
    if not mask.any():
        raise TrackingDegenerateError("no residual pixels: empty inlier patch set")

    w_pho, w_geo = lambda_pho, 1.0 - lambda_pho
    cond = condition_map(gmap, t, time_invariant=time_invariant)
    vs, us = np.nonzero(mask)
    tc = rgb[vs, us]
    td = depth[vs, us]
    geo_rows = td > 0
    n_pho = us.size
    n_geo = max(int(geo_rows.sum()), 1)
    # per-row weights reproducing the mean-L1 energy normalization
    base_w = np.concatenate([
        np.full(n_pho * 3, w_pho / (n_pho * 3)),
        np.where(geo_rows, w_geo / n_geo, 0.0),
    ])

    def residuals(pose):
        fr = render(gmap, pose, t, mask=mask, time_invariant=time_invariant,
                    threads=threads, conditioned=cond)
        r_c = (fr.color[vs, us] - tc).ravel()
        d_px = fr.depth[vs, us]
        covered = fr.alpha[vs, us] > 0
        r_d = np.where(geo_rows & covered, d_px - td, 0.0)
        return np.concatenate([r_c, r_d])

    def l1_energy(r):
        return float(base_w @ np.abs(r))

    pose = init.copy()
    r0 = residuals(pose)
    energy = l1_energy(r0)
    energy_log = [energy]
    damping = cfg.damping_init

    def build_jacobian(at_pose, r_base):
        J = np.empty((r_base.size, 6))
        for k in range(6):
            h = cfg.fd_step_translation if k < 3 else cfg.fd_step_rotation
            e = np.zeros(6)
            e[k] = h
            J[:, k] = (residuals(at_pose.retract(e)) - r_base) / h
        return J

    J = None
    iterations = 0
    for it in range(cfg.max_iterations):
        iterations += 1
        fresh = J is None or it % cfg.jacobian_refresh == 0
        if fresh:
            J = build_jacobian(pose, r0)
        w_rows = base_w / np.maximum(np.abs(r0), cfg.irls_delta)
        JtW = J.T * w_rows
        H = JtW @ J
        g = JtW @ r0
        accepted = False
        for _ in range(cfg.max_backtracks):
            try:
                delta = np.linalg.solve(H + damping * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                damping *= cfg.damping_grow
                continue
            n_v = np.linalg.norm(delta[:3])
            n_w = np.linalg.norm(delta[3:])
            scale = min(
                1.0,
                cfg.max_step_translation / n_v if n_v > 0 else 1.0,
                cfg.max_step_rotation / n_w if n_w > 0 else 1.0,
            )
            delta = delta * scale
            cand = pose.retract(delta)
            r_new = residuals(cand)
            e_new = l1_energy(r_new)
            if e_new <= energy:
                pose = cand
                r0 = r_new
                energy = e_new
                energy_log.append(energy)
                damping = max(damping * cfg.damping_shrink, 1e-8)
                accepted = True
                break
            damping *= cfg.damping_grow
        if not accepted:
            if not fresh:
                J = None  # retry with a fresh Jacobian before giving up
                continue
            break
        if np.linalg.norm(delta) < cfg.min_update_norm:
            break

    return TrackingResult(pose=pose, inlier_anchor_ids=list(inlier_ids),
                          final_energy=float(energy), iterations=iterations,
                          energy_log=energy_log)


def constant_velocity_extrapolation(prev: CameraPose, prev2: CameraPose) -> CameraPose:
    """Apply the last inter-frame motion once more: T = (T1 T2^-1) T1."""
    R_d = prev.R @ prev2.R.T
    t_d = prev.t - R_d @ prev2.t
    return CameraPose(R_d @ prev.R, R_d @ prev.t + t_d, prev.intrinsics)
