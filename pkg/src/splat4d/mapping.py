"""Map optimization over the keyframe window, insertion and pruning.

The window objective is the sum of every window keyframe's photometric +
geometric L1 energy (each rendered at its own timestamp), two random past
keyframes re-drawn every iteration against forgetting, and the
dynamics-aware isotropic regularizers: splats labeled dynamic are pulled
toward equal scaling over all four axes, static splats over the three
spatial axes only. First-order steps with per-group step sizes; a global
backtracking multiplier guarantees accepted steps never increase the
objective. The first window keyframe's pose is the gauge and never moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianMap, logit
from .keyframing import Keyframe
from .renderer import condition_map, render, render_gradients

INSERT_ALPHA_MAX = 0.5
DEPTH_MISMATCH_FACTOR = 5.0
PARAM_GROUPS = ("mu", "log_scale", "q_left", "q_right", "opacity_logit", "color")


@dataclass
class MappingConfig:
    lambda_iso_dynamic: float = 10.0
    lambda_iso_static: float = 10.0
    dynamic_gaussian_threshold: float = 0.5
    iterations_per_keyframe: int = 15
    prune_opacity: float = 0.05
    prune_observation_min: int = 3
    sigma_t_static_init: float = 10.0  # seconds; callers set the sequence duration
    sigma_t_dynamic_init: float = 0.25
    insertion_stride: int = 4
    depth_noise_scale: float = 0.01  # meters
    lambda_pho: float = 0.9
    bootstrap_iterations: int = 60  # first keyframe optimizes a cold map
    # per-group step sizes (Adam-preconditioned first-order steps)
    lr_mu: float = 3e-4
    lr_log_scale: float = 6e-3
    lr_quat: float = 1.5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    lr_kf_translation: float = 1e-3
    lr_kf_rotation: float = 1e-3
    max_backtracks: int = 10


@dataclass
class WindowOptStats:
    energies: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0


def iso_regularizer(gmap: GaussianMap, cfg: MappingConfig):
    """Dynamics-aware isotropy energy and its gradient on log_scale.

    Dynamic splats (dynamics >= threshold): L1 distance of all four scaling
    entries from their mean. Static splats: the same over the three spatial
    entries. Returns (energy, grad) with the lambda weights applied and exact
    subgradients through exp(log_scale); sign(0) = 0.
    """
    n = len(gmap)
    grad = np.zeros((n, 4))
    if n == 0:
        return 0.0, grad
    S = np.exp(gmap.log_scale)
    dyn = gmap.dynamics >= cfg.dynamic_gaussian_threshold

    energy = 0.0
    if dyn.any():
        sub = S[dyn]
        dev = sub - sub.mean(axis=1, keepdims=True)
        energy += cfg.lambda_iso_dynamic * np.abs(dev).sum()
        sign = np.sign(dev)
        g_S = sign - sign.mean(axis=1, keepdims=True)
        grad[dyn] = cfg.lambda_iso_dynamic * g_S * sub
    stat = ~dyn
    if stat.any():
        sub = S[stat][:, :3]
        dev = sub - sub.mean(axis=1, keepdims=True)
        energy += cfg.lambda_iso_static * np.abs(dev).sum()
        sign = np.sign(dev)
        g_S = sign - sign.mean(axis=1, keepdims=True)
        grad[stat, :3] = cfg.lambda_iso_static * g_S * sub
    return float(energy), grad


def insert_gaussians(gmap: GaussianMap, kf: Keyframe, rendered, cfg: MappingConfig) -> int:
    """Spawn splats for under-covered or depth-inconsistent stride-grid pixels.

    New splats sit at the backprojected observed depth with a per-pixel
    footprint (depth/fx) spatial scale; temporal center at the keyframe's
    timestamp with a short temporal extent inside the keyframe's dynamic
    mask and a sequence-length extent outside it.
    """
    depth_obs = kf.depth
    h, w = depth_obs.shape
    candidate = rendered.alpha < INSERT_ALPHA_MAX
    mismatch = np.abs(rendered.depth - depth_obs) > DEPTH_MISMATCH_FACTOR * cfg.depth_noise_scale
    candidate |= (rendered.alpha > 0) & mismatch
    candidate &= depth_obs > 0
    stride = np.zeros_like(candidate)
    stride[::cfg.insertion_stride, ::cfg.insertion_stride] = True
    candidate &= stride
    vs, us = np.nonzero(candidate)
    if us.size == 0:
        return 0

    intr = kf.pose.intrinsics
    d = depth_obs[vs, us]
    cam = intr.backproject(np.stack([us, vs], axis=1).astype(float), d)
    world = (cam - kf.pose.t) @ kf.pose.R
    n = us.size
    mu = np.column_stack([world, np.full(n, kf.timestamp)])
    # footprint of the stride cell the splat stands in for; the bare per-pixel
    # depth/fx would leave stride-wide coverage holes the optimizer cannot
    # close within the iteration budget
    spatial = d / intr.fx * (cfg.insertion_stride / 2.0)
    if kf.dynamic_mask is not None:
        dyn_px = kf.dynamic_mask[vs, us]
    else:
        dyn_px = np.zeros(n, dtype=bool)
    sigma_t = np.where(dyn_px, cfg.sigma_t_dynamic_init, cfg.sigma_t_static_init)
    log_scale = np.column_stack([np.log(spatial)] * 3 + [np.log(sigma_t)])
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    gmap.add(mu, log_scale, quat, quat, logit(0.5), kf.rgb[vs, us],
             dyn_px.astype(float), kf.frame_index)
    return int(n)


def prune_gaussians(gmap: GaussianMap, window: list, cfg: MappingConfig) -> int:
    """Remove low-opacity splats and under-observed young splats.

    A young (not yet matured) splat whose birth frame the window has advanced
    past must currently appear in at least prune_observation_min window
    keyframe visible sets; survivors are marked matured and never re-tested.
    The test needs a window with at least that many keyframes to be
    meaningful. Keyframe visible sets are remapped to the surviving indices.
    """
    n = len(gmap)
    if n == 0:
        return 0
    keep = gmap.alpha >= cfg.prune_opacity
    if len(window) >= cfg.prune_observation_min:
        seen_count = np.zeros(n, dtype=int)
        for kf in window:
            idx = np.fromiter(kf.visible_set, dtype=int, count=len(kf.visible_set))
            if idx.size:
                seen_count[idx] += 1
        oldest = min(kf.frame_index for kf in window)
        past_birth = (~gmap.matured) & (gmap.birth_frame < oldest)
        starved = past_birth & (seen_count < cfg.prune_observation_min)
        keep &= ~starved
        gmap.matured |= past_birth & ~starved
    removed = int(n - keep.sum())
    if removed == 0:
        return 0
    remap = gmap.keep(keep)
    for kf in window:
        kf.visible_set = {int(remap[i]) for i in kf.visible_set if remap[i] >= 0}
    return removed


def frame_energy(gmap, kf: Keyframe, lambda_pho, *, time_invariant=False, threads=1,
                 conditioned=None):
    """Sum-normalized Eq. 8/9 energy of one keyframe against the map render."""
    fr = render(gmap, kf.pose, kf.timestamp, time_invariant=time_invariant,
                threads=threads, conditioned=conditioned)
    e_pho = np.abs(fr.color - kf.rgb).sum()
    geo = (kf.depth > 0) & (fr.alpha > 0)
    e_geo = np.abs(fr.depth[geo] - kf.depth[geo]).sum()
    return lambda_pho * e_pho + (1.0 - lambda_pho) * e_geo


def _frame_gradients(gmap, kf: Keyframe, lambda_pho, *, time_invariant, threads, conditioned):
    h, w = kf.depth.shape
    n_geo = max(int((kf.depth > 0).sum()), 1)
    weights = (lambda_pho * h * w * 3, (1.0 - lambda_pho) * n_geo)
    return render_gradients(gmap, kf.pose, kf.timestamp, kf.rgb, kf.depth, weights,
                            time_invariant=time_invariant, threads=threads,
                            conditioned=conditioned)


class _AdamState:
    """Per-group Adam moments; preconditions the first-order steps so the
    effective per-parameter step is lr-sized regardless of gradient scale."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-12):
        self.m = {}
        self.v = {}
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, grads):
        self.t += 1
        out = {}
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mh = self.m[name] / (1 - self.beta1**self.t)
            vh = self.v[name] / (1 - self.beta2**self.t)
            out[name] = mh / (np.sqrt(vh) + self.eps)
        return out


def optimize_window(gmap: GaussianMap, window: list, past_keyframes: list,
                    cfg: MappingConfig, rng, *, static3d: bool = False,
                    threads: int = 1, iterations: int | None = None) -> WindowOptStats:
    """Jointly refine splat parameters and window keyframe poses.

    Each iteration renders every window keyframe plus two freshly drawn past
    keyframes (frozen poses) at their own timestamps, adds the isotropic
    regularizers, and takes one Adam-preconditioned first-order step per
    parameter group; a global backtracking multiplier guarantees accepted
    steps never increase that iteration's objective. The first window
    keyframe's pose is held fixed as gauge. In static3d mode renders ignore
    time, temporal parameters are frozen, and every splat is regularized
    with the spatial three-entry term.
    """
    stats = WindowOptStats()
    if not window or len(gmap) == 0:
        return stats
    if iterations is None:
        iterations = cfg.iterations_per_keyframe

    eff_cfg = cfg
    if static3d:
        eff_cfg = MappingConfig(**{**cfg.__dict__, "dynamic_gaussian_threshold": 2.0})

    lam = cfg.lambda_pho
    lrs = {
        "mu": cfg.lr_mu, "log_scale": cfg.lr_log_scale,
        "q_left": cfg.lr_quat, "q_right": cfg.lr_quat,
        "opacity_logit": cfg.lr_opacity, "color": cfg.lr_color,
    }
    adam = _AdamState()
    pose_adam = _AdamState()
    multiplier = 1.0
    draw = []

    def window_energy(m, poses):
        cov4 = m.covariances()
        total = 0.0
        for kf, pose in zip(window, poses):
            cond = condition_map(m, kf.timestamp, time_invariant=static3d, cov4=cov4)
            saved = kf.pose
            kf.pose = pose
            total += frame_energy(m, kf, lam, time_invariant=static3d, threads=threads,
                                  conditioned=cond)
            kf.pose = saved
        for kf in draw:
            cond = condition_map(m, kf.timestamp, time_invariant=static3d, cov4=cov4)
            total += frame_energy(m, kf, lam, time_invariant=static3d, threads=threads,
                                  conditioned=cond)
        total += iso_regularizer(m, eff_cfg)[0]
        return total

    for _ in range(iterations):
        pool = [kf for kf in past_keyframes if kf not in window]
        if len(pool) >= 2:
            draw = [pool[i] for i in rng.choice(len(pool), size=2, replace=False)]
        else:
            draw = pool

        # gradients of the current objective
        cov4 = gmap.covariances()
        grads = {name: np.zeros_like(getattr(gmap, name)) for name in PARAM_GROUPS}
        pose_grads = [np.zeros(6) for _ in window]
        energy = 0.0
        for i, kf in enumerate(window):
            cond = condition_map(gmap, kf.timestamp, time_invariant=static3d, cov4=cov4)
            res = _frame_gradients(gmap, kf, lam, time_invariant=static3d,
                                   threads=threads, conditioned=cond)
            energy += res.energy
            for name in PARAM_GROUPS:
                grads[name] += getattr(res, name)
            pose_grads[i] = res.pose
        for kf in draw:
            cond = condition_map(gmap, kf.timestamp, time_invariant=static3d, cov4=cov4)
            res = _frame_gradients(gmap, kf, lam, time_invariant=static3d,
                                   threads=threads, conditioned=cond)
            energy += res.energy
            for name in PARAM_GROUPS:
                grads[name] += getattr(res, name)
        e_iso, g_iso = iso_regularizer(gmap, eff_cfg)
        energy += e_iso
        grads["log_scale"] += g_iso
        if static3d:
            grads["mu"][:, 3] = 0.0
            grads["log_scale"][:, 3] = 0.0

        stats.energies.append(energy)
        steps = adam.step(grads)
        if static3d:
            steps["mu"][:, 3] = 0.0
            steps["log_scale"][:, 3] = 0.0
        pose_steps = pose_adam.step({"kf": np.stack(pose_grads)})["kf"]

        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = gmap.copy()
            for name in PARAM_GROUPS:
                arr = getattr(trial, name)
                arr -= multiplier * lrs[name] * steps[name]
            trial.normalize_quaternions()
            trial_poses = [window[0].pose]
            for i, kf in enumerate(window[1:], start=1):
                s = pose_steps[i]
                xi = np.concatenate([
                    -multiplier * cfg.lr_kf_translation * s[:3],
                    -multiplier * cfg.lr_kf_rotation * s[3:],
                ])
                trial_poses.append(kf.pose.retract(xi))
            e_new = window_energy(trial, trial_poses)
            if e_new <= energy:
                for name in PARAM_GROUPS:
                    setattr(gmap, name, getattr(trial, name))
                for kf, pose in zip(window, trial_poses):
                    kf.pose = pose
                multiplier = min(multiplier * 1.5, 1.0)
                stats.accepted += 1
                accepted = True
                break
            multiplier *= 0.5
            stats.rejected += 1
        if not accepted:
            break
    return stats


def refresh_visible_sets(gmap, window, *, static3d=False, threads=1):
    """Re-render each window keyframe and update its visible-splat set."""
    if len(gmap) == 0:
        for kf in window:
            kf.visible_set = set()
        return
    cov4 = gmap.covariances()
    for kf in window:
        cond = condition_map(gmap, kf.timestamp, time_invariant=static3d, cov4=cov4)
        fr = render(gmap, kf.pose, kf.timestamp, time_invariant=static3d,
                    threads=threads, conditioned=cond)
        kf.visible_set = fr.per_gaussian_visibility
