"""Built-in verification suite: oracle and property checks that need no
external data. Each check prints one pass/fail line; the exit code is 0 only
when everything passes."""

from __future__ import annotations

import numpy as np

from .camera import CameraPose, Intrinsics
from .gaussians import Gaussian4D, GaussianMap, build_covariance, condition_at_time, eval_density
from .metrics import ate_rmse, psnr, ssim, TrajectoryPair
from .renderer import LOWPASS_PX2, render, render_gradients
from .gaussians import sigmoid
from .simulator import default_scene_spec, generate


def _random_gaussian(rng):
    q1 = rng.normal(size=4)
    q2 = rng.normal(size=4)
    return Gaussian4D(
        mu=rng.normal(size=4), log_scale=rng.uniform(-1.5, 0.5, 4),
        q_left=q1 / np.linalg.norm(q1), q_right=q2 / np.linalg.norm(q2),
        opacity_logit=rng.uniform(-2, 2), color=rng.uniform(0, 1, 3),
    )


def check_conditioning(rng):
    for _ in range(300):
        g = _random_gaussian(rng)
        t = float(g.mu[3] + rng.normal())
        c = condition_at_time(g, t)
        lam = np.linalg.inv(g.covariance())
        cov_o = np.linalg.inv(lam[:3, :3])
        mu_o = g.mu[:3] - cov_o @ lam[:3, 3] * (t - g.mu[3])
        if np.abs(c.mu_xyz - mu_o).max() > 1e-9 * max(1, np.abs(mu_o).max()):
            return False
        if np.abs(c.cov_xyz - cov_o).max() > 1e-9 * max(1, np.abs(cov_o).max()):
            return False
    return True


def check_spectrum(rng):
    for _ in range(300):
        ls = rng.uniform(-1, 1, 4)
        q1 = rng.normal(size=4)
        q2 = rng.normal(size=4)
        cov = build_covariance(ls, q1 / np.linalg.norm(q1), q2 / np.linalg.norm(q2))
        eig = np.sort(np.linalg.eigvalsh(cov))
        if np.abs(eig - np.sort(np.exp(2 * ls))).max() > 1e-9:
            return False
    return True


def check_factorization(rng):
    for _ in range(300):
        g = _random_gaussian(rng)
        x = g.mu + rng.normal(size=4)
        joint = eval_density(g, x)
        c = condition_at_time(g, float(x[3]))
        d = x[:3] - c.mu_xyz
        spatial = np.exp(-0.5 * d @ np.linalg.solve(c.cov_xyz, d))
        if abs(joint - c.temporal_weight * spatial) > 1e-9 * max(joint, 1e-30):
            return False
    return True


def check_compositing(rng):
    intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    pose = CameraPose.identity(intr)
    gmap = GaussianMap()
    gs = []
    for depth, color, logit_a in [(1.0, [0.9, 0.1, 0.2], 0.8), (2.0, [0.1, 0.8, 0.5], 0.4)]:
        g = Gaussian4D([0.02, -0.01, depth, 0.0], np.log([0.03, 0.03, 0.03, 1.0]),
                       [1, 0, 0, 0], [1, 0, 0, 0], logit_a, color)
        gs.append(g)
        gmap.add_gaussian(g)
    fr = render(gmap, pose, 0.0)
    for u, v in [(64, 64), (66, 62), (60, 60)]:
        terms = []
        for g in gs:
            cov = g.covariance()
            b = cov[:3, 3]
            mu_c = g.mu[:3]
            cov_c = cov[:3, :3] - np.outer(b, b) / cov[3, 3]
            cam = pose.R @ mu_c + pose.t
            x, y, z = cam
            mean2d = np.array([100 * x / z + 64, 100 * y / z + 64])
            J = np.array([[100 / z, 0, -100 * x / z**2], [0, 100 / z, -100 * y / z**2]])
            c2 = J @ cov_c @ J.T + LOWPASS_PX2 * np.eye(2)
            d = np.array([u, v]) - mean2d
            w = np.exp(-0.5 * d @ np.linalg.solve(c2, d)) * sigmoid(g.opacity_logit)
            terms.append((z, w, g.color))
        terms.sort(key=lambda e: e[0])
        expect = np.zeros(3)
        T = 1.0
        for _, w, c in terms:
            expect += w * T * c
            T *= 1 - w
        if np.abs(fr.color[v, u] - expect).max() > 1e-6:
            return False
    return True


def check_gradients(rng):
    intr = Intrinsics(35.0, 35.0, 15.5, 15.5, 32, 32)
    pose = CameraPose.identity(intr)
    for _ in range(2):
        gmap = GaussianMap()
        gmap.add_gaussian(Gaussian4D([0, 0, 4.0, 0], np.log([3, 3, 3, 1.0]),
                                     [1, 0, 0, 0], [1, 0, 0, 0], 0.0, [0.5, 0.5, 0.5]))
        for _ in range(3):
            g = _random_gaussian(rng)
            g.mu = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25),
                             rng.uniform(1.4, 2.6), rng.uniform(-0.1, 0.1)])
            g.log_scale = np.concatenate([np.log(rng.uniform(0.05, 0.25, 3)),
                                          [np.log(rng.uniform(0.5, 1.0))]])
            g.opacity_logit = rng.uniform(-2, 0.8)
            gmap.add_gaussian(g)
        fr = render(gmap, pose, 0.0)
        tc = fr.color + rng.choice([-1, 1], fr.color.shape) * 0.1
        td = fr.depth + rng.choice([-1, 1], fr.depth.shape) * 0.1
        td[fr.alpha == 0] = 0
        res = render_gradients(gmap, pose, 0.0, tc, td, (0.7, 0.3))

        def loss():
            f = render(gmap, pose, 0.0)
            e1 = np.abs(f.color - tc).sum() / (32 * 32 * 3)
            geo = (td > 0) & (f.alpha > 0)
            e2 = np.abs(f.depth[geo] - td[geo]).sum() / max(int((td > 0).sum()), 1)
            return 0.7 * e1 + 0.3 * e2

        for name in ("mu", "color", "opacity_logit", "log_scale"):
            arr = getattr(gmap, name)
            grad = getattr(res, name)
            flat = arr.reshape(len(gmap), -1)
            gflat = grad.reshape(len(gmap), -1)
            for _ in range(4):
                i = int(rng.integers(0, len(gmap)))
                j = int(rng.integers(0, flat.shape[1]))
                h = 1e-4 * max(1, abs(flat[i, j]))
                orig = flat[i, j]
                flat[i, j] = orig + h
                ep = loss()
                flat[i, j] = orig - h
                em = loss()
                flat[i, j] = orig
                fd = (ep - em) / (2 * h)
                if abs(gflat[i, j] - fd) > 1e-6 + 1e-3 * abs(fd):
                    return False
    return True


def check_metrics(rng):
    xyz = np.cumsum(rng.normal(size=(100, 3)), axis=0)
    from .se3 import so3_exp

    R = so3_exp(rng.normal(size=3))
    moved = xyz @ R.T + rng.normal(size=3)
    if ate_rmse(TrajectoryPair(est_xyz=moved, gt_xyz=xyz), align=True) > 1e-9:
        return False
    img = rng.uniform(0, 1, (24, 24, 3))
    if psnr(img, img) != 99.0:
        return False
    if abs(psnr(img, np.clip(img, 0, 1) * 0 + img + 0.1) - 20.0) > 1e-9:
        return False
    if abs(ssim(img, img) - 1.0) > 1e-12:
        return False
    return True


def check_serialization(rng):
    gmap = GaussianMap()
    for _ in range(7):
        gmap.add_gaussian(_random_gaussian(rng))
    back = GaussianMap.from_bytes(gmap.to_bytes())
    for name in ("mu", "log_scale", "q_left", "q_right", "opacity_logit", "color", "dynamics"):
        if not np.array_equal(getattr(gmap, name), getattr(back, name)):
            return False
    return True


def check_simulator_determinism(rng):
    a = generate(default_scene_spec(seed=3, frame_count=3))
    b = generate(default_scene_spec(seed=3, frame_count=3))
    return all(np.array_equal(x.rgb, y.rgb) and np.array_equal(x.depth, y.depth)
               for x, y in zip(a, b))


CHECKS = [
    ("conditioning vs 4x4-inverse oracle", check_conditioning),
    ("covariance spectrum preservation", check_spectrum),
    ("density factorization identity", check_factorization),
    ("compositing vs direct blending oracle", check_compositing),
    ("renderer gradients vs finite differences", check_gradients),
    ("metric sanity (ATE/PSNR/SSIM)", check_metrics),
    ("map serialization round trip", check_serialization),
    ("simulator determinism", check_simulator_determinism),
]


def run_all(verbose: bool = True) -> int:
    rng = np.random.default_rng(20240917)
    failures = 0
    for name, fn in CHECKS:
        ok = fn(rng)
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1
    if verbose:
        print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 4
