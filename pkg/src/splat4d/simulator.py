"""Synthetic dynamic RGB-D sequences with exact ray-cast ground truth.

Deliberately shares no code with the splat renderer: frames come from exact
ray-primitive intersection (finite axis-aligned planes, boxes, spheres) with
flat lighting and procedural checker textures, so the simulator can serve as
an independent oracle for tracking and mapping. Everything is a deterministic
function of (spec, seed).

World frame: y up, meters. Camera frame: z forward, y down (image rows).
Depth images store camera-frame z; the dynamic mask marks pixels whose first
hit is a moving object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPose, Intrinsics
from .errors import SceneSpecError

_HASH_A = 73856093
_HASH_B = 19349663
_HASH_C = 83492791


def _cell_hash(ix, iy, iz, seed, salt):
    h = (ix * _HASH_A) ^ (iy * _HASH_B) ^ (iz * _HASH_C) ^ ((seed + salt) * 2654435761)
    return ((h & 0x7FFFFFFF) % 4096) / 4096.0


def _checker_color(local, cell, color_a, color_b, jitter, seed):
    """Aperiodic cell mosaic: every cell draws its own color, blended between
    the two base colors with per-channel variation, so patches are locally
    unique (a plain periodic checker makes photometric tracking snap to the
    wrong cell); local (N,3)."""
    idx = np.floor(local / cell).astype(np.int64)
    mix = _cell_hash(idx[:, 0], idx[:, 1], idx[:, 2], seed, 0)
    base = color_a[None, :] * mix[:, None] + color_b[None, :] * (1.0 - mix[:, None])
    out = np.empty_like(base)
    for c in range(3):
        var = _cell_hash(idx[:, 0], idx[:, 1], idx[:, 2], seed, 7 + c) - 0.5
        out[:, c] = base[:, c] * (1.0 + jitter * var)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# trajectories (translation-only rigid motion of dynamic objects)
# ---------------------------------------------------------------------------


@dataclass
class PiecewiseLinearPath:
    times: np.ndarray  # (K,) strictly increasing
    points: np.ndarray  # (K,3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)

    def position(self, t):
        t = np.clip(t, self.times[0], self.times[-1])
        out = np.empty(3)
        for a in range(3):
            out[a] = np.interp(t, self.times, self.points[:, a])
        return out


@dataclass
class SinusoidalPath:
    center: np.ndarray
    amplitude: np.ndarray  # (3,) meters
    frequency: float  # Hz
    phase: float = 0.0

    def position(self, t):
        return np.asarray(self.center, dtype=float) + np.asarray(
            self.amplitude, dtype=float
        ) * np.sin(2 * np.pi * self.frequency * t + self.phase)


@dataclass
class StaticPath:
    point: np.ndarray

    def position(self, t):
        return np.asarray(self.point, dtype=float)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@dataclass
class PlanePrim:
    """Finite axis-aligned rectangle: coordinate `offset` along normal `axis`."""

    axis: int
    offset: float
    lo: np.ndarray  # (2,) bounds in the remaining axes, in ascending axis order
    hi: np.ndarray
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.73, 0.70]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.38, 0.42]))
    cell: float = 0.25
    jitter: float = 0.4

    def intersect(self, o, dirs):
        denom = dirs[:, self.axis]
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = (self.offset - o[self.axis]) / safe
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        p = o[None, :] + t[:, None] * dirs
        rest = [a for a in range(3) if a != self.axis]
        ok = (
            (t > 0)
            & (p[:, rest[0]] >= self.lo[0]) & (p[:, rest[0]] <= self.hi[0])
            & (p[:, rest[1]] >= self.lo[1]) & (p[:, rest[1]] <= self.hi[1])
        )
        return np.where(ok, t, np.inf)

    def shade(self, points, seed):
        return _checker_color(points, self.cell, self.color_a, self.color_b, self.jitter, seed)

    def contains(self, p):
        return False  # infinitely thin


@dataclass
class BoxPrim:
    size: np.ndarray  # full extents (3,)
    path: object = None  # trajectory; None = static at origin
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.30, 0.20]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.95, 0.75, 0.25]))
    cell: float = 0.12
    jitter: float = 0.35

    def center(self, t):
        return self.path.position(t) if self.path is not None else np.zeros(3)

    def intersect_at(self, o, dirs, center):
        h = np.asarray(self.size, dtype=float) / 2.0
        safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
        t1 = (center - h - o)[None, :] / safe
        t2 = (center + h - o)[None, :] / safe
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        ok = (tmax >= tmin) & (tmin > 0)
        return np.where(ok, tmin, np.inf)

    def shade(self, points, center, seed):
        return _checker_color(points - center[None, :], self.cell, self.color_a,
                              self.color_b, self.jitter, seed)

    def contains(self, p, center):
        h = np.asarray(self.size, dtype=float) / 2.0
        return bool(np.all(np.abs(p - center) <= h))


@dataclass
class SpherePrim:
    radius: float
    path: object = None
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.55, 0.85]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.90, 0.95]))
    cell: float = 0.1
    jitter: float = 0.35

    def center(self, t):
        return self.path.position(t) if self.path is not None else np.zeros(3)

    def intersect_at(self, o, dirs, center):
        oc = o - center
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = (-b - sq) / (2 * a)
        ok &= t > 0
        return np.where(ok, t, np.inf)

    def shade(self, points, center, seed):
        return _checker_color(points - center[None, :], self.cell, self.color_a,
                              self.color_b, self.jitter, seed)

    def contains(self, p, center):
        return bool(np.linalg.norm(p - center) <= self.radius)


# ---------------------------------------------------------------------------
# scene specification
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    depth_sigma: float = 0.0  # multiplicative, fraction of depth
    track_sigma: float = 0.0  # pixels, applied by the oracle track provider
    label_flip: float = 0.0  # dynamics label flip probability


@dataclass
class OrbitCameraPath:
    """Camera on a horizontal arc, always looking at a fixed target."""

    target: np.ndarray
    radius: float
    height: float
    angle_start: float  # radians
    angle_end: float
    duration: float

    def pose_matrix(self, t):
        s = np.clip(t / self.duration, 0.0, 1.0)
        ang = self.angle_start + (self.angle_end - self.angle_start) * s
        eye = np.array(
            [
                self.target[0] + self.radius * np.sin(ang),
                self.height,
                self.target[2] - self.radius * np.cos(ang),
            ]
        )
        return look_at(eye, np.asarray(self.target, dtype=float))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera (R, t) for a camera at `eye` looking at `target`,
    image rows pointing down."""
    f = target - eye
    n_f = np.linalg.norm(f)
    if n_f < 1e-9:
        raise SceneSpecError("camera eye coincides with its look-at target")
    f = f / n_f
    up = np.asarray(up, dtype=float)
    x = np.cross(f, up)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise SceneSpecError("camera forward parallel to up vector")
    x = x / n
    y = np.cross(f, x)
    R_wc = np.stack([x, y, f], axis=1)
    R_cw = R_wc.T
    return R_cw, -R_cw @ eye


@dataclass
class SceneSpec:
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    frame_count: int = 100
    frame_rate: float = 10.0
    seed: int = 7
    planes: list = field(default_factory=list)
    objects: list = field(default_factory=list)  # BoxPrim / SpherePrim with paths
    camera: OrbitCameraPath | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def cx(self):
        return (self.width - 1) / 2.0

    @property
    def cy(self):
        return (self.height - 1) / 2.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def duration(self):
        return self.frame_count / self.frame_rate

    def validate(self):
        if self.width < 32 or self.height < 32:
            raise SceneSpecError("resolution must be at least 32x32")
        if self.frame_count < 1:
            raise SceneSpecError("frame_count must be positive")
        if self.frame_rate <= 0:
            raise SceneSpecError("frame_rate must be positive")
        if self.camera is None:
            raise SceneSpecError("camera path required")
        if not self.planes:
            raise SceneSpecError("static geometry required")


@dataclass
class SimFrame:
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray  # observed (noisy) depth, 0 = invalid
    depth_true: np.ndarray
    pose: CameraPose  # ground-truth world-to-camera
    dynamic_mask: np.ndarray
    object_id: np.ndarray  # int16: 0.. static planes, then dynamic objects
    object_centers: np.ndarray  # (n_objects, 3) world translations at this time


def default_scene_spec(seed: int = 7, frame_count: int = 100, width: int = 160,
                       height: int = 120, dynamic: bool = True,
                       noise: NoiseSpec | None = None) -> SceneSpec:
    """Desk-scale default: a three-walled textured room with a floor, one
    moving box crossing the view mid-sequence, camera orbiting slowly."""
    planes = [
        PlanePrim(axis=1, offset=0.0, lo=np.array([-2.4, -0.4]), hi=np.array([2.4, 4.4])),  # floor
        PlanePrim(axis=2, offset=4.4, lo=np.array([-2.4, 0.0]), hi=np.array([2.4, 2.6]),
                  color_a=np.array([0.82, 0.78, 0.72]), color_b=np.array([0.30, 0.34, 0.40]),
                  cell=0.3),  # back wall
        PlanePrim(axis=0, offset=-2.4, lo=np.array([0.0, -0.4]), hi=np.array([2.6, 4.4]),
                  color_a=np.array([0.76, 0.70, 0.62]), color_b=np.array([0.42, 0.36, 0.30]),
                  cell=0.28),  # left wall
        PlanePrim(axis=0, offset=2.4, lo=np.array([0.0, -0.4]), hi=np.array([2.6, 4.4]),
                  color_a=np.array([0.70, 0.74, 0.66]), color_b=np.array([0.36, 0.42, 0.34]),
                  cell=0.28),  # right wall
        PlanePrim(axis=1, offset=2.6, lo=np.array([-2.4, -0.4]), hi=np.array([2.4, 4.4]),
                  color_a=np.array([0.85, 0.85, 0.85]), color_b=np.array([0.55, 0.55, 0.60]),
                  cell=0.5),  # ceiling
    ]
    objects = []
    if dynamic:
        duration = frame_count / 10.0
        t0, t1 = 0.3 * duration, 0.7 * duration
        objects.append(
            BoxPrim(
                size=np.array([0.8, 0.8, 0.5]),
                path=PiecewiseLinearPath(
                    times=np.array([0.0, t0, t1, duration]),
                    points=np.array(
                        [[-1.1, 0.9, 2.6], [-1.1, 0.9, 2.6], [1.1, 0.9, 2.6], [1.1, 0.9, 2.6]]
                    ),
                ),
            )
        )
    duration = frame_count / 10.0
    half_arc = 0.035 * duration  # constant angular speed regardless of length
    camera = OrbitCameraPath(
        target=np.array([0.0, 1.0, 2.8]),
        radius=2.6,
        height=1.3,
        angle_start=-half_arc,
        angle_end=half_arc,
        duration=duration,
    )
    return SceneSpec(
        width=width, height=height, fx=0.75 * width, fy=0.75 * width,
        frame_count=frame_count, frame_rate=10.0, seed=seed,
        planes=planes, objects=objects, camera=camera,
        noise=noise if noise is not None else NoiseSpec(),
    )


def generate(spec: SceneSpec) -> list:
    """Render the full sequence; deterministic for a fixed spec and seed."""
    spec.validate()
    intr = spec.intrinsics()
    W, H = spec.width, spec.height
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    dirs_cam = np.stack(
        [(uu - spec.cx) / spec.fx, (vv - spec.cy) / spec.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)

    n_static = len(spec.planes)
    frames = []
    for i in range(spec.frame_count):
        t = i / spec.frame_rate
        R_cw, t_cw = spec.camera.pose_matrix(t)
        pose = CameraPose(R_cw, t_cw, intr)
        eye = pose.camera_center()

        centers = np.array([obj.center(t) for obj in spec.objects]).reshape(-1, 3)
        for k, obj in enumerate(spec.objects):
            if obj.contains(eye, centers[k]):
                raise SceneSpecError(f"camera inside dynamic object {k} at frame {i}")

        dirs = dirs_cam @ R_cw  # R_wc @ d per row
        best_t = np.full(dirs.shape[0], np.inf)
        best_id = np.full(dirs.shape[0], -1, dtype=np.int16)
        for pid, plane in enumerate(spec.planes):
            tt = plane.intersect(eye, dirs)
            closer = tt < best_t
            best_t[closer] = tt[closer]
            best_id[closer] = pid
        for k, obj in enumerate(spec.objects):
            tt = obj.intersect_at(eye, dirs, centers[k])
            closer = tt < best_t
            best_t[closer] = tt[closer]
            best_id[closer] = n_static + k

        if not np.all(np.isfinite(best_t)):
            raise SceneSpecError(f"ray escaped the scene at frame {i}; close the room geometry")

        points = eye[None, :] + best_t[:, None] * dirs
        rgb = np.zeros((dirs.shape[0], 3))
        for pid, plane in enumerate(spec.planes):
            m = best_id == pid
            if m.any():
                rgb[m] = plane.shade(points[m], spec.seed + pid)
        for k, obj in enumerate(spec.objects):
            m = best_id == n_static + k
            if m.any():
                rgb[m] = obj.shade(points[m], centers[k], spec.seed + n_static + k)

        depth_true = best_t.reshape(H, W)
        rng = np.random.default_rng((spec.seed, 1009, i))
        if spec.noise.depth_sigma > 0:
            depth = depth_true * (1.0 + spec.noise.depth_sigma * rng.standard_normal(depth_true.shape))
            depth = np.maximum(depth, 1e-4)
        else:
            depth = depth_true.copy()

        frames.append(
            SimFrame(
                index=i,
                timestamp=t,
                rgb=rgb.reshape(H, W, 3),
                depth=depth,
                depth_true=depth_true,
                pose=pose,
                dynamic_mask=(best_id >= n_static).reshape(H, W),
                object_id=best_id.reshape(H, W),
                object_centers=centers,
            )
        )
    return frames


def write_tum_sequence(frames, out_dir, depth_scale=5000.0):
    """Emit a generated sequence in TUM on-disk layout."""
    from .dataset import save_color_png, save_depth_png, save_trajectory_file

    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = []
    depth_lines = []
    for fr in frames:
        name = f"{fr.timestamp:.6f}.png"
        save_color_png(out / "rgb" / name, fr.rgb)
        save_depth_png(out / "depth" / name, fr.depth, depth_scale)
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}")
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    save_trajectory_file(out / "groundtruth.txt", [(fr.timestamp, fr.pose) for fr in frames])
