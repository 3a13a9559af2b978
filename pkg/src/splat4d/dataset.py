"""TUM/Bonn-format RGB-D sequence ingestion and on-disk interchange.

Layout: rgb.txt / depth.txt with `timestamp filename` lines (# comments),
optional groundtruth.txt with `timestamp tx ty tz qx qy qz qw`, RGB as 8-bit
PNG and depth as 16-bit PNG at depth_scale counts per meter (0 = invalid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .se3 import quat_to_rot, rot_to_quat

log = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 5000.0
DEFAULT_ASSOCIATION_TOLERANCE = 0.02


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def save_color_png(path, rgb):
    """Float [0,1] HxWx3 -> 8-bit PNG."""
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_color_png(path):
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise DataError(f"missing RGB file: {path}")
    return np.asarray(img.convert("RGB"), dtype=float) / 255.0


def save_depth_png(path, depth_m, depth_scale=DEFAULT_DEPTH_SCALE):
    """Metric depth -> 16-bit grayscale PNG; invalid (<= 0) stored as 0."""
    d = np.asarray(depth_m, dtype=float)
    counts = np.where(d > 0, np.clip(d * depth_scale + 0.5, 0, 65535), 0).astype(np.uint16)
    Image.fromarray(counts).save(path)


def load_depth_png(path, depth_scale=DEFAULT_DEPTH_SCALE):
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise DataError(f"missing depth file: {path}")
    counts = np.asarray(img)
    if counts.dtype != np.uint16 and counts.dtype != np.int32:
        raise DataError(f"depth PNG must be 16-bit, got {counts.dtype}: {path}")
    return counts.astype(float) / depth_scale


# ---------------------------------------------------------------------------
# list files and association
# ---------------------------------------------------------------------------


def read_list_file(path) -> list:
    """`timestamp filename` pairs; '#' comments allowed."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing list file: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected 'timestamp filename'")
        try:
            ts = float(parts[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad timestamp {parts[0]!r}")
        out.append((ts, parts[1]))
    out.sort(key=lambda e: e[0])
    times = [t for t, _ in out]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DataError(f"{path}: timestamps must be strictly increasing")
    return out


def associate_timestamps(times_a, times_b, tolerance):
    """Greedy nearest-timestamp matching; each entry used at most once.

    Returns index pairs (i, j) sorted by time of a.
    """
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    cands = []
    for i, ta in enumerate(times_a):
        lo = np.searchsorted(times_b, ta - tolerance)
        hi = np.searchsorted(times_b, ta + tolerance, side="right")
        for j in range(lo, hi):
            cands.append((abs(ta - times_b[j]), i, j))
    cands.sort()
    used_a = set()
    used_b = set()
    pairs = []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


@dataclass
class SequenceSource:
    rgb_list: list
    depth_list: list
    groundtruth: list | None = None
    depth_scale: float = DEFAULT_DEPTH_SCALE
    association_tolerance: float = DEFAULT_ASSOCIATION_TOLERANCE
    root: Path = field(default_factory=Path)

    @classmethod
    def from_tum_dir(cls, root, depth_scale=DEFAULT_DEPTH_SCALE,
                     association_tolerance=DEFAULT_ASSOCIATION_TOLERANCE) -> "SequenceSource":
        root = Path(root)
        rgb_list = read_list_file(root / "rgb.txt")
        depth_list = read_list_file(root / "depth.txt")
        gt = None
        gt_path = root / "groundtruth.txt"
        if gt_path.exists():
            gt = load_trajectory_file(gt_path)
        return cls(rgb_list=rgb_list, depth_list=depth_list, groundtruth=gt,
                   depth_scale=depth_scale, association_tolerance=association_tolerance,
                   root=root)


@dataclass
class MatchedFrame:
    timestamp: float
    rgb_path: Path
    depth_path: Path


def associate(source: SequenceSource):
    """Match rgb to depth entries; unmatched entries are dropped (with a log
    line carrying the counts). Zero matches is an error."""
    if not source.rgb_list or not source.depth_list:
        raise DataError("empty rgb/depth list")
    pairs = associate_timestamps(
        [t for t, _ in source.rgb_list], [t for t, _ in source.depth_list],
        source.association_tolerance,
    )
    if not pairs:
        raise DataError(
            f"no rgb/depth pairs within {source.association_tolerance}s; "
            "check timestamps or association tolerance"
        )
    dropped = len(source.rgb_list) - len(pairs) + len(source.depth_list) - len(pairs)
    if dropped:
        log.warning("association dropped %d unmatched entries", dropped)
    frames = []
    for i, j in pairs:
        ts = source.rgb_list[i][0]
        frames.append(MatchedFrame(
            timestamp=ts,
            rgb_path=source.root / source.rgb_list[i][1],
            depth_path=source.root / source.depth_list[j][1],
        ))
    return frames


def load_frame(frame: MatchedFrame, depth_scale=DEFAULT_DEPTH_SCALE):
    rgb = load_color_png(frame.rgb_path)
    depth = load_depth_png(frame.depth_path, depth_scale)
    if rgb.shape[:2] != depth.shape:
        raise DataError(f"rgb/depth resolution mismatch at t={frame.timestamp}")
    return rgb, depth


# ---------------------------------------------------------------------------
# trajectories (TUM format: timestamp tx ty tz qx qy qz qw, camera-to-world)
# ---------------------------------------------------------------------------


def load_trajectory_file(path):
    """Returns a list of (timestamp, position(3,), quat wxyz(4,)) tuples."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing trajectory file: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 fields")
        vals = [float(v) for v in parts]
        t = vals[0]
        pos = np.array(vals[1:4])
        qx, qy, qz, qw = vals[4:8]
        out.append((t, pos, np.array([qw, qx, qy, qz])))
    out.sort(key=lambda e: e[0])
    return out


def save_trajectory_file(path, entries):
    """entries: iterable of (timestamp, CameraPose world-to-camera). Written
    camera-to-world per TUM convention."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in entries:
            R_wc = pose.R.T
            c = pose.camera_center()
            w, x, y, z = rot_to_quat(R_wc)
            f.write(
                f"{ts:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n"
            )


def trajectory_entry_to_pose(pos, quat_wxyz, intrinsics):
    """TUM camera-to-world entry -> world-to-camera CameraPose."""
    from .camera import CameraPose

    R_wc = quat_to_rot(quat_wxyz)
    R_cw = R_wc.T
    t_cw = -R_cw @ np.asarray(pos, dtype=float)
    return CameraPose(R_cw, t_cw, intrinsics)
