"""End-to-end SLAM loop over an RGB-D sequence.

Per frame: anchor maintenance, provider query over a sliding window, track
filtering, pose estimation against the frozen map, then the keyframe
decision; keyframe events insert splats, maintain the window, prune, and
jointly optimize the map and window poses. Modes: `full` (everything on),
`nofilter` (visibility-only track gate, mapping dynamics-unaware), and
`static3d` (time ignored in rendering, temporal parameters frozen).
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPose, Intrinsics
from .config import RunConfig, dump_config
from .dataset import save_color_png, save_depth_png, save_trajectory_file
from .errors import CheckpointFormatError, TrackingDegenerateError
from .gaussians import MAP_MAGIC, GaussianMap
from .info import provider_query
from .keyframing import Keyframe, maintain_window, should_insert_keyframe
from .mapping import (
    MappingConfig,
    insert_gaussians,
    optimize_window,
    prune_gaussians,
    refresh_visible_sets,
)
from .renderer import render
from .se3 import rot_to_quat, quat_to_rot
from .tracking import (
    FilterThresholds,
    PoseOptConfig,
    constant_velocity_extrapolation,
    estimate_pose,
    filter_tracks,
    replenish_anchors,
)

CHECKPOINT_MAGIC = b"S4DC"
CHECKPOINT_VERSION = 1
HISTORY_CAP = 64
MODES = ("full", "static3d", "nofilter")


@dataclass
class FrameObservation:
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray


@dataclass
class RunManifest:
    config_text: str
    input_path: str
    seed: int
    mode: str
    threads: int
    frames: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    map_size: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def save_checkpoint(path, gmap: GaussianMap, keyframes, cfg_hash: str, mode: str):
    """Map blob + keyframe poses + config hash, single binary file."""
    blob = gmap.to_bytes()
    kf_entries = []
    for kf in keyframes:
        q = rot_to_quat(kf.pose.R.T)
        c = kf.pose.camera_center()
        intr = kf.pose.intrinsics
        kf_entries.append((kf.frame_index, kf.timestamp, *c, *q,
                           intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        h = cfg_hash.encode()
        f.write(struct.pack("<I", len(h)) + h)
        m = mode.encode()
        f.write(struct.pack("<I", len(m)) + m)
        f.write(struct.pack("<Q", len(kf_entries)))
        for e in kf_entries:
            f.write(struct.pack("<qd3d4d4dqq", int(e[0]), e[1], *e[2:5], *e[5:9],
                                *e[9:13], int(e[13]), int(e[14])))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


@dataclass
class CheckpointData:
    gmap: GaussianMap
    keyframe_poses: list  # (frame_index, timestamp, CameraPose)
    config_hash: str
    mode: str


def load_checkpoint(path) -> CheckpointData:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path}")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg_hash = data[off:off + n].decode()
    off += n
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    mode = data[off:off + n].decode()
    off += n
    (n_kf,) = struct.unpack_from("<Q", data, off)
    off += 8
    poses = []
    rec = struct.Struct("<qd3d4d4dqq")
    for _ in range(n_kf):
        vals = rec.unpack_from(data, off)
        off += rec.size
        idx, ts = int(vals[0]), vals[1]
        c = np.array(vals[2:5])
        q = np.array(vals[5:9])
        fx, fy, cx, cy = vals[9:13]
        w, h = int(vals[13]), int(vals[14])
        intr = Intrinsics(fx, fy, cx, cy, w, h)
        R_cw = quat_to_rot(q).T
        poses.append((idx, ts, CameraPose(R_cw, -R_cw @ c, intr)))
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    if data[off:off + 4] != MAP_MAGIC:
        raise CheckpointFormatError(f"bad map magic inside checkpoint {path}")
    gmap = GaussianMap.from_bytes(data[off:off + blob_len])
    return CheckpointData(gmap=gmap, keyframe_poses=poses, config_hash=cfg_hash, mode=mode)


class SlamSystem:
    """Owns the map, the anchor population, and the keyframe window."""

    def __init__(self, cfg: RunConfig, intrinsics: Intrinsics, provider, *,
                 mode: str = "full", seed: int = 0, threads: int = 1,
                 sequence_duration: float = 10.0, log_fn=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.cfg = cfg
        self.intrinsics = intrinsics
        self.provider = provider
        self.mode = mode
        self.seed = seed
        self.threads = threads
        self.static3d = mode == "static3d"
        self.rng = np.random.default_rng(seed)
        self.log_fn = log_fn or (lambda msg: None)

        self.gmap = GaussianMap()
        self.anchors = {}
        self.histories = {}
        self.last_positions = {}
        self.next_anchor_id = 0
        self.window: list[Keyframe] = []
        self.all_keyframes: list[Keyframe] = []
        self.poses = []  # (timestamp, CameraPose) per frame
        self.recent_frames = deque(maxlen=cfg.provider.window_length)
        self.thresholds = FilterThresholds(
            gamma_v=cfg.tracking.gamma_v, gamma_d=cfg.tracking.gamma_d,
            gamma_u=cfg.tracking.gamma_u, gamma_track=cfg.tracking.gamma_track,
        )
        self.mapping_cfg = MappingConfig(
            lambda_iso_dynamic=cfg.mapping.lambda_iso_dynamic,
            lambda_iso_static=cfg.mapping.lambda_iso_static,
            dynamic_gaussian_threshold=cfg.mapping.dynamic_gaussian_threshold,
            iterations_per_keyframe=cfg.mapping.iterations_per_keyframe,
            prune_opacity=cfg.mapping.prune_opacity,
            prune_observation_min=cfg.mapping.prune_observation_min,
            sigma_t_static_init=max(sequence_duration, 1e-3),
            sigma_t_dynamic_init=cfg.mapping.sigma_t_dynamic_init,
            insertion_stride=cfg.mapping.insertion_stride,
            depth_noise_scale=cfg.mapping.depth_noise_scale,
            lambda_pho=cfg.tracking.lambda_pho,
        )
        self.pose_cfg = PoseOptConfig(max_iterations=cfg.tracking.max_iterations)
        self.grid = cfg.anchor_grid(intrinsics.width)
        self.events = []

    # -- anchor bookkeeping -------------------------------------------------

    def _visible_positions(self, frame_index):
        out = []
        for aid, recs in self.histories.items():
            last = recs[-1]
            if last.visibility >= self.thresholds.gamma_v:
                out.append(self.last_positions.get(aid, self.anchors[aid].query_pos))
        return out

    def _maintain_anchors(self, obs: FrameObservation):
        active = self._visible_positions(obs.index) if self.anchors else []
        fresh = replenish_anchors(active, obs.rgb, self.cfg.tracking.min_anchor_count,
                                  self.grid, self.cfg.anchors.pool,
                                  birth_frame=obs.index, start_id=self.next_anchor_id)
        for a in fresh:
            self.anchors[a.id] = a
            self.histories[a.id] = []
        if fresh:
            self.next_anchor_id = fresh[-1].id + 1
        # retire anchors invisible for a full provider window
        horizon = self.cfg.provider.window_length
        dead = []
        for aid, recs in self.histories.items():
            recent = [r for r in recs[-horizon:] if r.visibility >= self.thresholds.gamma_v]
            if recs and len(recs) >= horizon and not recent:
                dead.append(aid)
        for aid in dead:
            del self.anchors[aid]
            del self.histories[aid]
            self.last_positions.pop(aid, None)

    def _query_provider(self, obs: FrameObservation):
        window = [(f.index, f.rgb) for f in self.recent_frames]
        anchors = [self.anchors[aid] for aid in sorted(self.anchors)]
        if not anchors:
            return
        records = provider_query(self.provider, window, anchors)
        for rec in records[obs.index]:
            hist = self.histories[rec.anchor_id]
            hist.append(rec)
            if len(hist) > HISTORY_CAP:
                del hist[0]
            self.last_positions[rec.anchor_id] = rec.pos

    def _inliers(self, frame_index):
        if self.mode == "nofilter":
            ids = set()
            for aid, recs in self.histories.items():
                cur = next((r for r in recs if r.frame == frame_index), None)
                if cur is not None and cur.visibility >= self.thresholds.gamma_v:
                    ids.add(aid)
            return ids
        ids = filter_tracks(self.histories, frame_index, self.thresholds)
        # anchors younger than gamma_track frames cannot have enough
        # observations yet; admit those visible and static every frame since
        # birth so tracking is not blind right after (re)initialization
        th = self.thresholds
        for aid, recs in self.histories.items():
            if aid in ids or len(recs) >= th.gamma_track:
                continue
            cur = next((r for r in recs if r.frame == frame_index), None)
            if cur is None or cur.dynamics >= th.gamma_d:
                continue
            if recs and all(r.visibility >= th.gamma_v for r in recs):
                ids.add(aid)
        return ids

    def _dynamic_mask(self, frame_index):
        mask = np.zeros((self.intrinsics.height, self.intrinsics.width), dtype=bool)
        if self.mode == "nofilter":
            return mask
        radius = self.cfg.mapping.dynamic_mask_radius
        h, w = mask.shape
        for aid, recs in self.histories.items():
            cur = next((r for r in recs if r.frame == frame_index), None)
            if cur is None or cur.visibility < self.thresholds.gamma_v:
                continue
            if cur.dynamics >= self.thresholds.gamma_d:
                u = int(round(cur.pos[0]))
                v = int(round(cur.pos[1]))
                mask[max(0, v - radius):v + radius + 1, max(0, u - radius):u + radius + 1] = True
        return mask

    # -- per-frame processing -----------------------------------------------

    def _initial_pose(self):
        if len(self.poses) >= 2:
            return constant_velocity_extrapolation(self.poses[-1][1], self.poses[-2][1])
        if self.poses:
            return self.poses[-1][1].copy()
        return CameraPose.identity(self.intrinsics)

    def process_frame(self, obs: FrameObservation):
        t0 = time.perf_counter()
        self.recent_frames.append(obs)
        self._maintain_anchors(obs)
        self._query_provider(obs)
        inliers = self._inliers(obs.index)

        init = self._initial_pose()
        energy = 0.0
        iterations = 0
        if len(self.gmap) and inliers:
            positions = [self.last_positions[aid] for aid in sorted(inliers)]
            try:
                result = estimate_pose(
                    self.gmap, obs.rgb, obs.depth, obs.timestamp, init, positions,
                    sorted(inliers), self.cfg.tracking.lambda_pho, self.pose_cfg,
                    patch_radius=self.cfg.tracking.patch_radius,
                    time_invariant=self.static3d, threads=self.threads,
                )
                pose = result.pose
                energy = result.final_energy
                iterations = result.iterations
            except TrackingDegenerateError:
                self.log_fn(f"frame {obs.index}: tracking degenerate, using motion prediction")
                pose = init
        else:
            pose = init
        self.poses.append((obs.timestamp, pose))
        track_ms = (time.perf_counter() - t0) * 1e3

        t1 = time.perf_counter()
        is_keyframe = self._keyframe_step(obs, pose)
        map_ms = (time.perf_counter() - t1) * 1e3

        self.events.append({
            "index": obs.index, "timestamp": obs.timestamp,
            "inliers": len(inliers), "energy": energy, "iterations": iterations,
            "track_ms": round(track_ms, 2), "map_ms": round(map_ms, 2),
            "keyframe": bool(is_keyframe), "map_size": len(self.gmap),
        })
        return pose, is_keyframe

    def _keyframe_step(self, obs: FrameObservation, pose: CameraPose) -> bool:
        shown = render(self.gmap, pose, obs.timestamp, time_invariant=self.static3d,
                       threads=self.threads)
        candidate = Keyframe(
            frame_index=obs.index, timestamp=obs.timestamp, rgb=obs.rgb, depth=obs.depth,
            pose=pose.copy(), visible_set=shown.per_gaussian_visibility,
            dynamic_mask=self._dynamic_mask(obs.index),
        )
        if self.window and not should_insert_keyframe(
                candidate, self.window[-1], self.cfg.keyframing.tau_cov,
                self.cfg.keyframing.tau_trans):
            return False

        inserted = insert_gaussians(self.gmap, candidate, shown, self.mapping_cfg)
        self.window, evicted = maintain_window(
            self.window, candidate, self.cfg.keyframing.max_size,
            self.cfg.keyframing.tau_overlap)
        removed = prune_gaussians(self.gmap, self.window, self.mapping_cfg)
        iterations = self.mapping_cfg.bootstrap_iterations if not self.all_keyframes else None
        stats = optimize_window(self.gmap, self.window, self.all_keyframes,
                                self.mapping_cfg, self.rng, static3d=self.static3d,
                                threads=self.threads, iterations=iterations)
        refresh_visible_sets(self.gmap, self.window, static3d=self.static3d,
                             threads=self.threads)
        seen = np.fromiter(candidate.visible_set, dtype=int, count=len(candidate.visible_set))
        if seen.size:
            self.gmap.observations[seen] += 1
        self.all_keyframes.append(candidate)
        self.log_fn(
            f"keyframe {candidate.frame_index} t={candidate.timestamp:.3f} "
            f"pose={np.round(candidate.pose.camera_center(), 4).tolist()} "
            f"window={[k.frame_index for k in self.window]} "
            f"inserted={inserted} pruned={removed} "
            f"opt_energy={stats.energies[-1] if stats.energies else 0.0:.4f}"
        )
        return True


def run_sequence(cfg: RunConfig, intrinsics: Intrinsics, frames, provider, out_dir, *,
                 mode="full", seed=0, threads=1, preview_every=10,
                 input_path="", checkpoint_every=None) -> RunManifest:
    """Drive the full pipeline over FrameObservation items.

    Writes trajectory.txt (TUM), checkpoints, preview renders, final-map
    renders of every frame, run.log, the effective config, and an atomically
    written manifest.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "previews").mkdir(exist_ok=True)
    (out / "renders").mkdir(exist_ok=True)
    log_lines = []

    frames = list(frames)
    if not frames:
        raise TrackingDegenerateError("empty sequence")
    duration = max(frames[-1].timestamp - frames[0].timestamp, 1e-3)
    if checkpoint_every is None:
        checkpoint_every = cfg.mapping.checkpoint_every

    start = time.perf_counter()
    manifest = RunManifest(config_text=dump_config(cfg), input_path=str(input_path),
                           seed=seed, mode=mode, threads=threads)
    (out / "effective_config.cfg").write_text(manifest.config_text)
    cfg_hash = config_hash(cfg)

    system = SlamSystem(cfg, intrinsics, provider, mode=mode, seed=seed, threads=threads,
                        sequence_duration=duration, log_fn=log_lines.append)

    n_keyframes = 0
    for obs in frames:
        pose, is_kf = system.process_frame(obs)
        if is_kf:
            n_keyframes += 1
            if n_keyframes % checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"ckpt_{n_keyframes:04d}.s4dc",
                                system.gmap, system.all_keyframes, cfg_hash, mode)
        if preview_every and obs.index % preview_every == 0:
            fr = render(system.gmap, pose, obs.timestamp, time_invariant=system.static3d,
                        threads=threads)
            save_color_png(out / "previews" / f"{obs.timestamp:.6f}.png", fr.color)

    # final artifacts: trajectory, final checkpoint, full re-render of the map
    save_trajectory_file(out / "trajectory.txt", system.poses)
    save_checkpoint(out / "checkpoints" / "ckpt_final.s4dc",
                    system.gmap, system.all_keyframes, cfg_hash, mode)
    psnr_per_frame = []
    for obs, (_, pose) in zip(frames, system.poses):
        fr = render(system.gmap, pose, obs.timestamp, time_invariant=system.static3d,
                    threads=threads)
        save_color_png(out / "renders" / f"{obs.timestamp:.6f}.png", fr.color)
        save_depth_png(out / "renders" / f"{obs.timestamp:.6f}_depth.png", fr.depth,
                       cfg.dataset.depth_scale)
        mse = float(np.mean((fr.color - obs.rgb) ** 2))
        psnr_per_frame.append(99.0 if mse == 0 else float(min(10 * np.log10(1 / mse), 99.0)))

    manifest.frames = system.events
    manifest.keyframes = [
        {"index": kf.frame_index, "timestamp": kf.timestamp,
         "center": kf.pose.camera_center().tolist()}
        for kf in system.all_keyframes
    ]
    manifest.map_size = len(system.gmap)
    manifest.runtime_s = round(time.perf_counter() - start, 3)
    manifest.metrics = {
        "train_psnr_mean": float(np.mean(psnr_per_frame)),
        "train_psnr_per_frame": [round(p, 4) for p in psnr_per_frame],
        "n_keyframes": n_keyframes,
    }
    (out / "run.log").write_text("\n".join(log_lines) + "\n")
    tmp = out / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    tmp.replace(out / "manifest.json")
    return manifest
