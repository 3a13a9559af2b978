"""Dynamics-information providers.

An anchor is a query point born at an image-gradient maximum; a provider
answers, for a window of frames, where each anchor is (2D track position)
plus per-record visibility, a dynamics score and a reliability score, all in
a provider-agnostic record format. Two providers ship here: a synthetic
oracle backed by simulator ground truth, and a file importer for externally
computed tracks (the export and import format are the same, so dumps round
trip). Higher reliability is always better.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, sobel

from .errors import ProviderError

RELIABILITY_CEILING = 1.0
OCCLUSION_BORDER_PX = 3.0
DYNAMIC_DISPLACEMENT_M = 0.01
DEPTH_TEST_RELATIVE = 0.01

TRACK_FILE_COLUMNS = "anchor_id frame u v visibility dynamics reliability"


@dataclass
class Anchor:
    id: int
    birth_frame: int
    query_pos: np.ndarray  # (u, v) pixels

    def __post_init__(self):
        self.query_pos = np.asarray(self.query_pos, dtype=float).reshape(2)


@dataclass
class TrackRecord:
    anchor_id: int
    frame: int
    pos: np.ndarray  # (u, v)
    visibility: float
    dynamics: float
    reliability: float

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(2)


# ---------------------------------------------------------------------------
# anchor selection from image gradients
# ---------------------------------------------------------------------------


def gradient_map(rgb):
    """Per-channel Sobel magnitude reduced by channel-wise max."""
    rgb = np.asarray(rgb, dtype=float)
    mags = []
    for c in range(rgb.shape[2]):
        gx = sobel(rgb[:, :, c], axis=1, mode="reflect")
        gy = sobel(rgb[:, :, c], axis=0, mode="reflect")
        mags.append(np.sqrt(gx * gx + gy * gy))
    return np.max(mags, axis=0)


def average_pool(img, kernel):
    """Non-overlapping mean pooling; trailing remainder rows/cols dropped."""
    h, w = img.shape
    hh, ww = h // kernel, w // kernel
    return img[: hh * kernel, : ww * kernel].reshape(hh, kernel, ww, kernel).mean(axis=(1, 3))


def _splits(n, parts):
    """Contiguous partition boundaries, like np.array_split."""
    base, extra = divmod(n, parts)
    sizes = [base + (1 if i < extra else 0) for i in range(parts)]
    bounds = np.cumsum([0] + sizes)
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


def select_anchors(rgb, grid=(12, 12), pool=4, birth_frame=0, start_id=0):
    """One anchor per grid subregion at the pooled-gradient argmax.

    The pooled-cell winner maps back to the full-resolution coordinates of
    the cell center; ties break toward the smallest row-major index, so a
    constant image still yields a deterministic full grid of anchors.
    """
    rows, cols = grid
    pooled = average_pool(gradient_map(rgb), pool)
    ph, pw = pooled.shape
    if ph < rows or pw < cols:
        raise ProviderError(f"grid {rows}x{cols} too fine for pooled map {ph}x{pw}")
    anchors = []
    aid = start_id
    for r0, r1 in _splits(ph, rows):
        for c0, c1 in _splits(pw, cols):
            sub = pooled[r0:r1, c0:c1]
            flat = int(np.argmax(sub))
            rr, cc = divmod(flat, sub.shape[1])
            pr, pc = r0 + rr, c0 + cc
            u = pc * pool + (pool - 1) / 2.0
            v = pr * pool + (pool - 1) / 2.0
            anchors.append(Anchor(id=aid, birth_frame=birth_frame, query_pos=(u, v)))
            aid += 1
    return anchors


def anchor_subregion(query_pos, image_shape, grid, pool):
    """Subregion (row, col) of the selection grid containing a pixel position."""
    rows, cols = grid
    ph = image_shape[0] // pool
    pw = image_shape[1] // pool
    pr = min(int(query_pos[1] // pool), ph - 1)
    pc = min(int(query_pos[0] // pool), pw - 1)
    row_splits = _splits(ph, rows)
    col_splits = _splits(pw, cols)
    r = next(i for i, (a, b) in enumerate(row_splits) if a <= pr < b)
    c = next(i for i, (a, b) in enumerate(col_splits) if a <= pc < b)
    return r, c


# ---------------------------------------------------------------------------
# the provider contract
# ---------------------------------------------------------------------------


def provider_query(provider, window, anchors):
    """Query a provider for every (anchor, frame) pair of the window.

    `window` is a list of (frame_index, rgb) pairs. Returns {frame: [records]}
    with one record per anchor per frame, in anchor order.
    """
    out = provider.query(window, anchors)
    for frame_index, _ in window:
        recs = out.get(frame_index)
        if recs is None or len(recs) != len(anchors):
            raise ProviderError(
                f"provider returned {0 if recs is None else len(recs)} records "
                f"for frame {frame_index}, expected {len(anchors)}",
                frame=frame_index,
            )
    return out


class OracleTrackProvider:
    """Ground-truth tracks from the simulator, with configurable corruption.

    Anchors attach at birth to the 3D point under their pixel (carried
    rigidly by the object that owns it). Per record: position is the true
    projection plus Gaussian pixel noise; visibility comes from a 1% depth
    test; the dynamics label marks objects displaced more than 1 cm within
    the query window and is flipped with the label-noise probability;
    reliability is 1/(1+sigma), halved within 3 px of a moving-object
    silhouette. Deterministic given (seed, anchor, frame).
    """

    def __init__(self, sim_frames, intrinsics, pixel_sigma=0.0, label_flip=0.0, seed=0,
                 n_static=None):
        self.frames = {fr.index: fr for fr in sim_frames}
        self.intrinsics = intrinsics
        self.pixel_sigma = float(pixel_sigma)
        self.label_flip = float(label_flip)
        self.seed = int(seed)
        self.n_static = self._count_static(sim_frames) if n_static is None else int(n_static)
        self._attach = {}
        self._border = {}

    @staticmethod
    def _count_static(sim_frames):
        # dynamic ids start after the static primitives; infer the split from
        # the dynamic masks
        dyn_min = None
        max_id = 0
        for fr in sim_frames:
            max_id = max(max_id, int(fr.object_id.max()))
            if fr.dynamic_mask.any():
                lo = int(fr.object_id[fr.dynamic_mask].min())
                dyn_min = lo if dyn_min is None else min(dyn_min, lo)
        return max_id + 1 if dyn_min is None else dyn_min

    def _attachment(self, anchor: Anchor):
        key = anchor.id
        if key in self._attach:
            return self._attach[key]
        fr = self.frames.get(anchor.birth_frame)
        if fr is None:
            self._attach[key] = None
            return None
        u = int(round(anchor.query_pos[0]))
        v = int(round(anchor.query_pos[1]))
        h, w = fr.depth_true.shape
        if not (0 <= u < w and 0 <= v < h) or fr.depth_true[v, u] <= 0:
            self._attach[key] = None
            return None
        d = fr.depth_true[v, u]
        cam = self.intrinsics.backproject(np.array([[float(u), float(v)]]), np.array([d]))[0]
        world = fr.pose.R.T @ (cam - fr.pose.t)
        oid = int(fr.object_id[v, u])
        if oid >= self.n_static:
            k = oid - self.n_static
            att = ("dynamic", k, world - fr.object_centers[k])
        else:
            att = ("static", -1, world)
        self._attach[key] = att
        return att

    def _border_distance(self, frame_index):
        if frame_index not in self._border:
            mask = self.frames[frame_index].dynamic_mask
            if mask.any() and not mask.all():
                dist = distance_transform_edt(~mask) + distance_transform_edt(mask)
            else:
                dist = np.full(mask.shape, np.inf)
            self._border[frame_index] = dist
        return self._border[frame_index]

    def _window_dynamic(self, obj_k, frame_indices):
        centers = [self.frames[f].object_centers[obj_k] for f in frame_indices if f in self.frames]
        if len(centers) < 2:
            return False
        centers = np.asarray(centers)
        span = centers.max(axis=0) - centers.min(axis=0)
        return bool(np.linalg.norm(span) > DYNAMIC_DISPLACEMENT_M)

    def track(self, anchor: Anchor, frame_index: int, window_indices) -> TrackRecord:
        fr = self.frames.get(frame_index)
        if fr is None:
            raise ProviderError(f"oracle has no frame {frame_index}", frame=frame_index)
        att = self._attachment(anchor)
        if att is None:
            return TrackRecord(anchor.id, frame_index, anchor.query_pos.copy(),
                               visibility=0.0, dynamics=0.0, reliability=0.0)
        kind, obj_k, point = att
        if kind == "dynamic":
            world = point + fr.object_centers[obj_k]
        else:
            world = point
        cam = fr.pose.world_to_camera(world[None])[0]
        h, w = fr.depth_true.shape
        rng = np.random.default_rng((self.seed, anchor.id, frame_index))
        noise = rng.standard_normal(2) * self.pixel_sigma
        flip = rng.uniform() < self.label_flip

        if cam[2] <= 1e-6:
            pos = anchor.query_pos.copy()
            visibility = 0.0
            rel = 0.0
        else:
            uv = self.intrinsics.project(cam[None])[0]
            pos = uv + noise
            ui, vi = int(round(uv[0])), int(round(uv[1]))
            visible = 0 <= ui < w and 0 <= vi < h
            if visible:
                visible = abs(fr.depth_true[vi, ui] - cam[2]) <= DEPTH_TEST_RELATIVE * cam[2]
            visibility = 1.0 if visible else 0.0
            rel = RELIABILITY_CEILING / (1.0 + self.pixel_sigma)
            if visible and self._border_distance(frame_index)[vi, ui] < OCCLUSION_BORDER_PX:
                rel *= 0.5

        dyn = 0.0
        if kind == "dynamic" and self._window_dynamic(obj_k, window_indices):
            dyn = 1.0
        if flip:
            dyn = 1.0 - dyn
        return TrackRecord(anchor.id, frame_index, pos, visibility, dyn, rel)

    def query(self, window, anchors):
        indices = [f for f, _ in window]
        return {
            f: [self.track(a, f, indices) for a in anchors]
            for f in indices
        }


class FileTrackProvider:
    """Replays records from a track file produced by `save_track_file` (or by
    any external tracker emitting the same columns)."""

    def __init__(self, path):
        self.path = Path(path)
        self.records = {}
        for rec in load_track_file(self.path):
            self.records[(rec.anchor_id, rec.frame)] = rec

    def query(self, window, anchors):
        out = {}
        for frame_index, _ in window:
            recs = []
            for a in anchors:
                rec = self.records.get((a.id, frame_index))
                if rec is None:
                    raise ProviderError(
                        f"track file {self.path} has no record for anchor {a.id} "
                        f"frame {frame_index}", frame=frame_index)
                recs.append(rec)
            out[frame_index] = recs
        return out


# ---------------------------------------------------------------------------
# track record files
# ---------------------------------------------------------------------------


def save_track_file(records, path):
    """One record per line, whitespace separated, with a `# columns:` header."""
    with open(path, "w") as f:
        f.write(f"# columns: {TRACK_FILE_COLUMNS}\n")
        for r in records:
            f.write(
                f"{r.anchor_id} {r.frame} {r.pos[0]:.17g} {r.pos[1]:.17g} "
                f"{r.visibility:.17g} {r.dynamics:.17g} {r.reliability:.17g}\n"
            )


def load_track_file(path):
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"missing track file: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ProviderError(f"{path}:{lineno}: expected 7 columns")
        out.append(
            TrackRecord(
                anchor_id=int(parts[0]), frame=int(parts[1]),
                pos=np.array([float(parts[2]), float(parts[3])]),
                visibility=float(parts[4]), dynamics=float(parts[5]),
                reliability=float(parts[6]),
            )
        )
    return out
