"""Keyframe selection and sliding-window management.

Covisibility between two keyframes is the IoU of their visible-splat sets,
each obtained by conditioning the map at that keyframe's own timestamp and
rendering from its pose. A new keyframe enters when covisibility with the
last keyframe drops or the camera has translated far relative to the scene
depth; the window stays small by evicting redundant members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose


@dataclass
class Keyframe:
    frame_index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    visible_set: set = field(default_factory=set)
    dynamic_mask: np.ndarray | None = None

    def median_valid_depth(self) -> float:
        valid = self.depth[self.depth > 0]
        return float(np.median(valid)) if valid.size else 0.0


def covisibility(a: Keyframe, b: Keyframe) -> float:
    """IoU of the visible-splat sets; 0 when both are empty."""
    if a is b:
        return 1.0
    union = a.visible_set | b.visible_set
    if not union:
        return 0.0
    return len(a.visible_set & b.visible_set) / len(union)


def should_insert_keyframe(current: Keyframe, last_kf: Keyframe,
                           tau_cov: float, tau_trans: float) -> bool:
    """True when covisibility falls below tau_cov or the relative translation
    exceeds tau_trans times the last keyframe's median valid depth."""
    if covisibility(current, last_kf) < tau_cov:
        return True
    rel = current.pose.relative_translation(last_kf.pose)
    return rel > tau_trans * last_kf.median_valid_depth()


def maintain_window(window: list, new_kf: Keyframe, max_size: int, tau_overlap: float):
    """Append new_kf, evict members too redundant with it, then trim to
    max_size by evicting the highest-covisibility member (never the newest).

    Returns (window, evicted).
    """
    window = list(window) + [new_kf]
    evicted = []
    keep = []
    for kf in window[:-1]:
        if covisibility(kf, new_kf) > tau_overlap:
            evicted.append(kf)
        else:
            keep.append(kf)
    window = keep + [new_kf]
    while len(window) > max_size:
        overlaps = [covisibility(kf, new_kf) for kf in window[:-1]]
        worst = int(np.argmax(overlaps))
        evicted.append(window.pop(worst))
    return window, evicted
