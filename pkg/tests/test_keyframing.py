import numpy as np
import pytest

from splat4d.camera import CameraPose, Intrinsics
from splat4d.keyframing import Keyframe, covisibility, maintain_window, should_insert_keyframe


def make_kf(idx, visible, pose=None, depth_value=2.0):
    intr = Intrinsics(100, 100, 16, 16, 32, 32)
    pose = pose or CameraPose.identity(intr)
    depth = np.full((32, 32), depth_value)
    return Keyframe(frame_index=idx, timestamp=idx * 0.1, rgb=np.zeros((32, 32, 3)),
                    depth=depth, pose=pose, visible_set=set(visible))


def test_covisibility_self_is_one():
    kf = make_kf(0, {1, 2, 3})
    assert covisibility(kf, kf) == 1.0


def test_covisibility_disjoint_and_empty():
    a = make_kf(0, {1, 2})
    b = make_kf(1, {3, 4})
    assert covisibility(a, b) == 0.0
    assert covisibility(make_kf(0, set()), make_kf(1, set())) == 0.0


def test_covisibility_iou_arithmetic():
    inter = set(range(30))
    only_a = set(range(100, 145))
    only_b = set(range(200, 245))
    a = make_kf(0, inter | only_a)
    b = make_kf(1, inter | only_b)
    assert covisibility(a, b) == pytest.approx(30 / 120)


def test_covisibility_symmetric(rng):
    a = make_kf(0, set(rng.integers(0, 50, 20).tolist()))
    b = make_kf(1, set(rng.integers(0, 50, 20).tolist()))
    assert covisibility(a, b) == covisibility(b, a)


def test_should_insert_identical_is_false():
    a = make_kf(0, {1, 2, 3})
    b = make_kf(1, {1, 2, 3}, pose=a.pose.copy())
    assert not should_insert_keyframe(b, a, tau_cov=0.9, tau_trans=0.08)


def test_should_insert_translation_trigger():
    a = make_kf(0, {1, 2, 3}, depth_value=2.0)
    intr = a.pose.intrinsics
    moved = CameraPose(np.eye(3), np.array([2 * 2.0 * 0.08, 0, 0]), intr)
    b = make_kf(1, {1, 2, 3}, pose=moved)
    assert should_insert_keyframe(b, a, tau_cov=0.0, tau_trans=0.08)


def test_should_insert_boundary_is_strict():
    # construct covisibility exactly 0.5 and tau_cov = 0.5: no trigger
    a = make_kf(0, {0, 1})
    b = make_kf(1, {1, 2}, pose=a.pose.copy())
    assert covisibility(a, b) == pytest.approx(1 / 3)
    tau = 1 / 3
    assert not (covisibility(b, a) < tau)  # direct predicate evaluation
    assert not should_insert_keyframe(b, a, tau_cov=tau, tau_trans=1e9)
    assert should_insert_keyframe(b, a, tau_cov=tau + 1e-9, tau_trans=1e9)


def test_maintain_window_append_only():
    window = [make_kf(i, {i}) for i in range(3)]
    new = make_kf(9, {100})
    out, evicted = maintain_window(window, new, max_size=8, tau_overlap=0.95)
    assert [kf.frame_index for kf in out] == [0, 1, 2, 9]
    assert evicted == []


def test_maintain_window_capacity_evicts_argmax_overlap():
    base = set(range(100))
    window = []
    for i in range(4):
        window.append(make_kf(i, set(range(i * 10, i * 10 + 30))))
    new = make_kf(9, set(range(5, 35)))  # overlaps kf1 (10..39) most
    out, evicted = maintain_window(window, new, max_size=4, tau_overlap=0.99)
    assert len(out) == 4
    assert len(evicted) == 1
    # exhaustive argmax oracle
    overlaps = [covisibility(kf, new) for kf in window]
    assert evicted[0] is window[int(np.argmax(overlaps))]
    assert out[-1] is new


def test_maintain_window_duplicate_evicted():
    window = [make_kf(0, {1, 2, 3}), make_kf(1, {7, 8})]
    dup = make_kf(2, {1, 2, 3})
    out, evicted = maintain_window(window, dup, max_size=8, tau_overlap=0.95)
    assert evicted == [window[0]]
    assert out[-1] is dup


def test_maintain_window_never_evicts_newest(rng):
    window = [make_kf(i, set(rng.integers(0, 40, 15).tolist())) for i in range(6)]
    new = make_kf(99, set(rng.integers(0, 40, 15).tolist()))
    out, evicted = maintain_window(window, new, max_size=3, tau_overlap=0.5)
    assert out[-1] is new
    assert new not in evicted
    assert len(out) <= 3
