import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toolkp.errors import (
    BoundaryTooSmall,
    DegenerateConfiguration,
    IndexOutOfRange,
    MaskTooSmall,
    MissingDepth,
    NoChangeDetected,
    NoGraspContact,
    NoPrefunctionFrame,
    SelectorOutOfRange,
)
from toolkp.extraction import (
    Extraction,
    ExtractionConfig,
    KeyframeSet,
    boundary_pixels,
    detect_function_keyframe,
    detect_function_point,
    detect_grasp_keyframe,
    extract,
    extract_effect_point,
    find_prefunction_keyframe,
    last_change_point,
    pelt,
    propagate_keypoints,
    sample_boundary_candidates,
    sample_tracking_keypoints,
    transforms_from_tracks,
)
from toolkp.geometry import CameraIntrinsics, Pose, Rotation, lift_to_3d
from toolkp.keypoints import FunctionalKeypoints, KeypointTrajectory, TaskSpec
from toolkp.ports import FrameContext
from toolkp.ports.mock import ScriptedSelector

from .conftest import random_pose

K = CameraIntrinsics(300.0, 300.0, 16.0, 12.0, 32, 24)
TASK = TaskSpec("pour", "mug", "bowl")


# --- oracles -----------------------------------------------------------------


def seg_cost(x):
    return float(np.sum((x - x.mean()) ** 2))


def brute_force_segmentation(x, penalty, min_size=2):
    """Minimum penalized cost over every admissible set of change points."""
    n = len(x)
    best, best_cps = seg_cost(x), []
    for k in range(1, n // min_size):
        for cps in itertools.combinations(range(min_size, n - min_size + 1), k):
            bounds = (0,) + cps + (n,)
            if any(b - a < min_size for a, b in zip(bounds, bounds[1:])):
                continue
            c = sum(seg_cost(x[a:b]) for a, b in zip(bounds, bounds[1:])) + penalty * k
            if c < best - 1e-12:
                best, best_cps = c, list(cps)
    return best_cps


def fps_oracle(points, n, start):
    chosen = [start]
    while len(chosen) < n:
        best_i, best_d = None, -1.0
        for i, p in enumerate(points):
            d = min(np.hypot(*(p - points[j])) for j in chosen)
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(best_i)
    return chosen


# --- sampling ------------------------------------------------------------------


def test_tracking_full_frame():
    px = sample_tracking_keypoints(np.ones((24, 32), bool), 4)
    assert len({tuple(p) for p in px}) == 4


@given(arrays(bool, (12, 14)), st.integers(1, 20), st.integers(0, 5))
def test_tracking_in_mask_and_distinct(mask, n, seed):
    if mask.sum() < n:
        with pytest.raises(MaskTooSmall):
            sample_tracking_keypoints(mask, n, seed)
        return
    px = sample_tracking_keypoints(mask, n, seed)
    assert len(px) == n
    assert len({tuple(p) for p in px}) == n
    assert all(mask[v, u] for u, v in px)
    assert np.array_equal(px, sample_tracking_keypoints(mask, n, seed))


def test_tracking_too_small():
    m = np.zeros((5, 5), bool)
    m[0, :2] = True
    with pytest.raises(MaskTooSmall):
        sample_tracking_keypoints(m, 3)


def test_boundary_candidates_on_square():
    m = np.zeros((20, 20), bool)
    m[4:16, 4:16] = True
    cands = sample_boundary_candidates(m, 4, seed=0)
    b = boundary_pixels(m)
    assert all(any((c == q).all() for q in b) for c in cands)
    # matches a loop-based FPS started from the same seed point
    order = b[np.random.default_rng(0).permutation(len(b))]
    start = int(np.argmin(np.linalg.norm(order - [9.5, 9.5], axis=1)))
    assert np.array_equal(cands, order[fps_oracle(order, 4, start)])
    # the first point after the seed is a corner of the square
    assert tuple(cands[1]) in {(4, 4), (4, 15), (15, 4), (15, 15)}


def test_boundary_candidates_n1_is_seed():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    c = sample_boundary_candidates(m, 1)
    assert len(c) == 1
    assert np.linalg.norm(c[0] - [4, 4]) == pytest.approx(2.0)


@given(arrays(bool, (10, 10)), st.integers(1, 6))
def test_boundary_candidates_membership(mask, n):
    b = boundary_pixels(mask)
    if len(b) < n:
        with pytest.raises(BoundaryTooSmall):
            sample_boundary_candidates(mask, n)
        return
    cands = sample_boundary_candidates(mask, n)
    bset = {tuple(p) for p in b}
    assert all(tuple(c) in bset for c in cands)


# --- registration along tracks -----------------------------------------------------


def test_static_tracks_identity(rng):
    pts = rng.normal(size=(6, 3))
    for p in transforms_from_tracks(np.stack([pts] * 5)):
        assert p.isclose(Pose.identity(), atol=1e-12)


def test_screw_motion_recovered(rng):
    step = Pose(Rotation.from_axis_angle([0, 0, 1], 0.05), [0.0, 0.0, 0.01])
    pts = rng.normal(size=(8, 3))
    tracks = [pts]
    for _ in range(20):
        tracks.append(step.apply(tracks[-1]))
    poses = transforms_from_tracks(np.stack(tracks))
    assert len(poses) == 20
    assert all(p.isclose(step, atol=1e-8) for p in poses)


def test_collinear_frame_reports_index(rng):
    tracks = np.stack([rng.normal(size=(4, 3)) for _ in range(5)])
    tracks[3] = np.outer(np.arange(4.0), [1, 1, 0])
    with pytest.raises(DegenerateConfiguration) as err:
        transforms_from_tracks(tracks)
    assert err.value.frame_index == 3


# --- change points ---------------------------------------------------------------


def test_step_signal_change_at_4():
    x = np.array([1, 1, 1, 1, 0, 0, 0, 0], float)
    assert last_change_point(x, 0.5) == 4
    assert brute_force_segmentation(x, 0.5 * np.var(x)) == [4]


def test_constant_signal_no_change():
    with pytest.raises(NoChangeDetected):
        last_change_point(np.full(20, 0.3))


def test_pelt_matches_brute_force(rng):
    for _ in range(40):
        n = int(rng.integers(6, 12))
        x = rng.normal(size=n) + np.where(np.arange(n) >= rng.integers(2, n - 1), 3.0, 0.0)
        pen = float(rng.uniform(0.5, 4.0))
        assert pelt(x, pen) == brute_force_segmentation(x, pen)


def test_two_regime_trajectory_detected(rng):
    for trial in range(10):
        n, change = 60, 37
        speed = np.where(np.arange(n - 1) < change, 0.05, 0.005)
        pts = rng.normal(size=(10, 3))
        tracks = [pts]
        for t in range(n - 1):
            tracks.append(tracks[-1] + speed[t] * np.array([1.0, 0, 0]) + 5e-4 * rng.normal(size=(10, 3)))
        t_f = detect_function_keyframe(np.stack(tracks))
        assert abs(t_f - change) <= 2


def test_mean_shift_five_sigma_located(rng):
    hits = 0
    for _ in range(50):
        n = int(rng.integers(20, 60))
        c = int(rng.integers(5, n - 5))
        x = rng.normal(size=n) + 5.0 * (np.arange(n) >= c)
        hits += abs(last_change_point(x) - c) <= 2
    assert hits == 50


def test_short_demo_rejected():
    from toolkp.errors import ExtractionError

    with pytest.raises(ExtractionError):
        detect_function_keyframe(np.zeros((5, 3, 3)))


# --- mask keyframes -----------------------------------------------------------------


def test_grasp_keyframe_first_contact():
    n = 20
    hand = np.zeros((n, 10, 10), bool)
    tool = np.zeros((n, 10, 10), bool)
    tool[:, 4:8, 4:8] = True
    hand[:, 0:2, 0:2] = True
    hand[12:, 3:6, 3:6] = True
    t, px = detect_grasp_keyframe(hand, tool)
    assert t == 12
    assert np.allclose(px, [4.5, 4.5])


def test_grasp_single_pixel_overlap():
    hand = np.zeros((2, 5, 5), bool)
    tool = np.zeros((2, 5, 5), bool)
    hand[1, 2, 3] = tool[1, 2, 3] = True
    t, px = detect_grasp_keyframe(hand, tool)
    assert (t, tuple(px)) == (1, (3.0, 2.0))
    with pytest.raises(NoGraspContact):
        detect_grasp_keyframe(hand[:1], tool[:1])


def masks_with_iou(values, size=10):
    tool, target = [], []
    for v in values:
        a = np.zeros((size, size), bool)
        b = np.zeros((size, size), bool)
        if v == 0:
            a[0, :3] = True
            b[5, :3] = True
        elif v == pytest.approx(0.2):
            a[0, 0:3] = True
            b[0, 2:5] = True  # 1 shared of 5
        else:
            a[0, 0:4] = True
            b[0, 2:5] = True  # 2 shared of 5
        tool.append(a)
        target.append(b)
    return np.stack(tool), np.stack(target)


def test_prefunction_examples():
    tool, target = masks_with_iou([0, 0, 0.2, 0.4])
    assert find_prefunction_keyframe(tool, target, 3, 0.1) == 1
    tool, target = masks_with_iou([0] * 6)
    assert find_prefunction_keyframe(tool, target, 5, 0.05) == 4
    over = np.ones((6, 4, 4), bool)
    with pytest.raises(NoPrefunctionFrame):
        find_prefunction_keyframe(over, over, 5, 0.01)
    with pytest.raises(IndexOutOfRange):
        find_prefunction_keyframe(over, over, 6, 0.01)


# --- keypoints -----------------------------------------------------------------


def test_detect_function_point_passthrough():
    depth = np.full((24, 32), 0.8)
    ctx = FrameContext(K, np.ones((24, 32), bool), depth=depth)
    cands = np.array([[1, 1], [5, 5], [9, 3], [20, 10]])
    px, p = detect_function_point(cands, ctx, ScriptedSelector({"pour": 3}), TASK)
    assert np.array_equal(px, [20, 10])
    assert np.allclose(p, lift_to_3d([20, 10], 0.8, K))
    with pytest.raises(SelectorOutOfRange):
        detect_function_point(cands, ctx, ScriptedSelector({"pour": 4}), TASK)
    depth[10, 20] = 0
    with pytest.raises(MissingDepth):
        detect_function_point(cands, ctx, ScriptedSelector({"pour": 3}), TASK)


def test_propagate_identity_and_translation():
    n = 12
    kp = {"func": (0, np.array([0.0, 0, 0])), "grasp": (0, np.array([0.0, 1, 0])), "center": (0, np.array([-1.0, 0, 0]))}
    traj = propagate_keypoints(kp, [Pose.identity()] * (n - 1), np.arange(n) * 0.1)
    assert all(np.array_equal(k.func, [0, 0, 0]) for k in traj.keypoints)
    step = Pose.from_translation([0.01, 0, 0])
    traj = propagate_keypoints(kp, [step] * (n - 1), np.arange(n) * 0.1)
    assert np.allclose(traj.keypoints[10].func, [0.1, 0, 0])


def test_propagate_matches_truth_and_keeps_detections(rng):
    n = 15
    truth = [Pose.identity()]
    for _ in range(n - 1):
        truth.append(random_pose(rng, 0.05) @ truth[-1])
    body = np.array([[0.1, 0, 0], [0, 0.1, 0.02], [-0.03, 0.01, 0]])
    world = [p.apply(body) for p in truth]
    steps = [truth[t + 1] @ truth[t].inv() for t in range(n - 1)]
    dets = {"func": (6, world[6][0]), "grasp": (2, world[2][1]), "center": (0, world[0][2])}
    traj = propagate_keypoints(dets, steps, np.arange(n, dtype=float))
    for t in range(n):
        assert np.allclose(traj.keypoints[t].as_array(), world[t], atol=1e-8)
    assert np.array_equal(traj.keypoints[6].func, world[6][0])
    assert np.array_equal(traj.keypoints[2].grasp, world[2][1])


def test_effect_point_read_and_bounds():
    k0 = FunctionalKeypoints([0, 0.05, 0.12], [0.1, 0.05, 0.12], [0, 0, 0])
    traj = KeypointTrajectory([0.0, 0.1, 0.2], [k0, k0, k0])
    assert np.array_equal(extract_effect_point(traj, 1).point, [0, 0.05, 0.12])
    with pytest.raises(IndexOutOfRange):
        extract_effect_point(traj, 3)


def test_keyframe_set_ordering():
    KeyframeSet(1, 2, 3, 5)
    with pytest.raises(Exception):
        KeyframeSet(1, 2, 4, 5)


# --- whole stage on a fixture -----------------------------------------------------------


def test_extract_on_fixture_recovers_keyframes(pour_run):
    fx, ext = pour_run["fixture"], pour_run["extraction"]
    kf = ext.keyframes
    assert 0 < kf.t_grasp < kf.t_prefunction < kf.t_function < len(fx.bundle) - 1
    assert abs(kf.t_function - fx.truth["keyframes"]["t_function"]) <= 2
    assert kf.t_grasp == pytest.approx(fx.truth["keyframes"]["t_grasp"], abs=1)


def test_extract_deterministic_and_serializable(pour_run):
    fx, cfg = pour_run["fixture"], pour_run["cfg"]
    sel = ScriptedSelector(fx.config["ports"]["selector_script"])
    a = extract(fx.bundle, cfg.extraction, sel).to_dict()
    b = extract(fx.bundle, cfg.extraction, sel).to_dict()
    assert a == b
    assert Extraction.from_dict(a).to_dict() == a
    assert a["effect_point"] == pour_run["extraction"].to_dict()["effect_point"]


def test_extraction_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(n_track=2)
    with pytest.raises(ValueError):
        ExtractionConfig(iou_threshold=1.0)
