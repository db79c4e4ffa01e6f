import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolkp.errors import DegenerateProjection, InfeasibleProblem
from toolkp.geometry import Pose, Rotation, rotation_log
from toolkp.keypoints import FunctionalKeypoints
from toolkp.trajectory import (
    Box,
    GraspAttachment,
    PoseTrajectory,
    TrajOptConfig,
    constraint_report,
    optimize_trajectory,
    resample_uniform,
    resampled_index,
    tool_to_ee_trajectory,
    trajectory_objective,
    warp_angle_and_scale,
    warp_demo_trajectory,
)

from .conftest import random_pose, vec3
from .instances import planning_instance, trivial_instance


def kp(func):
    func = np.asarray(func, float)
    return FunctionalKeypoints(func, func + [0, 0, 0.05], func - [0.05, 0.01, 0])


def line_traj(n=5, start=(0.2, 0.0, 0.1)):
    poses = [Pose(Rotation.from_axis_angle([1, 0, 0], 0.1 * t), np.add(start, [0, 0, 0.01 * t])) for t in range(n)]
    return PoseTrajectory(0.1 * np.arange(n), poses)


# --- trajectories ------------------------------------------------------------------


def test_pose_trajectory_validation():
    with pytest.raises(ValueError):
        PoseTrajectory([0.0], [Pose.identity()])
    with pytest.raises(ValueError):
        PoseTrajectory([0.0, 0.0], [Pose.identity()] * 2)


def test_trajectory_dict_roundtrip(rng):
    tr = PoseTrajectory([0.0, 0.5, 1.0], [random_pose(rng) for _ in range(3)])
    back = PoseTrajectory.from_dict(tr.to_dict())
    assert all(a.isclose(b, atol=0) for a, b in zip(tr.poses, back.poses))


def test_sample_midpoint_and_clamp():
    tr = PoseTrajectory([0.0, 1.0], [Pose.identity(), Pose(Rotation.from_axis_angle([0, 0, 1], 1.0), [1.0, 0, 0])])
    mid = tr.sample(0.5)
    assert np.allclose(mid.translation, [0.5, 0, 0])
    assert mid.rotation.isclose(Rotation.from_axis_angle([0, 0, 1], 0.5), atol=1e-12)
    assert tr.sample(-3).isclose(tr.poses[0]) and tr.sample(9).isclose(tr.poses[1])


def test_resample_keeps_endpoints_and_index():
    tr = line_traj(7)
    rs = resample_uniform(tr, 13, 0.05)
    assert len(rs) == 13 and np.allclose(np.diff(rs.timestamps), 0.05)
    assert rs.poses[0].isclose(tr.poses[0]) and rs.poses[-1].isclose(tr.poses[-1], atol=1e-12)
    assert resampled_index(tr, 3, 13) == 6
    assert resampled_index(tr, 0, 13) == 1  # the function keyframe never pins step 0


# --- warping ------------------------------------------------------------------------


def test_warp_examples():
    assert warp_angle_and_scale([0.2, 0, 0], [0.2, 0, 0]) == (0.0, 1.0)
    a, s = warp_angle_and_scale([0.2, 0, 0.1], [-0.2, 0, 0.3])
    assert a == pytest.approx(math.pi, abs=1e-12) and s == pytest.approx(1.0)
    a, s = warp_angle_and_scale([0.1, 0, 0], [0, 0.3, 0])
    assert a == pytest.approx(math.pi / 2) and s == pytest.approx(3.0)
    with pytest.raises(DegenerateProjection):
        warp_angle_and_scale([0, 0, 0.3], [0.1, 0, 0])


def test_warp_identity_scene():
    tr = line_traj()
    warped, _ = warp_demo_trajectory(tr, kp([0.2, 0, 0.15]), kp([0.2, 0, 0.1]))
    assert all(a.isclose(b, atol=1e-12) for a, b in zip(tr.poses, warped.poses))


@given(vec3, st.floats(-3.0, 3.0))
def test_warp_maps_start_onto_test_point(q, height):
    q = np.array([q[0], q[1], height])
    if np.linalg.norm(q[:2]) < 1e-3:
        return
    tr = line_traj()
    warped, _ = warp_demo_trajectory(tr, kp([0.2, 0, 0.15]), kp(q))
    assert np.allclose(warped.poses[0].translation[:2], q[:2], atol=1e-9)
    # heights and per-step rotation magnitudes are untouched
    assert np.allclose(warped.positions()[:, 2], tr.positions()[:, 2])
    for a, b, c, d in zip(tr.poses, tr.poses[1:], warped.poses, warped.poses[1:]):
        da = np.linalg.norm(rotation_log(b.rotation * a.rotation.inv()))
        dw = np.linalg.norm(rotation_log(d.rotation * c.rotation.inv()))
        assert dw == pytest.approx(da, abs=1e-9)


# --- boxes ------------------------------------------------------------------------


def box_distance_oracle(p, lo, hi):
    """Closest-point distance outside; minus distance to the nearest face inside."""
    closest = np.minimum(np.maximum(p, lo), hi)
    if np.any(closest != p):
        return float(np.linalg.norm(p - closest))
    return -float(min(np.min(p - lo), np.min(hi - p)))


def test_box_signed_distance_oracle(rng):
    b = Box([0, 0, 0], [1, 2, 0.5])
    pts = rng.uniform(-1, 3, size=(500, 3))
    got = b.signed_distance(pts)
    want = [box_distance_oracle(p, b.lo, b.hi) for p in pts]
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(ValueError):
        Box([1, 0, 0], [0, 1, 1])


# --- optimizer -------------------------------------------------------------------


def test_trivial_instance_reproduces_reference():
    ref, ti, tf, t_f, cfg = trivial_instance()
    out = optimize_trajectory(ref, ti, tf, t_f, cfg)
    assert trajectory_objective(out, ref, cfg.relax_fraction) < 1e-8


@pytest.mark.parametrize("seed,obstacle", [(0, True), (1, True), (10, False)])
def test_audited_solutions(seed, obstacle):
    ref, ti, tf, t_f, cfg = planning_instance(seed, obstacle)
    out = optimize_trajectory(ref, ti, tf, t_f, cfg)
    rep = constraint_report(out, ref, ti, tf, t_f, cfg)
    assert rep["satisfied"]
    assert rep["keyframe_residuals"]["function_position_m"] <= 1e-4
    if obstacle:
        # the reference itself hits the box, so the plan had to move
        assert cfg.obstacle_boxes[0].signed_distance(ref.positions()).min() < 0
        assert rep["min_clearance_m"] >= cfg.clearance_margin


def test_relaxed_prefix_is_free():
    """Before the relaxed cut the optimizer may deviate at no cost."""
    ref, ti, tf, t_f, cfg = planning_instance(3)
    out = optimize_trajectory(ref, ti, tf, t_f, cfg)
    rep = constraint_report(out, ref, ti, tf, t_f, cfg)
    cut = math.ceil(cfg.relax_fraction * len(ref))
    tail = [out.poses[t].translation - ref.poses[t].translation for t in range(cut, len(ref)) if t != t_f]
    assert np.max(np.linalg.norm(tail, axis=1)) < 1e-4
    assert rep["objective"] == pytest.approx(
        np.sum((out.positions()[cut:] - ref.positions()[cut:]) ** 2)
        + sum(np.sum(rotation_log(out.poses[t].rotation * ref.poses[t].rotation.inv()) ** 2) for t in range(cut, len(ref)))
    )


def test_impossible_velocity_budget():
    ref, ti, tf, t_f, _ = trivial_instance()
    far = Pose(tf.rotation, tf.translation + [5.0, 0, 0])
    with pytest.raises(InfeasibleProblem) as err:
        optimize_trajectory(ref, ti, far, t_f, TrajOptConfig())
    assert err.value.constraint == "linear_velocity"


def test_keyframe_inside_obstacle_is_infeasible():
    ref, ti, tf, t_f, _ = trivial_instance()
    cfg = TrajOptConfig(obstacle_boxes=[Box(tf.translation - 0.01, tf.translation + 0.01)])
    with pytest.raises(InfeasibleProblem) as err:
        optimize_trajectory(ref, ti, tf, t_f, cfg)
    assert err.value.constraint == "clearance"


def test_config_validation():
    with pytest.raises(ValueError):
        TrajOptConfig(relax_fraction=1.0)
    with pytest.raises(ValueError):
        TrajOptConfig(v_max=0)
    cfg = TrajOptConfig(obstacle_boxes=[{"lo": [0, 0, 0], "hi": [1, 1, 1]}])
    assert isinstance(cfg.obstacle_boxes[0], Box)
    assert TrajOptConfig(**{**cfg.to_dict(), "obstacle_boxes": cfg.to_dict()["obstacle_boxes"]}).to_dict() == cfg.to_dict()


def test_tool_to_ee_composition(rng):
    tr = PoseTrajectory([0.0, 1.0], [random_pose(rng), random_pose(rng)])
    g, base = random_pose(rng), random_pose(rng)
    ee = tool_to_ee_trajectory(tr, GraspAttachment(g), base)
    for a, b in zip(tr.poses, ee.poses):
        assert b.isclose(base @ a @ g, atol=1e-12)
