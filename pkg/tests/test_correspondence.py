import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolkp.correspondence import (
    AxisRefinementConfig,
    RefinementScene,
    TestObservation,
    align_axis,
    align_function_point,
    align_plane,
    build_function_plane,
    compose_function_correspondence,
    refine_axis,
    region_side,
    render_points,
    rotation_between,
    transfer_keypoints,
)
from toolkp.errors import AxisOutOfPlane, CorrespondenceFailed, RefinerOutOfRange, RegionOutsideMask
from toolkp.geometry import CameraIntrinsics, Pose, Rotation, lift_to_3d
from toolkp.keypoints import EffectPoint, FunctionalKeypoints, TargetFrame
from toolkp.ports import FrameContext, Region
from toolkp.ports.mock import IdentityCorrespondence, OracleRefiner, ScriptedRegionProposer

from .conftest import random_pose, rotations
from .test_keypoints import random_keypoints

K = CameraIntrinsics(200.0, 200.0, 32.0, 24.0, 64, 48)


class Fixed:
    def __init__(self, i):
        self.i = i

    def select(self, demo_frame, renderings, task=None):
        return self.i


def test_function_plane_example():
    k = FunctionalKeypoints(func=[1, 0, 0], grasp=[1, 1, 0], center=[0, 0, 0])
    pl = build_function_plane(k)
    assert np.allclose(pl.u, [1, 0, 0])
    assert np.allclose(pl.v, [0, 1, 0])
    assert np.allclose(pl.n, [0, 0, 1])


def test_point_alignment_translation():
    t = align_function_point([1.0, 2.0, 3.0], [0.5, 0.0, 3.0])
    assert np.allclose(t.apply([0.5, 0.0, 3.0]), [1, 2, 3])


@given(rotations(), rotations())
def test_rotation_between_maps_vector(r1, r2):
    a = r1.apply([1.0, 0, 0])
    b = r2.apply([0, 1.0, 0])
    assert np.allclose(rotation_between(a, b).apply(a), b, atol=1e-9)


def test_rotation_between_antiparallel_uses_tie_axis():
    r = rotation_between([0, 0, 1.0], [0, 0, -1.0], tie_axis=[1.0, 0, 0])
    assert np.allclose(r.apply([0, 0, 1.0]), [0, 0, -1], atol=1e-12)
    # a half turn about x keeps x fixed
    assert np.allclose(r.apply([1.0, 0, 0]), [1, 0, 0], atol=1e-12)


def test_plane_alignment_keeps_pivot(rng):
    for _ in range(50):
        n1 = rng.normal(size=3)
        n2 = rng.normal(size=3)
        n1 /= np.linalg.norm(n1)
        n2 /= np.linalg.norm(n2)
        pivot = rng.normal(size=3)
        t = align_plane(n1, n2, pivot)
        assert np.allclose(t.apply(pivot), pivot, atol=1e-12)
        assert np.dot(t.rotation.apply(n2), n1) > 1 - 1e-12


def test_axis_alignment_in_plane_and_out_of_plane():
    t = align_axis([0, 1.0, 0], [1.0, 0, 0], [0, 0, 1.0], [0, 0, 0])
    assert np.allclose(t.rotation.apply([1.0, 0, 0]), [0, 1, 0], atol=1e-12)
    with pytest.raises(AxisOutOfPlane):
        align_axis([0, 0.5, 0.5], [1.0, 0, 0], [0, 0, 1.0], [0, 0, 0])


def test_identical_keypoints_give_identity():
    k = FunctionalKeypoints(func=[0.1, 0, 0.05], grasp=[0.1, 0.1, 0.05], center=[0, 0, 0.05])
    fc = compose_function_correspondence(k, k, EffectPoint(k.func), AxisRefinementConfig(), OracleRefiner(0.0))
    assert fc.t_func.isclose(Pose.identity(), atol=1e-12)
    assert fc.chosen_offset == 0.0
    assert np.allclose(fc.k_test_at_tf.as_array(), k.as_array(), atol=1e-12)


def test_translated_tool_gives_pure_translation():
    k = FunctionalKeypoints(func=[0.1, 0, 0.05], grasp=[0.1, 0.1, 0.05], center=[0, 0, 0.05])
    shift = np.array([0.2, -0.1, 0.0])
    k_test = k.transformed(Pose.from_translation(shift))
    fc = compose_function_correspondence(k, k_test, EffectPoint(k.func), AxisRefinementConfig(), OracleRefiner(0.0))
    assert fc.t_func.isclose(Pose.from_translation(-shift), atol=1e-12)


def test_constraints_hold_for_random_pairs(rng):
    cfg = AxisRefinementConfig()
    for _ in range(100):
        kd, kt = random_keypoints(rng), random_keypoints(rng)
        target = float(rng.uniform(-math.pi / 2, math.pi / 2))
        fc = compose_function_correspondence(kd, kt, EffectPoint(kd.func), cfg, OracleRefiner(target))
        r = fc.residuals
        assert r["function_point"] < 1e-9
        assert r["normal_dot"] > 1 - 1e-9
        assert abs(r["axis_dot"] - math.cos(fc.chosen_offset)) < 1e-9
        # the oracle picks the closest offset
        assert fc.chosen_offset == min(cfg.offsets, key=lambda o: (abs(o - target), abs(o)))


def test_effect_point_shift_places_func():
    kd = FunctionalKeypoints(func=[0.1, 0, 0.05], grasp=[0.1, 0.1, 0.05], center=[0, 0, 0.05])
    q = EffectPoint([0.0, 0.2, 0.1])
    fc = compose_function_correspondence(kd, kd, q, AxisRefinementConfig(), OracleRefiner(0.0))
    assert np.allclose(fc.k_test_at_tf.func, q.point)


def test_equivariant_under_common_motion(rng):
    """Moving both tools by the same rigid g conjugates T_func by g."""
    cfg = AxisRefinementConfig()
    for _ in range(20):
        kd, kt = random_keypoints(rng), random_keypoints(rng)
        g = random_pose(rng)
        a = compose_function_correspondence(kd, kt, EffectPoint(kd.func), cfg, OracleRefiner(0.0)).t_func
        b = compose_function_correspondence(
            kd.transformed(g), kt.transformed(g), EffectPoint(g.apply(kd.func)), cfg, OracleRefiner(0.0)
        ).t_func
        assert b.isclose(g @ a @ g.inv(), atol=1e-8)


def test_refiner_out_of_range():
    with pytest.raises(RefinerOutOfRange):
        refine_axis(Pose.identity(), [0, 0, 1.0], [0, 0, 0], AxisRefinementConfig(), Fixed(7))
    _, off, r = refine_axis(Pose.identity(), [0, 0, 1.0], [0, 0, 0], AxisRefinementConfig(), Fixed(6))
    assert off == pytest.approx(math.radians(45))
    assert len(r) == 7 and r[0].image is None


def test_refinement_config_validation():
    assert AxisRefinementConfig.from_degrees([0.0, 90.0]).offsets[1] == pytest.approx(math.pi / 2)
    with pytest.raises(ValueError):
        AxisRefinementConfig(())
    with pytest.raises(ValueError):
        AxisRefinementConfig((2.0,))


# --- rendering and transfer -----------------------------------------------------


def test_render_zbuffer_front_wins():
    pts = np.array([[0, 0, 1.0], [0, 0, 0.5]])
    img = render_points(pts, np.array([100, 200], np.uint8), K, radius=0)
    assert img[24, 32] == 200
    assert img.sum() == 200


def test_rendered_candidates_differ(rng):
    cloud = rng.uniform(-0.05, 0.05, size=(300, 3)) * [1, 0.2, 0.2] + [0, 0, 0.02]
    frame = TargetFrame([0, 0, 0.6], Rotation.from_matrix(np.diag([1.0, -1.0, -1.0])))
    scene = RefinementScene(cloud, np.zeros((0, 3)), K, frame)
    _, _, r = refine_axis(Pose.identity(), [0, 0, 1.0], [0, 0, 0.02], AxisRefinementConfig(), Fixed(3), scene)
    assert all(x.image is not None and x.image.shape == (48, 64) for x in r)
    assert not np.array_equal(r[0].image, r[3].image)


def test_region_side_rule():
    m = np.zeros((400, 400), bool)
    assert region_side(m) == 24.0
    m[10:50, 10:30] = True
    assert region_side(m) == 24.0
    m[10:210, 10:30] = True
    assert region_side(m) == 50.0


def _flat_observation(depth=0.5):
    mask = np.zeros((48, 64), bool)
    mask[10:40, 10:50] = True
    return TestObservation(K, mask, np.full((48, 64), depth), TargetFrame([0, 0, 0.0]))


def test_transfer_identity_ports():
    obs = _flat_observation()
    marks = {"func": (45.0, 20.0), "grasp": (15.0, 30.0)}
    demo = FrameContext(K, obs.tool_mask, marks=marks)
    k = transfer_keypoints(demo, obs, ScriptedRegionProposer(marks), IdentityCorrespondence())
    assert np.allclose(k.func, lift_to_3d(marks["func"], 0.5, K))
    assert np.allclose(k.grasp, lift_to_3d(marks["grasp"], 0.5, K))


def test_transfer_failures():
    obs = _flat_observation()
    marks = {"func": (45.0, 20.0), "grasp": (15.0, 30.0)}
    demo = FrameContext(K, obs.tool_mask, marks=marks)
    far = ScriptedRegionProposer({"func": (300.0, 300.0), "grasp": (15.0, 30.0)})
    with pytest.raises(RegionOutsideMask):
        transfer_keypoints(demo, obs, far, IdentityCorrespondence())

    class Nothing:
        def match(self, *a):
            return None

    with pytest.raises(CorrespondenceFailed):
        transfer_keypoints(demo, obs, ScriptedRegionProposer(marks), Nothing())


def test_region_contains():
    r = Region((10.0, 10.0), 4.0)
    assert r.contains((12.0, 8.0)) and not r.contains((12.5, 10.0))
