"""Stage 2: transfer keypoints to the test tool and align it to the
demonstrated function keyframe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AxisOutOfPlane,
    ConstraintViolation,
    CorrespondenceFailed,
    EmptyCloud,
    RefinerOutOfRange,
    RegionOutsideMask,
)
from .extraction import depth_at, masked_cloud
from .geometry import CameraIntrinsics, Pose, Rotation, lift_to_3d, project_pinhole
from .keypoints import (
    EffectPoint,
    FunctionalKeypoints,
    TargetFrame,
    TaskSpec,
    compute_center,
    from_target_frame,
    plane_axes,
    to_target_frame,
)
from .ports import AxisRefiner, CandidateRendering, DenseCorrespondence, FrameContext, Region, RegionProposer

DEFAULT_OFFSETS_DEG = (-45.0, -30.0, -10.0, 0.0, 10.0, 30.0, 45.0)
REGION_MIN_SIDE = 24.0
REGION_FRACTION = 0.25
CHECK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FunctionPlane:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray


def build_function_plane(k: FunctionalKeypoints) -> FunctionPlane:
    u, v, n = plane_axes(k)
    return FunctionPlane(k.func.copy(), u, v, n)


@dataclass
class AxisRefinementConfig:
    offsets: tuple[float, ...] = tuple(math.radians(d) for d in DEFAULT_OFFSETS_DEG)

    def __post_init__(self):
        self.offsets = tuple(float(o) for o in self.offsets)
        if not self.offsets:
            raise ValueError("at least one offset is required")
        if any(abs(o) > math.pi / 2 for o in self.offsets):
            raise ValueError("offsets must lie within [-pi/2, pi/2]")

    @classmethod
    def from_degrees(cls, degrees: Sequence[float]) -> AxisRefinementConfig:
        return cls(tuple(math.radians(d) for d in degrees))


# --- keypoint transfer -----------------------------------------------------------


@dataclass(eq=False)
class TestObservation:
    """Single RGB-D view of the test scene."""

    __test__ = False  # not a pytest class

    intrinsics: CameraIntrinsics
    tool_mask: np.ndarray
    depth: np.ndarray
    target_frame: TargetFrame
    target_mask: np.ndarray | None = None
    rgb: np.ndarray | None = None

    def frame_context(self) -> FrameContext:
        return FrameContext(self.intrinsics, self.tool_mask, self.target_mask, self.depth, self.rgb)

    def tool_cloud(self) -> np.ndarray:
        return to_target_frame(masked_cloud(self.tool_mask, self.depth, self.intrinsics), self.target_frame)

    def target_cloud(self) -> np.ndarray:
        if self.target_mask is None:
            return np.zeros((0, 3))
        return to_target_frame(masked_cloud(self.target_mask, self.depth, self.intrinsics), self.target_frame)


def region_side(tool_mask: np.ndarray) -> float:
    """max(24 px, a quarter of the larger tool bounding-box side)."""
    rows, cols = np.nonzero(tool_mask)
    if len(rows) == 0:
        return REGION_MIN_SIDE
    extent = max(cols.max() - cols.min() + 1, rows.max() - rows.min() + 1)
    return max(REGION_MIN_SIDE, REGION_FRACTION * float(extent))


def transfer_keypoints(
    demo_frame: FrameContext,
    test: TestObservation,
    proposer: RegionProposer,
    matcher: DenseCorrespondence,
) -> FunctionalKeypoints:
    """Coarse region proposal then fine point transfer for the function and
    grasp points; the center is the test tool's box center.

    ``demo_frame.marks`` must hold the demo ``func`` and ``grasp`` pixels.
    Only the proposed region centre is used; its size follows
    :func:`region_side`.
    """
    test_ctx = test.frame_context()
    side = region_side(test.tool_mask)
    points = {}
    for role in ("func", "grasp"):
        proposed = proposer.propose(demo_frame, test_ctx, test.tool_mask, role)
        region = Region(proposed.center, side)
        if not (region.pixel_mask(test.tool_mask.shape) & test.tool_mask).any():
            raise RegionOutsideMask(f"{role} region at {region.center} does not touch the tool mask")
        px = matcher.match(np.asarray(demo_frame.marks[role], float), demo_frame, test_ctx, region)
        if px is None:
            raise CorrespondenceFailed(f"no {role} match inside the proposed region")
        px = np.asarray(px, float)
        if not region.contains(px):
            raise CorrespondenceFailed(f"{role} match {px} lies outside its search region")
        cam = lift_to_3d(px, depth_at(test.depth, px), test.intrinsics)
        points[role] = to_target_frame(cam, test.target_frame)
    cloud = test.tool_cloud()
    if len(cloud) == 0:
        raise EmptyCloud("test tool mask has no valid depth")
    return FunctionalKeypoints(points["func"], points["grasp"], compute_center(cloud))


# --- alignment steps -----------------------------------------------------------


def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def _any_perpendicular(n: np.ndarray) -> np.ndarray:
    a = np.eye(3)[int(np.argmin(np.abs(n)))]
    return _unit(np.cross(n, a))


def rotation_between(a, b, tie_axis=None) -> Rotation:
    """Minimal rotation taking unit ``a`` onto unit ``b``.

    When the vectors are (near) antiparallel the rotation first flips ``a``
    by 180 degrees about ``tie_axis`` (made perpendicular to ``a``).
    """
    a = _unit(a)
    b = _unit(b)
    d = float(np.dot(a, b))
    if d > -1 + 1e-6:
        return Rotation(np.concatenate([[1.0 + d], np.cross(a, b)]))
    w = _any_perpendicular(a) if tie_axis is None else np.asarray(tie_axis, float) - np.dot(tie_axis, a) * a
    if np.linalg.norm(w) < 1e-9:
        w = _any_perpendicular(a)
    flip = Rotation(np.concatenate([[0.0], _unit(w)]))
    a2 = flip.apply(a)
    return Rotation(np.concatenate([[1.0 + np.dot(a2, b)], np.cross(a2, b)])) * flip


def align_function_point(p_func_demo_tf, q_func_test0) -> Pose:
    return Pose.from_translation(np.asarray(p_func_demo_tf, float) - np.asarray(q_func_test0, float))


def align_plane(n_demo, n_test, pivot, tie_axis=None) -> Pose:
    """Rotation about ``pivot`` carrying ``n_test`` onto ``n_demo``."""
    rot = rotation_between(n_test, n_demo, tie_axis)
    pose = Pose.rotation_about(rot, pivot)
    if np.dot(n_demo, rot.apply(n_test)) < 1 - CHECK_TOL:
        raise ConstraintViolation("plane alignment failed its post-check")
    return pose


def align_axis(u_demo, u_test, shared_normal, pivot, tol: float = 1e-6) -> Pose:
    """In-plane rotation about ``shared_normal`` through ``pivot`` carrying
    ``u_test`` onto ``u_demo``. Both axes must lie in the plane."""
    n = _unit(shared_normal)
    u_demo = np.asarray(u_demo, float)
    u_test = np.asarray(u_test, float)
    for name, u in (("demo", u_demo), ("test", u_test)):
        if abs(float(np.dot(u, n))) > tol:
            raise AxisOutOfPlane(f"{name} axis has out-of-plane component {float(np.dot(u, n)):.3g}")
    angle = math.atan2(float(np.dot(n, np.cross(u_test, u_demo))), float(np.dot(u_test, u_demo)))
    return Pose.rotation_about(Rotation.from_axis_angle(n, angle), pivot)


# --- axis refinement ------------------------------------------------------------


def render_points(points_cam: np.ndarray, values: np.ndarray, k: CameraIntrinsics, radius: int = 2) -> np.ndarray:
    """Z-buffered disk splats of camera-frame points into a uint8 image."""
    img = np.zeros((k.height, k.width), dtype=np.uint8)
    pts = np.asarray(points_cam, float)
    keep = pts[:, 2] > 0
    pts = pts[keep]
    vals = np.asarray(values)[keep]
    if len(pts) == 0:
        return img
    uv = np.rint(project_pinhole(pts, k)).astype(np.int64)
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if dx * dx + dy * dy <= radius * radius]
    u = np.concatenate([uv[:, 0] + dx for dx, _ in offs])
    v = np.concatenate([uv[:, 1] + dy for _, dy in offs])
    z = np.tile(pts[:, 2], len(offs))
    val = np.tile(vals, len(offs))
    ok = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    lin = v[ok] * k.width + u[ok]
    z = z[ok]
    val = val[ok]
    order = np.lexsort((z, lin))
    lin_s = lin[order]
    first = np.ones(len(lin_s), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    img.reshape(-1)[lin_s[first]] = val[order][first]
    return img


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes())


@dataclass(eq=False)
class RefinementScene:
    """Clouds are in the test target frame."""

    tool_cloud: np.ndarray
    target_cloud: np.ndarray
    intrinsics: CameraIntrinsics
    target_frame: TargetFrame
    demo_frame: FrameContext | None = None
    task: TaskSpec | None = None


def _offset_pose(offset: float, normal, pivot) -> Pose:
    return Pose.rotation_about(Rotation.from_axis_angle(normal, offset), pivot)


def refine_axis(
    base: Pose,
    normal,
    pivot,
    cfg: AxisRefinementConfig,
    refiner: AxisRefiner,
    scene: RefinementScene | None = None,
    post: Pose | None = None,
) -> tuple[Pose, float, list[CandidateRendering]]:
    """Try each offset rotation about ``normal`` at ``pivot`` on top of
    ``base`` and let the refiner pick one.

    With a scene, each candidate is rendered after applying ``post`` (the
    remaining placement) to the rotated tool cloud.
    """
    post = Pose.identity() if post is None else post
    renderings = []
    for off in cfg.offsets:
        image = None
        if scene is not None:
            cand = post @ base @ _offset_pose(off, normal, pivot)
            tool = from_target_frame(cand.apply(scene.tool_cloud), scene.target_frame)
            target = from_target_frame(scene.target_cloud, scene.target_frame)
            pts = np.concatenate([tool, target]) if len(target) else tool
            vals = np.concatenate([np.full(len(tool), 255, np.uint8), np.full(len(target), 128, np.uint8)])
            image = render_points(pts, vals, scene.intrinsics)
        renderings.append(CandidateRendering(off, image))
    idx = refiner.select(
        None if scene is None else scene.demo_frame, renderings, None if scene is None else scene.task
    )
    if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(renderings):
        raise RefinerOutOfRange(f"refiner returned {idx!r} for {len(renderings)} candidates")
    off = cfg.offsets[int(idx)]
    return base @ _offset_pose(off, normal, pivot), off, renderings


# --- composition ---------------------------------------------------------------


@dataclass(eq=False)
class FunctionCorrespondence:
    t_point: Pose
    t_plane: Pose
    t_axis: Pose
    chosen_offset: float
    t_func: Pose
    k_test_at_tf: FunctionalKeypoints
    residuals: dict = field(default_factory=dict)
    renderings: list[CandidateRendering] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t_point": self.t_point.to_list(),
            "t_plane": self.t_plane.to_list(),
            "t_axis": self.t_axis.to_list(),
            "chosen_offset_deg": math.degrees(self.chosen_offset),
            "t_func": self.t_func.to_list(),
            "k_test_at_tf": self.k_test_at_tf.to_dict(),
            "residuals": {k: float(v) for k, v in self.residuals.items()},
        }


def compose_function_correspondence(
    k_demo_tf: FunctionalKeypoints,
    k_test0: FunctionalKeypoints,
    q_eff: EffectPoint,
    cfg: AxisRefinementConfig,
    refiner: AxisRefiner,
    scene: RefinementScene | None = None,
) -> FunctionCorrespondence:
    """T_func = T_point . T_plane . T_axis (axis acts first), then the
    transformed keypoints are shifted so the function point lands on the
    effect point.

    Both rotations pivot about the test function point, so the point
    alignment survives them.
    """
    demo = build_function_plane(k_demo_tf)
    test = build_function_plane(k_test0)
    pivot = k_test0.func

    t_plane = align_plane(demo.n, test.n, pivot, tie_axis=demo.u)
    # the axis step acts before the plane step, so pull the demo axis back
    # into the test tool's own plane
    u_demo_pulled = t_plane.rotation.inv().apply(demo.u)
    t_axis0 = align_axis(u_demo_pulled, test.u, test.n, pivot)
    t_point = align_function_point(demo.origin, pivot)
    shift = q_eff.point - demo.origin
    t_axis, offset, renderings = refine_axis(
        t_axis0, test.n, pivot, cfg, refiner, scene, post=Pose.from_translation(shift) @ t_point @ t_plane
    )
    t_func = t_point @ t_plane @ t_axis

    rot = t_func.rotation
    expected_u = Rotation.from_axis_angle(demo.n, offset).apply(demo.u)
    residuals = {
        "function_point": float(np.linalg.norm(t_func.apply(pivot) - demo.origin)),
        "normal_dot": float(np.dot(demo.n, rot.apply(test.n))),
        "axis_dot": float(np.dot(demo.u, rot.apply(test.u))),
        "axis_error": float(np.linalg.norm(rot.apply(test.u) - expected_u)),
    }
    if residuals["function_point"] > CHECK_TOL * max(1.0, float(np.linalg.norm(demo.origin))):
        raise ConstraintViolation(f"function point residual {residuals['function_point']:.3g} m")
    if residuals["normal_dot"] < 1 - CHECK_TOL:
        raise ConstraintViolation(f"normal alignment residual {1 - residuals['normal_dot']:.3g}")
    if residuals["axis_error"] > CHECK_TOL:
        raise ConstraintViolation(f"axis alignment residual {residuals['axis_error']:.3g}")

    moved = t_func.apply(k_test0.as_array())
    moved = moved + (q_eff.point - moved[0])
    return FunctionCorrespondence(
        t_point=t_point,
        t_plane=t_plane,
        t_axis=t_axis,
        chosen_offset=offset,
        t_func=t_func,
        k_test_at_tf=FunctionalKeypoints.from_array(moved),
        residuals=residuals,
        renderings=renderings,
    )
