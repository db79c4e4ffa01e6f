"""Synthetic desk-scale demonstrations with known ground truth.

A parametric tool (mug or hammer) moves rigidly through
rest -> grasp -> still -> transport -> interaction. Every frame is
rendered with a z-buffer from a fixed camera to give amodal masks and
metric depth; tracked keypoints are surface points seen in frame 0 and
carried along the true motion. The world frame is the target frame
(z up, origin at the target's box center).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .extraction import (
    ExtractionConfig,
    detect_function_keyframe,
    detect_grasp_keyframe,
    find_prefunction_keyframe,
    sample_boundary_candidates,
    sample_tracking_keypoints,
)
from .errors import ExtractionError, FixtureError
from .geometry import CameraIntrinsics, Pose, Rotation, lift_to_3d, project_pinhole
from .keypoints import (
    SCHEMA_VERSION,
    DemoBundle,
    FunctionalKeypoints,
    TargetFrame,
    TaskSpec,
    encode_array,
    rle_encode,
)

KINDS = ("pour", "pound", "linear")
SPACING = 0.0015  # m between surface samples
DT = 0.1
TRACK_NOISE = 3e-4  # m
HAND_RADIUS = 7  # px
INTRINSICS = CameraIntrinsics(380.0, 380.0, 160.0, 120.0, 320, 240)
VIEW_MARGIN = 6  # px
CAMERA_POSITION = np.array([0.0, -0.75, 0.45])
CAMERA_LOOK_AT = np.array([0.0, 0.0, 0.05])
# the camera faces the robot across the table, so the robot sees the scene's x axis sideways
TARGET_TO_BASE = Pose(Rotation.from_axis_angle([0.0, 0.0, 1.0], math.pi / 2), [0.5, 0.0, 0.05])

TASKS = {
    "pour": TaskSpec("pour water from the mug into the bowl", "mug", "bowl"),
    "pound": TaskSpec("pound the block with the hammer", "hammer", "block"),
    "linear": TaskSpec("push the mug toward the bowl", "mug", "bowl"),
}


# --- shapes ---------------------------------------------------------------------


def _n(length: float) -> int:
    return max(2, int(math.ceil(length / SPACING)))


def cylinder_surface(radius: float, z0: float, z1: float, caps: tuple[bool, bool] = (True, True)) -> np.ndarray:
    th = np.linspace(0, 2 * np.pi, _n(2 * np.pi * radius), endpoint=False)
    z = np.linspace(z0, z1, _n(z1 - z0))
    tt, zz = np.meshgrid(th, z)
    pts = [np.stack([radius * np.cos(tt), radius * np.sin(tt), zz], -1).reshape(-1, 3)]
    for use, zc in zip(caps, (z0, z1)):
        if not use:
            continue
        for r in np.linspace(0, radius, _n(radius))[1:]:
            a = np.linspace(0, 2 * np.pi, _n(2 * np.pi * r), endpoint=False)
            pts.append(np.stack([r * np.cos(a), r * np.sin(a), np.full_like(a, zc)], -1))
    return np.concatenate(pts)


def box_surface(lo, hi) -> np.ndarray:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ga = np.linspace(lo[a], hi[a], _n(hi[a] - lo[a]))
        gb = np.linspace(lo[b], hi[b], _n(hi[b] - lo[b]))
        A, B = np.meshgrid(ga, gb)
        for c in (lo[axis], hi[axis]):
            p = np.zeros((A.size, 3))
            p[:, a] = A.ravel()
            p[:, b] = B.ravel()
            p[:, axis] = c
            pts.append(p)
    return np.concatenate(pts)


def tube_surface(centerline: np.ndarray, radius: float) -> np.ndarray:
    """Circular tube around a polyline."""
    pts = []
    for i in range(len(centerline)):
        j0, j1 = max(i - 1, 0), min(i + 1, len(centerline) - 1)
        t = centerline[j1] - centerline[j0]
        t /= np.linalg.norm(t)
        a = np.cross(t, [0.0, 1.0, 0.0])
        if np.linalg.norm(a) < 1e-6:
            a = np.cross(t, [1.0, 0.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(t, a)
        ang = np.linspace(0, 2 * np.pi, _n(2 * np.pi * radius), endpoint=False)
        pts.append(centerline[i] + radius * (np.outer(np.cos(ang), a) + np.outer(np.sin(ang), b)))
    return np.concatenate(pts)


@dataclass(eq=False)
class ToolModel:
    name: str
    points: np.ndarray  # body frame surface samples
    func: np.ndarray
    grasp: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.points.min(axis=0) + self.points.max(axis=0))

    def keypoints(self, pose: Pose) -> FunctionalKeypoints:
        return FunctionalKeypoints(pose.apply(self.func), pose.apply(self.grasp), pose.apply(self.center))


def mug_model(radius: float = 0.04, height: float = 0.10, handle: float = 0.03) -> ToolModel:
    body = cylinder_surface(radius, 0.0, height, caps=(True, False))
    phi = np.linspace(-np.pi / 2, np.pi / 2, _n(np.pi * handle))
    line = np.stack([radius + handle * np.cos(phi), np.zeros_like(phi), height / 2 + handle * np.sin(phi)], -1)
    pts = np.concatenate([body, tube_surface(line, 0.006)])
    return ToolModel("mug", pts, np.array([-radius, 0.0, height]), np.array([radius + handle, 0.0, height / 2]))


def hammer_model(length: float = 0.22, head: float = 0.08) -> ToolModel:
    zc = head / 2
    line = np.stack([np.linspace(0, length - 0.015, _n(length)), np.zeros(_n(length)), np.full(_n(length), zc)], -1)
    handle = tube_surface(line, 0.012)
    box = box_surface([length - 0.015, -0.015, 0.0], [length + 0.015, 0.015, head])
    pts = np.concatenate([handle, box])
    return ToolModel("hammer", pts, np.array([length, 0.0, 0.0]), np.array([0.04, 0.0, zc]))


# --- camera and rendering ------------------------------------------------------------


def camera_target_frame(position=CAMERA_POSITION, look_at=CAMERA_LOOK_AT) -> TargetFrame:
    """Target frame (= world) expressed in the camera frame."""
    z = look_at - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r_cw = np.column_stack([x, y, z])  # camera axes in world coordinates
    return TargetFrame(-r_cw.T @ position, Rotation.from_matrix(r_cw.T))


def render(objects: list[np.ndarray], frame: TargetFrame, k: CameraIntrinsics = INTRINSICS, radius: int = 1):
    """Z-buffer world-frame point sets.

    Returns (depth, amodal masks per object, visible id map with -1 for
    background).
    """
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if dx * dx + dy * dy <= radius * radius]
    hw = k.height * k.width
    masks = []
    lin_all, z_all, id_all = [], [], []
    for oid, pts in enumerate(objects):
        cam = frame.orientation.apply(pts) + frame.target_point
        cam = cam[cam[:, 2] > 1e-3]
        uv = np.rint(project_pinhole(cam, k)).astype(np.int64)
        u = np.concatenate([uv[:, 0] + dx for dx, _ in offs])
        v = np.concatenate([uv[:, 1] + dy for _, dy in offs])
        z = np.tile(cam[:, 2], len(offs))
        ok = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        lin = v[ok] * k.width + u[ok]
        m = np.zeros(hw, bool)
        m[lin] = True
        masks.append(m.reshape(k.height, k.width))
        lin_all.append(lin)
        z_all.append(z[ok])
        id_all.append(np.full(len(lin), oid))
    lin = np.concatenate(lin_all)
    z = np.concatenate(z_all)
    ids = np.concatenate(id_all)
    order = np.lexsort((z, lin))
    lin, z, ids = lin[order], z[order], ids[order]
    first = np.ones(len(lin), bool)
    first[1:] = lin[1:] != lin[:-1]
    depth = np.zeros(hw)
    visible = np.full(hw, -1)
    depth[lin[first]] = z[first]
    visible[lin[first]] = ids[first]
    return depth.reshape(k.height, k.width), masks, visible.reshape(k.height, k.width)


def in_view(points_world: np.ndarray, frame: TargetFrame, k: CameraIntrinsics = INTRINSICS) -> bool:
    cam = frame.orientation.apply(points_world) + frame.target_point
    if np.any(cam[:, 2] <= 0.05):
        return False
    uv = project_pinhole(cam, k)
    m = VIEW_MARGIN
    return bool(np.all((uv[:, 0] >= m) & (uv[:, 0] < k.width - m) & (uv[:, 1] >= m) & (uv[:, 1] < k.height - m)))


def disk_mask(center, radius: float, k: CameraIntrinsics = INTRINSICS) -> np.ndarray:
    rows, cols = np.indices((k.height, k.width))
    return (cols - center[0]) ** 2 + (rows - center[1]) ** 2 <= radius * radius


# --- motion -------------------------------------------------------------------


def _yaw(angle: float) -> Rotation:
    return Rotation.from_axis_angle([0, 0, 1], angle)


@dataclass(eq=False)
class Motion:
    poses: list[Pose]
    t_grasp: int
    t_function: int
    timestamps: np.ndarray


def _target(kind: str, rng) -> tuple[np.ndarray, np.ndarray]:
    """(surface points, dims) centred on the origin."""
    if kind == "pound":
        d = np.array([0.05, 0.05, 0.04]) * rng.uniform(0.9, 1.1)
        return box_surface(-d / 2, d / 2), d
    r = 0.06 * rng.uniform(0.9, 1.1)
    h = 0.08 * rng.uniform(0.9, 1.1)
    return cylinder_surface(r, -h / 2, h / 2), np.array([2 * r, 2 * r, h])


def _tool(kind: str, rng) -> ToolModel:
    if kind == "pound":
        return hammer_model(0.22 * rng.uniform(0.9, 1.1), 0.08 * rng.uniform(0.9, 1.1))
    return mug_model(0.04 * rng.uniform(0.9, 1.1), 0.10 * rng.uniform(0.9, 1.1), 0.03 * rng.uniform(0.9, 1.1))


def _rest_pose(tool: ToolModel, azimuth: float, radius: float, table_z: float, facing_in: bool) -> Pose:
    """Tool resting on the table; body +x points away from (or toward) the target."""
    yaw = azimuth + (math.pi if facing_in else 0.0)
    pos = np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), table_z])
    return Pose(_yaw(yaw), pos)


def make_motion(kind: str, tool: ToolModel, target_dims, rng) -> Motion:
    t_g = int(rng.integers(6, 10))
    t_s = t_g + int(rng.integers(4, 7))
    t_f = t_s + int(rng.integers(8, 12))
    n = t_f + int(rng.integers(16, 22))
    side = rng.choice([-1.0, 1.0])
    azimuth = float(rng.uniform(-math.radians(50), math.radians(30)))
    if side < 0:
        azimuth = math.pi - azimuth
    table_z = -target_dims[2] / 2
    top = target_dims[2] / 2
    if kind == "pound":
        # the hammer lies head-in, so its body origin sits a handle length farther out
        radius = float(np.linalg.norm(tool.func[:2])) + float(rng.uniform(0.12, 0.16))
    else:
        radius = float(rng.uniform(0.18, 0.22))
    start = _rest_pose(tool, azimuth, radius, table_z, facing_in=kind == "pound")
    # function point above the near part of the target at the end of transport
    radial = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    if kind == "pound":
        lift = 0.06
        func_pre = np.array([0.0, 0.0, top + lift]) + 0.005 * radial
    else:
        lift = 0.12
        func_pre = 0.02 * radial + np.array([0.0, 0.0, top + lift])
    r_pre = start.rotation
    pre = Pose(r_pre, func_pre - r_pre.apply(tool.func))
    poses = []
    for t in range(n):
        if t <= t_s:
            poses.append(start)
        elif t <= t_f:
            s = (t - t_s) / (t_f - t_s)
            poses.append(Pose(r_pre, (1 - s) * start.translation + s * pre.translation))
        else:
            tau = (t - t_f) * DT
            if kind == "linear":
                poses.append(Pose(r_pre, pre.translation - 0.05 * tau * radial))
                continue
            if kind == "pour":
                axis_body, pivot_body, rate = np.array([0.0, 1.0, 0.0]), tool.func, -0.6
            else:
                axis_body, pivot_body, rate = np.array([0.0, 1.0, 0.0]), tool.grasp, 0.3
            spin = Pose.rotation_about(Rotation.from_axis_angle(axis_body, rate * tau), pivot_body)
            drift = Pose.from_translation(-0.01 * tau * radial) if kind == "pour" else Pose.identity()
            poses.append(drift @ pre @ spin)
    return Motion(poses, t_g, t_f, DT * np.arange(n))


# --- assembly -------------------------------------------------------------------


@dataclass(eq=False)
class Fixture:
    bundle: DemoBundle
    truth: dict
    scene: dict
    config: dict


def _scene_render(tool: ToolModel, pose: Pose, target_pts, frame):
    return render([pose.apply(tool.points), target_pts], frame)


def make_test_scene(kind: str, demo_azimuth: float, target_dims, rng, frame: TargetFrame) -> tuple[dict, dict]:
    """Cross-tool test scene on the far side of the target; returns (scene, truth)."""
    tool = _tool(kind, rng)
    target_pts, dims = _target(kind, rng)
    for attempt in range(100):
        # widen the placement window if the opposite side keeps falling out of view
        spread = math.radians(30.0 + 60.0 * attempt / 99)
        azimuth = demo_azimuth + math.pi + float(rng.uniform(-spread, spread))
        radius = float(rng.uniform(0.16, 0.2))
        if kind == "pound":
            radius = float(np.linalg.norm(tool.func[:2])) + radius - 0.04
        pose = _rest_pose(tool, azimuth, radius, -dims[2] / 2, facing_in=kind == "pound")
        if in_view(pose.apply(tool.points[::7]), frame):
            break
    else:
        raise FixtureError("could not place the test tool in view")
    depth, (tool_mask, target_mask), _ = _scene_render(tool, pose, target_pts, frame)
    kp = tool.keypoints(pose)
    centers = {}
    for role, p in (("func", kp.func), ("grasp", kp.grasp)):
        centers[role] = [float(x) for x in project_pinhole(frame.orientation.apply(p) + frame.target_point, INTRINSICS)]
    scene = {
        "schema_version": SCHEMA_VERSION,
        "intrinsics": INTRINSICS.to_dict(),
        "target_frame": frame.to_dict(),
        "target_dims": [float(x) for x in dims],
        "target_to_base": TARGET_TO_BASE.to_list(),
        "tool_mask": rle_encode(tool_mask),
        "target_mask": rle_encode(target_mask),
        "depth": encode_array(depth),
        "obstacles": [],
    }
    truth = {"tool_pose": pose.to_list(), "keypoints": kp.to_dict(), "region_centers": centers}
    return scene, truth


def make_fixture(kind: str, seed: int = 0) -> Fixture:
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    frame = camera_target_frame()
    tool = _tool(kind, rng)
    target_pts, dims = _target(kind, rng)
    for _ in range(50):
        motion = make_motion(kind, tool, dims, rng)
        if all(in_view(p.apply(tool.points[::7]), frame) for p in motion.poses):
            break
    else:
        raise FixtureError("could not place the demonstration in view")
    n = len(motion.poses)

    depth, tool_masks, target_masks, hand_masks = [], [], [], []
    visible0 = None
    for t, pose in enumerate(motion.poses):
        d, (tm, gm), vis = _scene_render(tool, pose, target_pts, frame)
        if t == 0:
            visible0 = vis == 0
        depth.append(d)
        tool_masks.append(tm)
        target_masks.append(gm)
        if t >= motion.t_grasp:
            g = frame.orientation.apply(pose.apply(tool.grasp)) + frame.target_point
            hand_masks.append(disk_mask(project_pinhole(g, INTRINSICS), HAND_RADIUS))
        else:
            hand_masks.append(np.zeros_like(tm))
    depth = np.stack(depth)

    # tracked points: visible tool pixels in frame 0, carried by the true motion
    px = sample_tracking_keypoints(visible0, 32, seed)
    cam0 = lift_to_3d(px.astype(float), depth[0][px[:, 1], px[:, 0]], INTRINSICS)
    world0 = frame.orientation.inv().apply(cam0 - frame.target_point)
    body = motion.poses[0].inv().apply(world0)
    noise = 0.0 if kind == "linear" else TRACK_NOISE
    frames = np.stack([frame.orientation.apply(p.apply(body)) + frame.target_point for p in motion.poses])
    frames = frames + noise * rng.standard_normal(frames.shape)

    task = TASKS[kind]
    bundle = DemoBundle(
        timestamps=motion.timestamps,
        frames=frames,
        tool_masks=np.stack(tool_masks),
        target_masks=np.stack(target_masks),
        hand_masks=np.stack(hand_masks),
        intrinsics=INTRINSICS,
        task=task,
        depth=depth.astype(np.float32).astype(float),
        target_frame=frame,
        target_dims=dims,
    )

    cfg = ExtractionConfig(seed=seed)
    truth_tp = None
    try:
        truth_tp = find_prefunction_keyframe(
            bundle.tool_masks, bundle.target_masks, motion.t_function, cfg.iou_threshold, motion.t_grasp
        )
    except ExtractionError:
        pass
    # the scripted selector answers for whatever frame extraction will pick
    try:
        tracks_t = frame.orientation.inv().apply(frames - frame.target_point)
        t_f_hat = detect_function_keyframe(tracks_t, None, motion.timestamps)
        t_g_hat, _ = detect_grasp_keyframe(bundle.hand_masks, bundle.tool_masks)
        t_p_hat = find_prefunction_keyframe(bundle.tool_masks, bundle.target_masks, t_f_hat, cfg.iou_threshold, t_g_hat)
    except ExtractionError:
        t_p_hat = truth_tp if truth_tp is not None else motion.t_function - 1
    cands = sample_boundary_candidates(bundle.tool_masks[t_p_hat], cfg.n_candidates, cfg.seed)
    f_world = motion.poses[t_p_hat].apply(tool.func)
    f_px = project_pinhole(frame.orientation.apply(f_world) + frame.target_point, INTRINSICS)
    sel = int(np.argmin(np.linalg.norm(cands - f_px, axis=1)))

    p0 = motion.poses[0].translation
    demo_azimuth = math.atan2(p0[1], p0[0])
    scene, scene_truth = make_test_scene(kind, demo_azimuth, dims, rng, frame)

    truth = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "seed": seed,
        "keyframes": {"t_grasp": motion.t_grasp, "t_prefunction": truth_tp, "t_function": motion.t_function},
        "n_frames": n,
        "tool_poses": [p.to_list() for p in motion.poses],
        "keypoints": [tool.keypoints(p).to_dict() for p in motion.poses],
        "step_transforms": [(motion.poses[t + 1] @ motion.poses[t].inv()).to_list() for t in range(n - 1)],
        "target_dims": [float(x) for x in dims],
        "test_scene": scene_truth,
    }
    config = {
        "seed": seed,
        "ports": {
            "kind": "mock",
            "selector_script": {task.instruction: sel},
            "region_centers": scene_truth["region_centers"],
            "refiner_angle_deg": 0.0,
        },
    }
    return Fixture(bundle, truth, scene, config)
