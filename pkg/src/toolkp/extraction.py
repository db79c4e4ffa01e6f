"""Stage 1: keyframes and functional keypoints from a demonstration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    BoundaryTooSmall,
    DegenerateConfiguration,
    ExtractionError,
    IndexOutOfRange,
    MaskTooSmall,
    MissingDepth,
    NoChangeDetected,
    NoGraspContact,
    NoPrefunctionFrame,
    SelectorOutOfRange,
)
from .geometry import CameraIntrinsics, Pose, estimate_rigid, lift_to_3d
from .keypoints import (
    SCHEMA_VERSION,
    DemoBundle,
    EffectPoint,
    FunctionalKeypoints,
    KeypointTrajectory,
    TargetFrame,
    TaskSpec,
    bounding_dims,
    compute_center,
    to_target_frame,
)
from .ports import FrameContext, FunctionPointSelector


@dataclass(frozen=True)
class KeyframeSet:
    t_grasp: int
    t_prefunction: int
    t_function: int
    n_frames: int
    t_init: int = 0

    def __post_init__(self):
        if not 0 < self.t_grasp < self.t_prefunction < self.t_function < self.n_frames - 1:
            raise ExtractionError(
                f"keyframes violate 0 < t_g < t_p < t_f < N-1: "
                f"t_g={self.t_grasp}, t_p={self.t_prefunction}, t_f={self.t_function}, N={self.n_frames}"
            )

    def to_dict(self) -> dict:
        return {
            "t_init": self.t_init,
            "t_grasp": self.t_grasp,
            "t_prefunction": self.t_prefunction,
            "t_function": self.t_function,
        }


@dataclass
class ExtractionConfig:
    n_track: int = 32
    n_candidates: int = 8
    iou_threshold: float = 0.05
    # Multiplier on var(speed signal); None means 3 * log(n).
    changepoint_penalty: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_track < 3:
            raise ValueError("n_track must be >= 3")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.changepoint_penalty is not None and self.changepoint_penalty < 0:
            raise ValueError("changepoint_penalty must be >= 0")


# --- sampling --------------------------------------------------------------------


def sample_tracking_keypoints(mask: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """``n`` distinct in-mask pixels (u, v): a regular grid clipped to the
    mask, thinned evenly or topped up with seeded uniform draws."""
    mask = np.asarray(mask, bool)
    rows, cols = np.nonzero(mask)
    m = len(rows)
    if m < n:
        raise MaskTooSmall(f"mask has {m} pixels, need {n}")
    stride = max(1, int(math.sqrt(m / n)))
    off = stride // 2
    on_grid = ((rows - off) % stride == 0) & ((cols - off) % stride == 0)
    grid_idx = np.flatnonzero(on_grid)
    if len(grid_idx) >= n:
        pick = grid_idx[np.linspace(0, len(grid_idx) - 1, n).round().astype(int)]
    else:
        rest = np.flatnonzero(~on_grid)
        rng = np.random.default_rng(seed)
        extra = rng.choice(rest, size=n - len(grid_idx), replace=False)
        pick = np.concatenate([grid_idx, np.sort(extra)])
    return np.stack([cols[pick], rows[pick]], axis=1)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """In-mask pixels with a 4-neighbour outside the mask or the image; (u, v)."""
    m = np.asarray(mask, bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    rows, cols = np.nonzero(m & ~interior)
    return np.stack([cols, rows], axis=1)


def farthest_point_sampling(points: np.ndarray, n: int, start: int) -> np.ndarray:
    """Indices of ``n`` points chosen greedily farthest from the chosen set."""
    pts = np.asarray(points, float)
    chosen = [start]
    d = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(chosen)


def sample_boundary_candidates(mask: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """FPS over the mask boundary, started at the boundary pixel nearest the
    mask centroid. ``seed`` fixes the order used to break distance ties."""
    b = boundary_pixels(mask)
    if len(b) < n:
        raise BoundaryTooSmall(f"boundary has {len(b)} pixels, need {n}")
    b = b[np.random.default_rng(seed).permutation(len(b))]
    rows, cols = np.nonzero(mask)
    centroid = np.array([cols.mean(), rows.mean()])
    start = int(np.argmin(np.linalg.norm(b - centroid, axis=1)))
    return b[farthest_point_sampling(b, n, start)]


# --- tracking ------------------------------------------------------------------


def transforms_from_tracks(tracks) -> list[Pose]:
    """Per-step rigid transforms mapping frame t points onto frame t+1."""
    tracks = np.asarray(tracks, float)
    if tracks.ndim != 3 or tracks.shape[2] != 3:
        raise ValueError("tracks must have shape (N, N_k, 3)")
    out = []
    for t in range(len(tracks) - 1):
        try:
            out.append(estimate_rigid(tracks[t], tracks[t + 1]))
        except DegenerateConfiguration as exc:
            raise DegenerateConfiguration(f"frame {t}: {exc}", frame_index=t) from exc
    return out


def registration_residuals(tracks, step_poses) -> np.ndarray:
    tracks = np.asarray(tracks, float)
    return np.array(
        [np.sqrt(np.mean(np.sum((p.apply(tracks[t]) - tracks[t + 1]) ** 2, axis=1))) for t, p in enumerate(step_poses)]
    )


# --- change points ----------------------------------------------------------------


def _l2_cost_fn(signal: np.ndarray):
    x = signal - signal.mean()
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def cost(s, t):
        n = t - s
        return max(s2[t] - s2[s] - (s1[t] - s1[s]) ** 2 / n, 0.0)

    return cost


def pelt(signal, penalty: float, min_size: int = 2) -> list[int]:
    """Exact penalized segmentation (PELT) under a piecewise-constant-mean
    L2 cost. Returns change indices, i.e. the first sample of each new
    segment, in increasing order."""
    x = np.asarray(signal, float).reshape(-1)
    n = len(x)
    if n < 2 * min_size:
        return []
    cost = _l2_cost_fn(x)
    f = np.full(n + 1, np.inf)
    f[0] = -penalty
    last = np.zeros(n + 1, dtype=int)
    cands = [0]
    for t in range(min_size, n + 1):
        admissible = [s for s in cands if t - s >= min_size]
        vals = [f[s] + cost(s, t) + penalty for s in admissible]
        i = int(np.argmin(vals))
        f[t] = vals[i]
        last[t] = admissible[i]
        cands = [s for s in cands if t - s < min_size or f[s] + cost(s, t) <= f[t]]
        if t <= n - min_size:
            cands.append(t)
    cps = []
    t = n
    while t > 0:
        s = last[t]
        if s > 0:
            cps.append(int(s))
        t = s
    return sorted(cps)


def speed_signal(tracks, timestamps=None) -> np.ndarray:
    """Mean keypoint speed per step: s_t = mean_i |p_i(t+1) - p_i(t)| / dt_t."""
    tracks = np.asarray(tracks, float)
    n = len(tracks)
    dt = np.ones(n - 1) if timestamps is None else np.diff(np.asarray(timestamps, float))
    return np.linalg.norm(np.diff(tracks, axis=0), axis=2).mean(axis=1) / dt


def last_change_point(signal, penalty: float | None = None) -> int:
    """Index of the last mean change in ``signal``.

    ``penalty`` multiplies var(signal); the default multiplier is 3 log(n).
    """
    x = np.asarray(signal, float)
    var = float(np.var(x))
    if var <= 1e-24 * max(1.0, float(np.mean(x * x))):
        raise NoChangeDetected("speed signal is constant")
    beta = 3.0 * math.log(len(x)) if penalty is None else float(penalty)
    cps = pelt(x, beta * var)
    if not cps:
        raise NoChangeDetected("no change point survives the penalty")
    return cps[-1]


def detect_function_keyframe(tracks, penalty: float | None = None, timestamps=None) -> int:
    tracks = np.asarray(tracks, float)
    if len(tracks) < 8:
        raise ExtractionError(f"need at least 8 frames for change detection, got {len(tracks)}")
    return last_change_point(speed_signal(tracks, timestamps), penalty)


# --- masks ---------------------------------------------------------------------


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 0.0 if union == 0 else np.count_nonzero(a & b) / union


def detect_grasp_keyframe(hand_masks, tool_masks) -> tuple[int, np.ndarray]:
    """Earliest frame with hand/tool contact and the contact centroid (u, v)."""
    for t, (h, m) in enumerate(zip(hand_masks, tool_masks)):
        overlap = np.asarray(h, bool) & np.asarray(m, bool)
        if overlap.any():
            rows, cols = np.nonzero(overlap)
            return t, np.array([cols.mean(), rows.mean()])
    raise NoGraspContact("hand and tool masks never intersect")


def find_prefunction_keyframe(tool_masks, target_masks, t_f: int, iou_threshold: float, t_g: int = 0) -> int:
    """Latest frame in (t_g, t_f) where tool/target IoU is below the threshold."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not 0 <= t_f < len(tool_masks):
        raise IndexOutOfRange(f"t_f={t_f} outside the demonstration")
    for t in range(t_f - 1, t_g, -1):
        if iou(np.asarray(tool_masks[t], bool), np.asarray(target_masks[t], bool)) < iou_threshold:
            return t
    raise NoPrefunctionFrame(f"no frame in ({t_g}, {t_f}) has IoU below {iou_threshold}")


# --- keypoints -----------------------------------------------------------------


def depth_at(depth: np.ndarray | None, pixel) -> float:
    if depth is None:
        raise MissingDepth("no depth available")
    u, v = (int(round(c)) for c in pixel)
    h, w = depth.shape
    if not (0 <= v < h and 0 <= u < w):
        raise MissingDepth(f"pixel {(u, v)} outside the depth image")
    d = float(depth[v, u])
    if not d > 0 or not math.isfinite(d):
        raise MissingDepth(f"invalid depth {d} at pixel {(u, v)}")
    return d


def _choose_function_point(candidates, context, selector, task, target_frame):
    candidates = np.asarray(candidates)
    if len(candidates) < 2:
        raise ValueError("need at least 2 candidates")
    idx = selector.select(context, candidates, task)
    if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(candidates):
        raise SelectorOutOfRange(f"selector returned {idx!r} for {len(candidates)} candidates")
    px = candidates[int(idx)].astype(float)
    p = lift_to_3d(px, depth_at(context.depth, px), context.intrinsics)
    if target_frame is not None:
        p = to_target_frame(p, target_frame)
    return int(idx), px, p


def detect_function_point(
    candidates: np.ndarray,
    context: FrameContext,
    selector: FunctionPointSelector,
    task: TaskSpec,
    target_frame: TargetFrame | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ask the selector which candidate is the function point and lift it.

    Returns the chosen pixel and its 3D position (target frame when
    ``target_frame`` is given, camera frame otherwise).
    """
    _, px, p = _choose_function_point(candidates, context, selector, task, target_frame)
    return px, p


def propagate_keypoints(
    detections: Mapping[str, tuple[int, np.ndarray]], step_poses, timestamps
) -> KeypointTrajectory:
    """Carry each detected keypoint along the step transforms to every frame.

    ``detections`` maps role -> (detection frame, point). Values at the
    detection frame are kept bit-exact.
    """
    n = len(step_poses) + 1
    per_role = {}
    for role in ("func", "grasp", "center"):
        d, p = detections[role]
        if not 0 <= d < n:
            raise IndexOutOfRange(f"{role} detected at frame {d}, outside [0, {n})")
        pts = [None] * n
        pts[d] = np.asarray(p, float)
        for t in range(d, n - 1):
            pts[t + 1] = step_poses[t].apply(pts[t])
        for t in range(d, 0, -1):
            pts[t - 1] = step_poses[t - 1].inv().apply(pts[t])
        per_role[role] = pts
    kps = [FunctionalKeypoints(per_role["func"][t], per_role["grasp"][t], per_role["center"][t]) for t in range(n)]
    return KeypointTrajectory(np.asarray(timestamps, float), kps)


def extract_effect_point(traj: KeypointTrajectory, t_f: int) -> EffectPoint:
    if not 0 <= t_f < len(traj):
        raise IndexOutOfRange(f"t_f={t_f} outside [0, {len(traj)})")
    return EffectPoint(traj.keypoints[t_f].func)


# --- whole stage -----------------------------------------------------------------


def masked_cloud(mask: np.ndarray, depth: np.ndarray | None, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for in-mask pixels with valid depth."""
    if depth is None:
        raise MissingDepth("no depth available")
    valid = np.asarray(mask, bool) & (depth > 0) & np.isfinite(depth)
    rows, cols = np.nonzero(valid)
    if len(rows) == 0:
        return np.zeros((0, 3))
    return lift_to_3d(np.stack([cols, rows], axis=1).astype(float), depth[rows, cols], k)


def estimate_target_frame(bundle: DemoBundle) -> TargetFrame:
    """Camera-aligned frame at the bounding-box center of the frame-0 target cloud."""
    cloud = masked_cloud(bundle.target_masks[0], None if bundle.depth is None else bundle.depth[0], bundle.intrinsics)
    return TargetFrame(compute_center(cloud))


@dataclass(eq=False)
class Extraction:
    keyframes: KeyframeSet
    trajectory: KeypointTrajectory
    effect_point: EffectPoint
    step_poses: list[Pose]
    target_frame: TargetFrame
    target_dims: np.ndarray
    intrinsics: CameraIntrinsics
    task: TaskSpec
    function_candidates: np.ndarray
    function_index: int
    function_pixel: np.ndarray
    grasp_pixel: np.ndarray
    registration_rms: np.ndarray

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "keyframes": self.keyframes.to_dict(),
            "n_frames": len(self.trajectory),
            "timestamps": [float(t) for t in self.trajectory.timestamps],
            "keypoints": [k.to_dict() for k in self.trajectory.keypoints],
            "effect_point": [float(x) for x in self.effect_point.point],
            "step_poses": [p.to_list() for p in self.step_poses],
            "target_frame": self.target_frame.to_dict(),
            "target_dims": [float(x) for x in self.target_dims],
            "intrinsics": self.intrinsics.to_dict(),
            "task": self.task.to_dict(),
            "function_candidates": [[int(c) for c in px] for px in self.function_candidates],
            "function_index": int(self.function_index),
            "function_pixel": [float(x) for x in self.function_pixel],
            "grasp_pixel": [float(x) for x in self.grasp_pixel],
            "registration_rms": [float(x) for x in self.registration_rms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Extraction:
        n = int(d["n_frames"])
        kf = d["keyframes"]
        ts = d["timestamps"]
        return cls(
            keyframes=KeyframeSet(kf["t_grasp"], kf["t_prefunction"], kf["t_function"], n),
            trajectory=KeypointTrajectory(ts, [FunctionalKeypoints.from_dict(k) for k in d["keypoints"]]),
            effect_point=EffectPoint(d["effect_point"]),
            step_poses=[Pose.from_list(p) for p in d["step_poses"]],
            target_frame=TargetFrame.from_dict(d["target_frame"]),
            target_dims=np.asarray(d["target_dims"], float),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            task=TaskSpec(**d["task"]),
            function_candidates=np.asarray(d["function_candidates"], int),
            function_index=int(d["function_index"]),
            function_pixel=np.asarray(d["function_pixel"], float),
            grasp_pixel=np.asarray(d["grasp_pixel"], float),
            registration_rms=np.asarray(d["registration_rms"], float),
        )


def extract(bundle: DemoBundle, cfg: ExtractionConfig, selector: FunctionPointSelector) -> Extraction:
    """Run the whole extraction stage on one demonstration."""
    n = len(bundle)
    if bundle.depth is None:
        raise MissingDepth("the bundle carries no depth maps")
    frame = bundle.target_frame or estimate_target_frame(bundle)
    tracks = to_target_frame(bundle.frames, frame)
    step_poses = transforms_from_tracks(tracks)

    if bundle.keyframes is not None:
        t_g = int(bundle.keyframes["t_grasp"])
        t_p = int(bundle.keyframes["t_prefunction"])
        t_f = int(bundle.keyframes["t_function"])
        overlap = bundle.hand_masks[t_g] & bundle.tool_masks[t_g]
        if not overlap.any():
            raise NoGraspContact(f"no hand/tool contact at the given grasp frame {t_g}")
        rows, cols = np.nonzero(overlap)
        grasp_px = np.array([cols.mean(), rows.mean()])
    else:
        t_f = detect_function_keyframe(tracks, cfg.changepoint_penalty, bundle.timestamps)
        t_g, grasp_px = detect_grasp_keyframe(bundle.hand_masks, bundle.tool_masks)
        t_p = find_prefunction_keyframe(bundle.tool_masks, bundle.target_masks, t_f, cfg.iou_threshold, t_g)
    keyframes = KeyframeSet(t_g, t_p, t_f, n)

    # grasp depth: median over the contact region, robust to a hole at the centroid
    overlap = bundle.hand_masks[t_g] & bundle.tool_masks[t_g]
    d = bundle.depth[t_g][overlap]
    d = d[(d > 0) & np.isfinite(d)]
    if len(d) == 0:
        raise MissingDepth(f"no valid depth in the contact region at frame {t_g}")
    grasp = to_target_frame(lift_to_3d(grasp_px, float(np.median(d)), bundle.intrinsics), frame)

    candidates = sample_boundary_candidates(bundle.tool_masks[t_p], cfg.n_candidates, cfg.seed)
    ctx = FrameContext(
        intrinsics=bundle.intrinsics,
        tool_mask=bundle.tool_masks[t_p],
        target_mask=bundle.target_masks[t_p],
        depth=bundle.depth[t_p],
        index=t_p,
    )
    idx, func_px, func = _choose_function_point(candidates, ctx, selector, bundle.task, frame)

    tool_cloud = masked_cloud(bundle.tool_masks[0], bundle.depth[0], bundle.intrinsics)
    center = compute_center(to_target_frame(tool_cloud, frame))

    traj = propagate_keypoints(
        {"func": (t_p, func), "grasp": (t_g, grasp), "center": (0, center)}, step_poses, bundle.timestamps
    )
    if bundle.target_dims is not None:
        dims = np.asarray(bundle.target_dims, float)
    else:
        target_cloud = masked_cloud(bundle.target_masks[0], bundle.depth[0], bundle.intrinsics)
        dims = bounding_dims(to_target_frame(target_cloud, frame))
    return Extraction(
        keyframes=keyframes,
        trajectory=traj,
        effect_point=extract_effect_point(traj, t_f),
        step_poses=step_poses,
        target_frame=frame,
        target_dims=dims,
        intrinsics=bundle.intrinsics,
        task=bundle.task,
        function_candidates=candidates,
        function_index=int(idx),
        function_pixel=func_px,
        grasp_pixel=grasp_px,
        registration_rms=registration_residuals(tracks, step_poses),
    )

