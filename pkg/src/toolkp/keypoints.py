"""Functional keypoints, target frames, and the demonstration bundle."""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateKeypoints, EmptyCloud, NonPositiveDimension, SchemaError
from .geometry import CameraIntrinsics, Pose, Rotation

SCHEMA_VERSION = 1
COLLINEAR_EPS = 1e-6  # m^2, on |(func - center) x (grasp - func)|
ROLES = ("func", "grasp", "center")


def _vec3(v, name: str) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite, got {a}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FunctionalKeypoints:
    """Function, grasp and center points of one tool, in the target frame."""

    func: np.ndarray
    grasp: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        for name in ROLES:
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        cross = np.cross(self.func - self.center, self.grasp - self.func)
        if np.linalg.norm(cross) <= COLLINEAR_EPS:
            raise DegenerateKeypoints("functional keypoints are collinear")

    @classmethod
    def from_array(cls, a) -> FunctionalKeypoints:
        a = np.asarray(a, float).reshape(3, 3)
        return cls(a[0], a[1], a[2])

    def as_array(self) -> np.ndarray:
        """Rows: func, grasp, center."""
        return np.stack([self.func, self.grasp, self.center])

    def transformed(self, pose: Pose) -> FunctionalKeypoints:
        return FunctionalKeypoints.from_array(pose.apply(self.as_array()))

    def translated(self, offset) -> FunctionalKeypoints:
        return FunctionalKeypoints.from_array(self.as_array() + np.asarray(offset, float))

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ROLES}

    @classmethod
    def from_dict(cls, d: dict) -> FunctionalKeypoints:
        return cls(d["func"], d["grasp"], d["center"])


def plane_axes(k: FunctionalKeypoints) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit function axis u (center -> func), grasp vector v (func -> grasp)
    and plane normal n = u x v / |u x v|."""
    u = k.func - k.center
    v = k.grasp - k.func
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateKeypoints("coincident functional keypoints")
    u = u / nu
    v = v / nv
    n = np.cross(u, v)
    nn = np.linalg.norm(n)
    if nn < COLLINEAR_EPS:
        raise DegenerateKeypoints("functional keypoints are collinear")
    return u, v, n / nn


def pose_from_keypoints(k: FunctionalKeypoints) -> Pose:
    """Tool pose: origin at the function point, rotation columns [u, n x u, n]."""
    u, _, n = plane_axes(k)
    m = np.column_stack([u, np.cross(n, u), n])
    return Pose(Rotation.from_matrix(m), k.func)


@dataclass(frozen=True, eq=False)
class TargetFrame:
    """Target frame expressed in the camera frame.

    ``orientation`` maps target-frame directions into camera-frame ones.
    """

    target_point: np.ndarray
    orientation: Rotation = field(default_factory=Rotation.identity)

    def __post_init__(self):
        object.__setattr__(self, "target_point", _vec3(self.target_point, "target_point"))

    def camera_to_target(self) -> Pose:
        return self.target_to_camera().inv()

    def target_to_camera(self) -> Pose:
        return Pose(self.orientation, self.target_point)

    def to_dict(self) -> dict:
        return {
            "target_point": [float(x) for x in self.target_point],
            "orientation": [float(x) for x in self.orientation.wxyz],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TargetFrame:
        return cls(d["target_point"], Rotation(d.get("orientation", [1.0, 0.0, 0.0, 0.0])))


def to_target_frame(points, frame: TargetFrame) -> np.ndarray:
    p = np.asarray(points, float)
    return frame.orientation.inv().apply(p - frame.target_point)


def from_target_frame(points, frame: TargetFrame) -> np.ndarray:
    return frame.orientation.apply(np.asarray(points, float)) + frame.target_point


def compute_center(point_cloud) -> np.ndarray:
    """Axis-aligned bounding-box center."""
    p = np.asarray(point_cloud, float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("cannot compute the center of an empty cloud")
    return 0.5 * (p.min(axis=0) + p.max(axis=0))


def bounding_dims(point_cloud) -> np.ndarray:
    p = np.asarray(point_cloud, float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("cannot measure an empty cloud")
    return p.max(axis=0) - p.min(axis=0)


@dataclass(frozen=True, eq=False)
class EffectPoint:
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _vec3(self.point, "effect point"))


def scale_effect_point(p_eff: EffectPoint, demo_target_dims, test_target_dims) -> EffectPoint:
    demo = np.asarray(demo_target_dims, float).reshape(3)
    test = np.asarray(test_target_dims, float).reshape(3)
    if np.any(~(demo > 0)) or np.any(~(test > 0)):
        raise NonPositiveDimension("target dimensions must be positive")
    return EffectPoint(p_eff.point * (test / demo))


@dataclass(frozen=True, eq=False)
class KeypointTrajectory:
    timestamps: np.ndarray
    keypoints: tuple[FunctionalKeypoints, ...]

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        if len(ts) < 2:
            raise ValueError("a keypoint trajectory needs at least 2 samples")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(self.keypoints) != len(ts):
            raise ValueError("timestamps and keypoints differ in length")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def __len__(self) -> int:
        return len(self.timestamps)

    def as_array(self) -> np.ndarray:
        """(N, 3, 3): frame, role (func, grasp, center), xyz."""
        return np.stack([k.as_array() for k in self.keypoints])


# --- mask and depth codecs ---------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1).astype(np.int8)
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"shape": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = (int(x) for x in rle["shape"])
        counts = np.asarray(rle["counts"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad run-length mask: {exc}") from exc
    if counts.sum() != h * w or np.any(counts < 0):
        raise SchemaError("run-length counts do not cover the mask shape")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float32)
    data = zlib.compress(a.astype("<f4").tobytes(), 6)
    return {"shape": list(a.shape), "dtype": "float32", "zlib_b64": base64.b64encode(data).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = zlib.decompress(base64.b64decode(d["zlib_b64"]))
        return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float64)
    except (KeyError, ValueError, zlib.error, TypeError) as exc:
        raise SchemaError(f"bad encoded array: {exc}") from exc


# --- demonstration bundle ------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    instruction: str
    object_grasped: str
    object_unattached: str

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "object_grasped": self.object_grasped,
            "object_unattached": self.object_unattached,
        }


@dataclass(eq=False)
class DemoBundle:
    """A recorded demonstration.

    ``frames`` holds tracked 3D keypoints per frame in the camera frame,
    shape (N, N_k, 3). Masks are boolean (N, H, W) stacks; ``depth`` is an
    optional (N, H, W) metric depth stack with 0 marking invalid pixels.
    """

    timestamps: np.ndarray
    frames: np.ndarray
    tool_masks: np.ndarray
    target_masks: np.ndarray
    hand_masks: np.ndarray
    intrinsics: CameraIntrinsics
    task: TaskSpec
    depth: np.ndarray | None = None
    target_frame: TargetFrame | None = None
    target_dims: np.ndarray | None = None
    keyframes: dict | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        self.frames = np.asarray(self.frames, float)
        n = len(self.timestamps)
        if n < 4:
            raise SchemaError(f"a demonstration needs at least 4 frames, got {n}")
        if np.any(np.diff(self.timestamps) <= 0):
            raise SchemaError("timestamps must be strictly increasing")
        lengths = {len(self.frames), len(self.tool_masks), len(self.target_masks), len(self.hand_masks)}
        if self.depth is not None:
            lengths.add(len(self.depth))
        if lengths != {n}:
            raise SchemaError("per-frame lists differ in length")
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise SchemaError("frames must have shape (N, N_k, 3)")
        if self.keyframes is not None:
            tg, tp, tf = (self.keyframes[k] for k in ("t_grasp", "t_prefunction", "t_function"))
            if not 0 < tg < tp < tf < n - 1:
                raise SchemaError("keyframes violate 0 < t_g < t_p < t_f < N-1")

    def __len__(self) -> int:
        return len(self.timestamps)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "intrinsics": self.intrinsics.to_dict(),
            "task": self.task.to_dict(),
            "timestamps": [float(t) for t in self.timestamps],
            "frames": [[[float(x) for x in p] for p in f] for f in self.frames],
            "masks": {
                "tool": [rle_encode(m) for m in self.tool_masks],
                "target": [rle_encode(m) for m in self.target_masks],
                "hand": [rle_encode(m) for m in self.hand_masks],
            },
        }
        if self.depth is not None:
            d["depth"] = [encode_array(x) for x in self.depth]
        if self.target_frame is not None:
            d["target_frame"] = self.target_frame.to_dict()
        if self.target_dims is not None:
            d["target_dims"] = [float(x) for x in self.target_dims]
        if self.keyframes is not None:
            d["keyframes"] = {k: int(v) for k, v in self.keyframes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DemoBundle:
        if not isinstance(d, dict):
            raise SchemaError("bundle must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {d.get('schema_version')!r}")
        try:
            masks = d["masks"]
            bundle = cls(
                timestamps=d["timestamps"],
                frames=d["frames"],
                tool_masks=np.stack([rle_decode(m) for m in masks["tool"]]),
                target_masks=np.stack([rle_decode(m) for m in masks["target"]]),
                hand_masks=np.stack([rle_decode(m) for m in masks["hand"]]),
                intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
                task=TaskSpec(**d["task"]),
                depth=np.stack([decode_array(x) for x in d["depth"]]) if "depth" in d else None,
                target_frame=TargetFrame.from_dict(d["target_frame"]) if "target_frame" in d else None,
                target_dims=np.asarray(d["target_dims"], float) if "target_dims" in d else None,
                keyframes=d.get("keyframes"),
            )
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed bundle: {exc!r}") from exc
        return bundle

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> DemoBundle:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"bundle is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
