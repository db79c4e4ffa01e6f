"""Rigid-body math: unit-quaternion rotations, SE(3) poses, registration,
and pinhole projection.

Quaternions are stored as (w, x, y, z) with the sign fixed so that w >= 0.
All angles are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth, PointBehindCamera

SLERP_PARALLEL_EPS = 1e-6


def _canonical(q: np.ndarray) -> np.ndarray:
    if q[0] < 0:
        return -q
    if q[0] == 0:
        # w == 0: first nonzero vector component decides
        for c in q[1:]:
            if c != 0:
                return -q if c < 0 else q
    return q


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) wxyz arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(..., 4) wxyz -> (..., 3, 3)."""
    q = np.asarray(q, float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation matrices -> (..., 4) unit wxyz with w >= 0.

    Branches on the largest of (trace, diagonal) for conditioning.
    """
    m = np.asarray(m, float)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    q = np.empty((m.shape[0], 4))
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([tr, m00, m11, m22], axis=1)
    pick = np.argmax(cand, axis=1)

    i = pick == 0
    s = np.sqrt(np.maximum(tr[i] + 1.0, 0.0)) * 2
    q[i, 0] = 0.25 * s
    q[i, 1] = (m[i, 2, 1] - m[i, 1, 2]) / s
    q[i, 2] = (m[i, 0, 2] - m[i, 2, 0]) / s
    q[i, 3] = (m[i, 1, 0] - m[i, 0, 1]) / s

    i = pick == 1
    s = np.sqrt(np.maximum(1.0 + m00[i] - m11[i] - m22[i], 0.0)) * 2
    q[i, 0] = (m[i, 2, 1] - m[i, 1, 2]) / s
    q[i, 1] = 0.25 * s
    q[i, 2] = (m[i, 0, 1] + m[i, 1, 0]) / s
    q[i, 3] = (m[i, 0, 2] + m[i, 2, 0]) / s

    i = pick == 2
    s = np.sqrt(np.maximum(1.0 + m11[i] - m00[i] - m22[i], 0.0)) * 2
    q[i, 0] = (m[i, 0, 2] - m[i, 2, 0]) / s
    q[i, 1] = (m[i, 0, 1] + m[i, 1, 0]) / s
    q[i, 2] = 0.25 * s
    q[i, 3] = (m[i, 1, 2] + m[i, 2, 1]) / s

    i = pick == 3
    s = np.sqrt(np.maximum(1.0 + m22[i] - m00[i] - m11[i], 0.0)) * 2
    q[i, 0] = (m[i, 1, 0] - m[i, 0, 1]) / s
    q[i, 1] = (m[i, 0, 2] + m[i, 2, 0]) / s
    q[i, 2] = (m[i, 1, 2] + m[i, 2, 1]) / s
    q[i, 3] = 0.25 * s

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Batch exponential map, (..., 3) axis-angle -> (..., 3, 3)."""
    omega = np.asarray(omega, float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * np.sinc(theta / (2 * np.pi))  # sin(theta/2) / theta
    q = np.concatenate([np.cos(theta / 2), half * omega], axis=-1)
    return quat_to_matrix(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Batch log of (..., 4) unit quaternions -> axis-angle with angle in [0, pi]."""
    q = np.asarray(q, float)
    w = q[..., :1]
    v = q[..., 1:]
    flip = np.where(w < 0, -1.0, 1.0)
    w = w * flip
    v = v * flip
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(s > 0, theta / np.where(s > 0, s, 1.0), 2.0 / np.maximum(w, 1e-300))
    return scale * v


def so3_log(m: np.ndarray) -> np.ndarray:
    """Batch log map, (..., 3, 3) -> (..., 3)."""
    return quat_log(matrix_to_quat(m))


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion (w, x, y, z), sign-canonicalized to w >= 0."""

    wxyz: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.array(self.wxyz, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError(f"invalid quaternion {q}")
        # leave already-unit input untouched so serialization round-trips are exact
        q = _canonical(q if abs(n - 1.0) <= 1e-15 else q / n)
        q.setflags(write=False)
        object.__setattr__(self, "wxyz", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        return cls(matrix_to_quat(np.asarray(m, float)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, float)
        axis = axis / np.linalg.norm(axis)
        return rotation_exp(axis * angle)

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.wxyz)

    def apply(self, v) -> np.ndarray:
        """Rotate one vector (3,) or a stack (..., 3)."""
        return np.asarray(v, float) @ self.as_matrix().T

    def inv(self) -> Rotation:
        w, x, y, z = self.wxyz
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: Rotation) -> Rotation:
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(quat_multiply(self.wxyz, other.wxyz))

    def angle(self) -> float:
        return float(np.linalg.norm(rotation_log(self)))

    def angle_to(self, other: Rotation) -> float:
        return (self.inv() * other).angle()

    def isclose(self, other: Rotation, atol: float = 1e-9) -> bool:
        # q and -q are the same rotation; the sign is ambiguous when w is ~0
        return bool(
            np.allclose(self.wxyz, other.wxyz, atol=atol, rtol=0)
            or np.allclose(self.wxyz, -other.wxyz, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return f"Rotation(wxyz={np.array2string(self.wxyz, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t. ``a @ b`` applies ``b`` first."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(Rotation.identity(), t)

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def rotation_about(cls, rotation: Rotation, pivot) -> Pose:
        """Rotation that keeps ``pivot`` fixed."""
        pivot = np.asarray(pivot, float)
        return cls(rotation, pivot - rotation.apply(pivot))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def inv(self) -> Pose:
        r_inv = self.rotation.inv()
        return Pose(r_inv, -r_inv.apply(self.translation))

    def __matmul__(self, other: Pose) -> Pose:
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation * other.rotation, self.rotation.apply(other.translation) + self.translation)

    def isclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return self.rotation.isclose(other.rotation, atol) and bool(
            np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_list(self) -> list[float]:
        """[qw, qx, qy, qz, tx, ty, tz]"""
        return [float(x) for x in self.rotation.wxyz] + [float(x) for x in self.translation]

    @classmethod
    def from_list(cls, values) -> Pose:
        values = list(values)
        if len(values) != 7:
            raise ValueError("pose list needs 7 values [qw, qx, qy, qz, tx, ty, tz]")
        return cls(Rotation(values[:4]), values[4:])

    def __repr__(self) -> str:
        return f"Pose(q={np.array2string(self.rotation.wxyz, precision=6)}, t={np.array2string(self.translation, precision=6)})"


def rotation_log(r: Rotation) -> np.ndarray:
    """Axis-angle vector theta * axis with theta in [0, pi]."""
    return quat_log(r.wxyz)


def rotation_exp(v) -> Rotation:
    v = np.asarray(v, float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite axis-angle vector")
    theta = np.linalg.norm(v)
    half = 0.5 * np.sinc(theta / (2 * np.pi))
    return Rotation(np.concatenate([[math.cos(theta / 2)], half * v]))


def slerp(q0: Rotation, q1: Rotation, s: float) -> Rotation:
    """Shortest-path spherical interpolation; normalized lerp when the
    quaternions are within ``SLERP_PARALLEL_EPS`` rad of each other."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s={s} outside [0, 1]")
    a = q0.wxyz
    b = q1.wxyz
    dot = float(np.dot(a, b))
    if dot < 0:
        b = -b
        dot = -dot
    omega = math.acos(min(dot, 1.0))
    if omega < SLERP_PARALLEL_EPS:
        q = (1 - s) * a + s * b
    else:
        sin_o = math.sin(omega)
        q = math.sin((1 - s) * omega) / sin_o * a + math.sin(s * omega) / sin_o * b
    return Rotation(q)


def estimate_rigid(points_from, points_to) -> Pose:
    """Least-squares rigid transform with ``T.apply(points_from) ~= points_to``.

    SVD (Kabsch) solution with the determinant sign correction so the
    result is a proper rotation.

    Raises:
        DegenerateConfiguration: fewer than 3 points, or all collinear.
    """
    p = np.asarray(points_from, float)
    q = np.asarray(points_to, float)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape != q.shape:
        raise ValueError(f"point sets must be equal-length (n, 3) arrays, got {p.shape} and {q.shape}")
    if len(p) < 3:
        raise DegenerateConfiguration(f"need at least 3 points, got {len(p)}")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    p0 = p - pc
    q0 = q - qc
    sv = np.linalg.svd(p0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("points are collinear; rotation is unconstrained")
    h = p0.T @ q0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rot = Rotation.from_matrix(r)
    return Pose(rot, qc - rot.apply(pc))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def project_pinhole(points_3d, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points (n, 3) or (3,) -> pixels (u, v)."""
    p = np.asarray(points_3d, float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p[:, 2] <= 0):
        raise PointBehindCamera("point with z <= 0 cannot be projected")
    uv = np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1)
    return uv[0] if single else uv


def lift_to_3d(pixel, depth, k: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel(s) at the given depth(s); inverse of ``project_pinhole``."""
    px = np.asarray(pixel, float)
    d = np.asarray(depth, float)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    d = np.broadcast_to(d, (len(px),)) if d.ndim == 0 else d.reshape(-1)
    if np.any(~(d > 0)):
        raise NonPositiveDepth("depth must be positive")
    x = (px[:, 0] - k.cx) / k.fx * d
    y = (px[:, 1] - k.cy) / k.fy * d
    out = np.stack([x, y, d], axis=1)
    return out[0] if single else out
