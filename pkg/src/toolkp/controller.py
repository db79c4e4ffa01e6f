"""Kinematic serial-chain model and a lockstep simulation of a velocity
PD controller with null-space home attraction."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ControllerError, JointLimitViolation, PositionErrorExceeded
from .geometry import Pose, Rotation, quat_log, slerp
from .trajectory import PoseTrajectory

SING_THRESHOLD = 1e-4
DAMPING = 1e-3


@dataclass(frozen=True, eq=False)
class Joint:
    origin: Pose  # parent frame -> joint frame at q = 0
    axis: np.ndarray
    lower: float = -math.pi
    upper: float = math.pi
    name: str = ""

    def __post_init__(self):
        a = np.asarray(self.axis, float).reshape(3)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("joint axis must be nonzero")
        object.__setattr__(self, "axis", a / n)
        if self.lower > self.upper:
            raise ValueError(f"joint {self.name!r}: lower limit above upper")


@dataclass(frozen=True, eq=False)
class KinematicChain:
    joints: tuple[Joint, ...]
    ee_offset: Pose = field(default_factory=Pose.identity)
    base: Pose = field(default_factory=Pose.identity)
    q_home: np.ndarray | None = None

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ValueError("a chain needs at least one joint")
        object.__setattr__(self, "joints", tuple(self.joints))
        if self.q_home is not None:
            object.__setattr__(self, "q_home", np.asarray(self.q_home, float).reshape(self.dof))

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def check_limits(self, q, tick: int | None = None) -> np.ndarray:
        q = np.asarray(q, float).reshape(self.dof)
        bad = np.flatnonzero((q < self.lower) | (q > self.upper))
        if bad.size:
            i = int(bad[0])
            raise JointLimitViolation(
                f"joint {i} at {q[i]:.4f} rad outside [{self.lower[i]:.4f}, {self.upper[i]:.4f}]", tick=tick
            )
        return q

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_list(),
            "ee_offset": self.ee_offset.to_list(),
            "q_home": None if self.q_home is None else [float(x) for x in self.q_home],
            "joints": [
                {"name": j.name, "origin": j.origin.to_list(), "axis": [float(x) for x in j.axis], "lower": j.lower, "upper": j.upper}
                for j in self.joints
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> KinematicChain:
        """Joints either carry an explicit ``origin`` pose or modified-DH
        parameters ``alpha``, ``a``, ``theta``, ``d``
        (origin = Rx(alpha) Tx(a) Rz(theta) Tz(d), theta a fixed offset)."""
        joints = []
        for i, j in enumerate(d["joints"]):
            if "origin" in j:
                origin = Pose.from_list(j["origin"])
            else:
                rx = Pose(Rotation.from_axis_angle([1, 0, 0], j.get("alpha", 0.0)))
                rz = Pose(Rotation.from_axis_angle([0, 0, 1], j.get("theta", 0.0)), [j.get("a", 0.0), 0.0, 0.0])
                origin = rx @ rz @ Pose.from_translation([0.0, 0.0, j.get("d", 0.0)])
            joints.append(
                Joint(origin, j.get("axis", [0, 0, 1]), j.get("lower", -math.pi), j.get("upper", math.pi), j.get("name", f"j{i}"))
            )
        ee = d.get("ee_offset", [1, 0, 0, 0, 0, 0, 0])
        base = d.get("base", [1, 0, 0, 0, 0, 0, 0])
        return cls(tuple(joints), Pose.from_list(ee), Pose.from_list(base), d.get("q_home"))

    @classmethod
    def load(cls, path) -> KinematicChain:
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_chain() -> KinematicChain:
    """7-DoF arm described in ``data/default_chain.json``."""
    text = resources.files("toolkp").joinpath("data/default_chain.json").read_text()
    return KinematicChain.from_dict(json.loads(text))


def _joint_frames(chain: KinematicChain, q: np.ndarray):
    """World frames of every joint (after its origin, before its rotation) and the ee pose."""
    t = chain.base
    frames = []
    for joint, qi in zip(chain.joints, q):
        t = t @ joint.origin
        frames.append(t)
        t = t @ Pose(Rotation.from_axis_angle(joint.axis, qi))
    return frames, t @ chain.ee_offset


def forward_kinematics(chain: KinematicChain, q) -> Pose:
    q = chain.check_limits(q)
    return _joint_frames(chain, q)[1]


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian in the base frame: rows [linear; angular]."""
    q = np.asarray(q, float).reshape(chain.dof)
    frames, ee = _joint_frames(chain, q)
    jac = np.zeros((6, chain.dof))
    for i, (frame, joint) in enumerate(zip(frames, chain.joints)):
        z = frame.rotation.apply(joint.axis)
        jac[:3, i] = np.cross(z, ee.translation - frame.translation)
        jac[3:, i] = z
    return jac


def damped_pinv(jac: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse, damped only along near-singular directions."""
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    inv = np.where(s >= SING_THRESHOLD, 1.0 / np.maximum(s, SING_THRESHOLD), s / (s * s + DAMPING**2))
    return (vt.T * inv) @ u.T


def interpolate_commands(pose_k: Pose, pose_k1: Pose, dt: float, control_rate: float) -> list[Pose]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    # small epsilon so 0.1 * 200 is not floored to 19
    n = max(1, int(math.floor(dt * control_rate + 1e-9)))
    if n == 1:
        return [pose_k1]
    out = []
    for i in range(n):
        s = i / (n - 1)
        p = (1 - s) * pose_k.translation + s * pose_k1.translation
        out.append(Pose(slerp(pose_k.rotation, pose_k1.rotation, s), p))
    return out


def rotation_error(r_des: Rotation, r_cur: Rotation) -> np.ndarray:
    """Rotation vector of r_des r_cur^-1 with angle in [-pi, pi]."""
    return quat_log((r_des * r_cur.inv()).wxyz)


@dataclass
class ControllerGains:
    kp: np.ndarray = field(default_factory=lambda: np.full(3, 3.0))
    kd: np.ndarray = field(default_factory=lambda: np.full(3, 0.001))
    kp_rot: np.ndarray = field(default_factory=lambda: np.full(3, 3.0))
    kd_rot: np.ndarray = field(default_factory=lambda: np.full(3, 0.01))
    k_home: float = 0.1
    k_min: float = 0.05
    q_home: np.ndarray | None = None
    command_rate: float = 10.0
    control_rate: float = 200.0
    e_p_max: float = 0.5

    def __post_init__(self):
        for name in ("kp", "kd", "kp_rot", "kd_rot"):
            v = np.asarray(getattr(self, name), float)
            v = np.diag(v) if v.ndim == 2 else np.broadcast_to(v, (3,)).copy()
            setattr(self, name, v)
        if self.q_home is not None:
            self.q_home = np.asarray(self.q_home, float)
        gains = np.concatenate([self.kp, self.kd, self.kp_rot, self.kd_rot, [self.k_home, self.k_min]])
        if np.any(gains < 0):
            raise ValueError("gains must be non-negative")
        if self.control_rate < self.command_rate:
            raise ValueError("control_rate must be >= command_rate")
        if self.e_p_max <= 0:
            raise ValueError("e_p_max must be positive")

    def to_dict(self) -> dict:
        out = {}
        for name in ("kp", "kd", "kp_rot", "kd_rot"):
            out[name] = [float(x) for x in getattr(self, name)]
        out.update(
            k_home=self.k_home,
            k_min=self.k_min,
            q_home=None if self.q_home is None else [float(x) for x in self.q_home],
            command_rate=self.command_rate,
            control_rate=self.control_rate,
            e_p_max=self.e_p_max,
        )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ControllerGains:
        return cls(**d)


def pd_cartesian(e_p, e_p_dot, e_th, e_th_dot, gains: ControllerGains) -> np.ndarray:
    e_p = np.asarray(e_p, float)
    norm = float(np.linalg.norm(e_p))
    if norm > gains.e_p_max:
        raise PositionErrorExceeded(f"position error {norm:.3f} m exceeds {gains.e_p_max} m")
    v = gains.kp * e_p + gains.kd * np.asarray(e_p_dot, float)
    w = gains.kp_rot * np.asarray(e_th, float) + gains.kd_rot * np.asarray(e_th_dot, float)
    return np.concatenate([v, w])


def null_space_velocity(q, gains: ControllerGains, q_home) -> np.ndarray:
    q = np.asarray(q, float)
    return gains.k_home * (q_home - q) - gains.k_min * q


def joint_velocities(chain: KinematicChain, q, twist, gains: ControllerGains) -> np.ndarray:
    q = np.asarray(q, float)
    jac = jacobian(chain, q)
    pinv = damped_pinv(jac)
    proj = np.eye(chain.dof) - pinv @ jac
    q_home = _home(chain, gains)
    return pinv @ np.asarray(twist, float) + proj @ null_space_velocity(q, gains, q_home)


def _home(chain: KinematicChain, gains: ControllerGains) -> np.ndarray:
    if gains.q_home is not None:
        return gains.q_home
    if chain.q_home is not None:
        return chain.q_home
    return np.zeros(chain.dof)


def null_space_equilibrium(chain: KinematicChain, gains: ControllerGains) -> np.ndarray:
    """Configuration where the home/minimum attraction cancels."""
    total = gains.k_home + gains.k_min
    return gains.k_home * _home(chain, gains) / total if total > 0 else _home(chain, gains)


def solve_ik(chain: KinematicChain, target: Pose, q_init, iters: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Damped least squares IK, clamped to joint limits."""
    q = np.clip(np.asarray(q_init, float), chain.lower, chain.upper)
    for _ in range(iters):
        _, ee = _joint_frames(chain, q)
        err = np.concatenate([target.translation - ee.translation, rotation_error(target.rotation, ee.rotation)])
        if float(err @ err) < tol**2:
            break
        jac = jacobian(chain, q)
        step = jac.T @ np.linalg.solve(jac @ jac.T + 1e-4 * np.eye(6), err)
        q = np.clip(q + step, chain.lower, chain.upper)
    return q


@dataclass(eq=False)
class SimLog:
    time: np.ndarray
    q: np.ndarray
    ee_position: np.ndarray
    ee_quaternion: np.ndarray
    position_error: np.ndarray
    orientation_error: np.ndarray
    qdot: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    def summary(self) -> dict:
        return {
            "final_position_error_m": float(self.position_error[-1]),
            "final_orientation_error_rad": float(self.orientation_error[-1]),
            "max_joint_speed_rad_s": float(np.abs(self.qdot).max()),
            "ticks": len(self),
        }

    def header(self) -> list[str]:
        n = self.q.shape[1]
        return (
            ["tick", "time"]
            + [f"q{i}" for i in range(n)]
            + ["ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz", "pos_err", "rot_err"]
            + [f"qdot{i}" for i in range(n)]
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for k in range(len(self)):
                row = np.concatenate(
                    [
                        [self.time[k]],
                        self.q[k],
                        self.ee_position[k],
                        self.ee_quaternion[k],
                        [self.position_error[k], self.orientation_error[k]],
                        self.qdot[k],
                    ]
                )
                w.writerow([k] + [repr(float(x)) for x in row])


def _command_schedule(commands: PoseTrajectory, control_rate: float):
    segments = []
    for k in range(len(commands) - 1):
        dt = commands.timestamps[k + 1] - commands.timestamps[k]
        segments.append(interpolate_commands(commands.poses[k], commands.poses[k + 1], dt, control_rate))
    return segments


def _desired(commands: PoseTrajectory, segments, t: float, control_rate: float) -> Pose:
    ts = commands.timestamps
    if t <= ts[0]:
        return commands.poses[0]
    if t >= ts[-1]:
        return commands.poses[-1]
    k = int(np.searchsorted(ts, t, side="right")) - 1
    seg = segments[k]
    i = int(math.floor((t - ts[k]) * control_rate + 1e-9))
    return seg[min(i, len(seg) - 1)]


def simulate_tracking(
    chain: KinematicChain, gains: ControllerGains, q0, commands: PoseTrajectory, duration: float
) -> SimLog:
    """Fixed-step kinematic simulation at ``gains.control_rate``.

    Each tick interpolates the active command segment, forms position and
    orientation errors (derivatives by backward difference), maps the PD
    twist through the damped pseudoinverse plus null-space term, and
    integrates joint positions with forward Euler.
    """
    if commands.timestamps[-1] > duration + 1e-12:
        raise ValueError("commands extend beyond the simulated duration")
    rate = gains.control_rate
    h = 1.0 / rate
    n_ticks = int(math.floor(duration * rate + 1e-9)) + 1
    q = chain.check_limits(q0, tick=0).copy()
    segments = _command_schedule(commands, rate)
    n = chain.dof
    log = SimLog(
        time=np.arange(n_ticks) * h,
        q=np.zeros((n_ticks, n)),
        ee_position=np.zeros((n_ticks, 3)),
        ee_quaternion=np.zeros((n_ticks, 4)),
        position_error=np.zeros(n_ticks),
        orientation_error=np.zeros(n_ticks),
        qdot=np.zeros((n_ticks, n)),
    )
    prev_ep = prev_eth = None
    for k in range(n_ticks):
        t = k * h
        try:
            q = chain.check_limits(q, tick=k)
            _, ee = _joint_frames(chain, q)
            des = _desired(commands, segments, t, rate)
            e_p = des.translation - ee.translation
            e_th = rotation_error(des.rotation, ee.rotation)
            if prev_ep is None:
                de_p = np.zeros(3)
                de_th = np.zeros(3)
            else:
                de_p = (e_p - prev_ep) * rate
                de_th = (e_th - prev_eth) * rate
            twist = pd_cartesian(e_p, de_p, e_th, de_th, gains)
        except ControllerError as exc:
            exc.tick = k
            raise
        qdot = joint_velocities(chain, q, twist, gains)
        log.q[k] = q
        log.ee_position[k] = ee.translation
        log.ee_quaternion[k] = ee.rotation.wxyz
        log.position_error[k] = np.linalg.norm(e_p)
        log.orientation_error[k] = np.linalg.norm(e_th)
        log.qdot[k] = qdot
        prev_ep, prev_eth = e_p, e_th
        q = q + h * qdot
    return log
