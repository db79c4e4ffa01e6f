"""Stage 3 planning: warp the demonstration, optimize the test-tool
trajectory, and attach the gripper."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DegenerateProjection, InfeasibleProblem, MaxIterationsExceeded
from .geometry import Pose, Rotation, matrix_to_quat, slerp, so3_exp, so3_log
from .keypoints import FunctionalKeypoints, pose_from_keypoints

PROJ_EPS = 1e-6
# Internal tightening so the returned iterate passes the exact audit.
BOUND_SHRINK = 1e-6
FD_STEP = 1e-7


@dataclass(eq=False)
class PoseTrajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) < 2:
            raise ValueError("a pose trajectory needs at least 2 samples")
        if len(self.poses) != len(self.timestamps):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def rotation_matrices(self) -> np.ndarray:
        return np.stack([p.rotation.as_matrix() for p in self.poses])

    def to_dict(self) -> dict:
        return {
            "timestamps": [float(t) for t in self.timestamps],
            "poses": [{"q": [float(x) for x in p.rotation.wxyz], "t": [float(x) for x in p.translation]} for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PoseTrajectory:
        return cls(d["timestamps"], [Pose(Rotation(p["q"]), p["t"]) for p in d["poses"]])

    @classmethod
    def from_arrays(cls, timestamps, positions, rotations) -> PoseTrajectory:
        quats = matrix_to_quat(np.asarray(rotations, float))
        return cls(timestamps, [Pose(Rotation(q), p) for q, p in zip(quats, positions)])

    def sample(self, t: float) -> Pose:
        """Pose at time ``t`` (clamped), linear in position and slerp in rotation."""
        ts = self.timestamps
        if t <= ts[0]:
            return self.poses[0]
        if t >= ts[-1]:
            return self.poses[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        s = (t - ts[i]) / (ts[i + 1] - ts[i])
        a, b = self.poses[i], self.poses[i + 1]
        return Pose(slerp(a.rotation, b.rotation, s), (1 - s) * a.translation + s * b.translation)


def resample_uniform(traj: PoseTrajectory, n_steps: int, dt: float, t0: float = 0.0) -> PoseTrajectory:
    """Resample over the same normalized phase onto ``n_steps`` samples ``dt`` apart."""
    ts = traj.timestamps
    phase = np.linspace(0.0, 1.0, n_steps)
    src = ts[0] + phase * (ts[-1] - ts[0])
    return PoseTrajectory(t0 + dt * np.arange(n_steps), [traj.sample(float(t)) for t in src])


def resampled_index(traj: PoseTrajectory, index: int, n_steps: int) -> int:
    ts = traj.timestamps
    phase = (ts[index] - ts[0]) / (ts[-1] - ts[0])
    return int(np.clip(round(phase * (n_steps - 1)), 1, n_steps - 2))


# --- warping -------------------------------------------------------------------


def warp_angle_and_scale(p_demo, q_test) -> tuple[float, float]:
    """Signed azimuth change and xy radius ratio from demo to test point."""
    p = np.asarray(p_demo, float)[:2]
    q = np.asarray(q_test, float)[:2]
    rp, rq = np.linalg.norm(p), np.linalg.norm(q)
    if rp < PROJ_EPS or rq < PROJ_EPS:
        raise DegenerateProjection("function point lies on the target z-axis")
    angle = math.atan2(p[0] * q[1] - p[1] * q[0], float(np.dot(p, q)))
    return angle, rq / rp


def rotate_z(angle: float) -> Pose:
    return Pose(Rotation.from_axis_angle([0.0, 0.0, 1.0], angle))


def warp_demo_trajectory(
    demo_traj: PoseTrajectory, demo_k_tf: FunctionalKeypoints, test_k0: FunctionalKeypoints
) -> tuple[PoseTrajectory, Pose]:
    """Rotate the demonstration about the target z-axis toward the test
    tool, then scale its horizontal translation.

    The azimuth change and scale come from the demo tool's initial function
    point (``demo_traj`` translations are function points) and the test
    tool's. Returns the warped trajectory and the rotated demo pose at the
    function keyframe.
    """
    angle, rho = warp_angle_and_scale(demo_traj.poses[0].translation, test_k0.func)
    rz = rotate_z(angle)
    scale = np.array([rho, rho, 1.0])
    poses = []
    for p in demo_traj.poses:
        w = rz @ p
        poses.append(Pose(w.rotation, w.translation * scale))
    return PoseTrajectory(demo_traj.timestamps, poses), rz @ pose_from_keypoints(demo_k_tf)


# --- optimization ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, float).reshape(3)
        hi = np.asarray(self.hi, float).reshape(3)
        if np.any(hi < lo):
            raise ValueError("box hi must be >= lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def signed_distance(self, points) -> np.ndarray:
        """Euclidean distance outside the box, minus depth of penetration inside."""
        p = np.asarray(points, float)
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(p - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def to_dict(self) -> dict:
        return {"lo": [float(x) for x in self.lo], "hi": [float(x) for x in self.hi]}


@dataclass
class TrajOptConfig:
    relax_fraction: float = 0.30
    v_max: float = 0.5  # m/s
    w_max: float = 1.5  # rad/s
    obstacle_boxes: list[Box] = field(default_factory=list)
    clearance_margin: float = 0.01  # m
    max_iterations: int = 300
    tolerance: float = 1e-6
    n_steps: int = 50

    def __post_init__(self):
        if not 0 <= self.relax_fraction < 1:
            raise ValueError("relax_fraction must lie in [0, 1)")
        if not (self.v_max > 0 and self.w_max > 0):
            raise ValueError("velocity limits must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.clearance_margin < 0:
            raise ValueError("clearance margin must be >= 0")
        self.obstacle_boxes = [b if isinstance(b, Box) else Box(b["lo"], b["hi"]) for b in self.obstacle_boxes]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("relax_fraction", "v_max", "w_max", "clearance_margin", "max_iterations", "tolerance", "n_steps")}
        d["obstacle_boxes"] = [b.to_dict() for b in self.obstacle_boxes]
        return d


def relaxed_start(n: int, relax_fraction: float) -> int:
    return int(math.ceil(relax_fraction * n))


def trajectory_objective(traj: PoseTrajectory, reference: PoseTrajectory, relax_fraction: float) -> float:
    """Sum over the unrelaxed tail of |q - p|^2 + |Log(R R_ref^T)|^2."""
    start = relaxed_start(len(reference), relax_fraction)
    dp = traj.positions()[start:] - reference.positions()[start:]
    rr = traj.rotation_matrices()[start:] @ np.swapaxes(reference.rotation_matrices()[start:], 1, 2)
    return float(np.sum(dp * dp) + np.sum(so3_log(rr) ** 2))


def _step_rates(pos: np.ndarray, rot: np.ndarray, dt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lin = np.linalg.norm(np.diff(pos, axis=0), axis=1) / dt
    rel = rot[1:] @ np.swapaxes(rot[:-1], 1, 2)
    ang = np.linalg.norm(so3_log(rel), axis=1) / dt
    return lin, ang


def _proxy_world(pos: np.ndarray, rot: np.ndarray, body: np.ndarray) -> np.ndarray:
    return np.einsum("tij,kj->tki", rot, body) + pos[:, None, :]


def constraint_report(
    traj: PoseTrajectory,
    reference: PoseTrajectory,
    t_init_pose: Pose,
    t_func_pose: Pose,
    t_f_index: int,
    cfg: TrajOptConfig,
    body_points=None,
) -> dict:
    """Post-hoc audit of every constraint of the planning problem."""
    body = np.zeros((1, 3)) if body_points is None else np.asarray(body_points, float).reshape(-1, 3)
    pos = traj.positions()
    rot = traj.rotation_matrices()
    lin, ang = _step_rates(pos, rot, np.diff(traj.timestamps))
    min_clear = None
    if cfg.obstacle_boxes:
        world = _proxy_world(pos, rot, body)
        min_clear = float(min(b.signed_distance(world).min() for b in cfg.obstacle_boxes))
    p0, pf = traj.poses[0], traj.poses[t_f_index]
    report = {
        "keyframe_residuals": {
            "init_position_m": float(np.linalg.norm(p0.translation - t_init_pose.translation)),
            "init_rotation_rad": p0.rotation.angle_to(t_init_pose.rotation),
            "function_position_m": float(np.linalg.norm(pf.translation - t_func_pose.translation)),
            "function_rotation_rad": pf.rotation.angle_to(t_func_pose.rotation),
        },
        "min_clearance_m": min_clear,
        "clearance_margin_m": cfg.clearance_margin,
        "max_linear_velocity": float(lin.max()),
        "max_angular_velocity": float(ang.max()),
        "v_max": cfg.v_max,
        "w_max": cfg.w_max,
        "objective": trajectory_objective(traj, reference, cfg.relax_fraction),
        "t_f_index": int(t_f_index),
    }
    report["satisfied"] = bool(
        report["max_linear_velocity"] <= cfg.v_max
        and report["max_angular_velocity"] <= cfg.w_max
        and (min_clear is None or min_clear >= cfg.clearance_margin)
        and max(report["keyframe_residuals"].values()) <= cfg.tolerance
    )
    return report


class _Problem:
    """Tangent-space parameterization around the reference.

    Step t is (p_ref + d_t, Exp(w_t) R_ref). Steps 0 and t_f are pinned to
    the keyframe poses; the other steps are free.
    """

    def __init__(self, reference, t_init_pose, t_func_pose, t_f, cfg, body):
        self.cfg = cfg
        self.n = n = len(reference)
        self.dt = np.diff(reference.timestamps)
        self.p_ref = reference.positions()
        self.r_ref = reference.rotation_matrices()
        self.body = body
        self.pinned = {0: t_init_pose, t_f: t_func_pose}
        self.free = np.array([t for t in range(n) if t not in self.pinned])
        self.vidx = -np.ones(n, dtype=int)
        self.vidx[self.free] = np.arange(len(self.free))
        self.delta0 = np.zeros((n, 3))
        self.omega0 = np.zeros((n, 3))
        for t, pose in self.pinned.items():
            self.delta0[t] = pose.translation - self.p_ref[t]
            self.omega0[t] = so3_log(pose.rotation.as_matrix() @ self.r_ref[t].T)
        start = relaxed_start(n, cfg.relax_fraction)
        self.weight = (np.arange(n) >= start).astype(float)
        self.v_lim = cfg.v_max * (1 - BOUND_SHRINK) * self.dt
        self.w_lim = cfg.w_max * (1 - BOUND_SHRINK) * self.dt
        self.margin = cfg.clearance_margin + BOUND_SHRINK
        self.boxes = cfg.obstacle_boxes
        self.n_cons = 2 * (n - 1) + n * len(body) * len(self.boxes)
        self._build_sparsity()

    def unpack(self, x):
        x = x.reshape(-1, 6)
        delta = self.delta0.copy()
        omega = self.omega0.copy()
        delta[self.free] = x[:, :3]
        omega[self.free] = x[:, 3:]
        return delta, omega

    def state(self, x):
        delta, omega = self.unpack(x)
        return self.p_ref + delta, so3_exp(omega) @ self.r_ref

    def objective(self, x):
        delta, omega = self.unpack(x)
        return float(np.sum(self.weight[:, None] * (delta * delta + omega * omega)))

    def gradient(self, x):
        w = self.weight[self.free][:, None]
        return (2.0 * w * x.reshape(-1, 6)).reshape(-1)

    def constraints(self, x):
        pos, rot = self.state(x)
        dp = np.diff(pos, axis=0)
        lin = 1.0 - np.sum(dp * dp, axis=1) / self.v_lim**2
        rel = rot[1:] @ np.swapaxes(rot[:-1], 1, 2)
        ang = 1.0 - np.sum(so3_log(rel) ** 2, axis=1) / self.w_lim**2
        parts = [lin, ang]
        if self.boxes:
            world = _proxy_world(pos, rot, self.body)
            clear = np.stack([b.signed_distance(world) for b in self.boxes], axis=-1) - self.margin
            parts.append(clear.reshape(-1))
        return np.concatenate(parts)

    def _build_sparsity(self):
        n = self.n
        # owner step of each row, for both parities
        step_rows = np.arange(n - 1)
        per_step = len(self.body) * len(self.boxes)
        clear_steps = np.repeat(np.arange(n), per_step)
        self.row_var = []
        for parity in (0, 1):
            pair = np.where(step_rows % 2 == parity, step_rows, step_rows + 1)
            clear = np.where(clear_steps % 2 == parity, clear_steps, -1)
            steps = np.concatenate([pair, pair, clear])
            var = np.where(steps >= 0, self.vidx[np.maximum(steps, 0)], -1)
            self.row_var.append(var)
        self.group_masks = []
        for parity in (0, 1):
            self.group_masks.append(self.free % 2 == parity)

    def jacobian(self, x):
        jac = np.zeros((self.n_cons, x.size))
        rows = np.arange(self.n_cons)
        x = x.reshape(-1, 6)
        for parity in (0, 1):
            sel = self.group_masks[parity]
            if not sel.any():
                continue
            var = self.row_var[parity]
            ok = var >= 0
            for c in range(6):
                xp = x.copy()
                xm = x.copy()
                xp[sel, c] += FD_STEP
                xm[sel, c] -= FD_STEP
                dc = (self.constraints(xp.reshape(-1)) - self.constraints(xm.reshape(-1))) / (2 * FD_STEP)
                jac[rows[ok], var[ok] * 6 + c] = dc[ok]
        return jac

    def initial_guess(self, t_f):
        n = self.n
        a = np.clip(np.arange(n) / t_f, 0.0, 1.0)[:, None]
        delta = (1 - a) * self.delta0[0] + a * self.delta0[t_f]
        omega = (1 - a) * self.omega0[0] + a * self.omega0[t_f]
        return np.concatenate([delta[self.free], omega[self.free]], axis=1).reshape(-1)

    def trajectory(self, x, timestamps):
        pos, rot = self.state(x)
        traj = PoseTrajectory.from_arrays(timestamps, pos, rot)
        for t, pose in self.pinned.items():
            traj.poses[t] = pose
        return traj


def _precheck(reference, t_init_pose, t_func_pose, t_f, cfg, body):
    span = reference.timestamps[t_f] - reference.timestamps[0]
    dist = float(np.linalg.norm(t_func_pose.translation - t_init_pose.translation))
    if dist > cfg.v_max * span:
        raise InfeasibleProblem(
            f"keyframes are {dist:.3f} m apart but v_max allows {cfg.v_max * span:.3f} m in {span:.2f} s",
            constraint="linear_velocity",
        )
    ang = t_init_pose.rotation.angle_to(t_func_pose.rotation)
    if ang > cfg.w_max * span:
        raise InfeasibleProblem(
            f"keyframes differ by {ang:.3f} rad but w_max allows {cfg.w_max * span:.3f} rad", constraint="angular_velocity"
        )
    for name, pose in (("initial", t_init_pose), ("function", t_func_pose)):
        world = pose.apply(body)
        for b in cfg.obstacle_boxes:
            if b.signed_distance(world).min() < cfg.clearance_margin:
                raise InfeasibleProblem(f"{name} keyframe pose violates obstacle clearance", constraint="clearance")


def optimize_trajectory(
    reference: PoseTrajectory,
    t_init_pose: Pose,
    t_func_pose: Pose,
    t_f_index: int,
    cfg: TrajOptConfig,
    body_points: Sequence | None = None,
) -> PoseTrajectory:
    """Track the reference as closely as the keyframe, velocity and
    clearance constraints allow.

    ``body_points`` are collision proxy points in the tool frame (default:
    the function point only). Solved with SLSQP over per-step tangent-space
    perturbations; the keyframe equalities are enforced by pinning.

    Raises:
        InfeasibleProblem: the constraints cannot all hold.
        MaxIterationsExceeded: the solver ran out of iterations; the best
            iterate is attached as ``best``.
    """
    n = len(reference)
    if not 0 < t_f_index < n:
        raise ValueError(f"t_f_index={t_f_index} outside (0, {n})")
    body = np.zeros((1, 3)) if body_points is None else np.asarray(body_points, float).reshape(-1, 3)
    _precheck(reference, t_init_pose, t_func_pose, t_f_index, cfg, body)
    prob = _Problem(reference, t_init_pose, t_func_pose, t_f_index, cfg, body)
    x0 = prob.initial_guess(t_f_index)
    if x0.size == 0:
        return prob.trajectory(x0, reference.timestamps)
    res = minimize(
        prob.objective,
        x0,
        jac=prob.gradient,
        method="SLSQP",
        constraints=[{"type": "ineq", "fun": prob.constraints, "jac": prob.jacobian}],
        options={"maxiter": cfg.max_iterations, "ftol": 1e-12},
    )
    traj = prob.trajectory(res.x, reference.timestamps)
    report = constraint_report(traj, reference, t_init_pose, t_func_pose, t_f_index, cfg, body)
    if report["satisfied"]:
        return traj
    if res.status == 9:
        raise MaxIterationsExceeded(f"no feasible iterate after {cfg.max_iterations} iterations", best=traj)
    violated = []
    if report["max_linear_velocity"] > cfg.v_max:
        violated.append("linear_velocity")
    if report["max_angular_velocity"] > cfg.w_max:
        violated.append("angular_velocity")
    if report["min_clearance_m"] is not None and report["min_clearance_m"] < cfg.clearance_margin:
        violated.append("clearance")
    raise InfeasibleProblem(f"solver ended infeasible ({res.message})", constraint=",".join(violated) or None)


# --- execution mapping ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GraspAttachment:
    grasp_pose_in_tool_frame: Pose


def tool_to_ee_trajectory(tool_traj: PoseTrajectory, grasp: GraspAttachment, target_to_base: Pose) -> PoseTrajectory:
    g = grasp.grasp_pose_in_tool_frame
    return PoseTrajectory(tool_traj.timestamps, [target_to_base @ p @ g for p in tool_traj.poses])
