"""Pipeline configuration and the plan/simulate stages that sit on top of
the per-module operations."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .controller import ControllerGains, KinematicChain, default_chain, forward_kinematics, simulate_tracking, solve_ik
from .correspondence import (
    AxisRefinementConfig,
    FunctionCorrespondence,
    RefinementScene,
    TestObservation,
    compose_function_correspondence,
    transfer_keypoints,
)
from .errors import SchemaError
from .extraction import Extraction, ExtractionConfig
from .geometry import CameraIntrinsics, Pose, Rotation
from .keypoints import (
    SCHEMA_VERSION,
    EffectPoint,
    FunctionalKeypoints,
    TargetFrame,
    decode_array,
    pose_from_keypoints,
    rle_decode,
    scale_effect_point,
)
from .ports import FrameContext
from .ports.mock import OracleRefiner, RegionCenterCorrespondence, ScriptedRegionProposer, ScriptedSelector
from .trajectory import (
    Box,
    GraspAttachment,
    PoseTrajectory,
    TrajOptConfig,
    constraint_report,
    optimize_trajectory,
    resample_uniform,
    resampled_index,
    rotate_z,
    tool_to_ee_trajectory,
    warp_angle_and_scale,
    warp_demo_trajectory,
)

SETTLE_S = 2.0
# top-down gripper: ee z-axis along base -z
TOP_DOWN = Rotation.from_axis_angle([1.0, 0.0, 0.0], math.pi)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


@dataclass
class PortConfig:
    kind: str = "mock"
    selector_script: dict = field(default_factory=dict)
    region_centers: dict = field(default_factory=dict)
    refiner_angle_deg: float = 0.0
    remote: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise SchemaError(f"ports.kind must be 'mock' or 'remote', got {self.kind!r}")


@dataclass
class PipelineConfig:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    trajopt: TrajOptConfig = field(default_factory=TrajOptConfig)
    gains: ControllerGains = field(default_factory=ControllerGains)
    refinement: AxisRefinementConfig = field(default_factory=AxisRefinementConfig)
    ports: PortConfig = field(default_factory=PortConfig)
    seed: int = 0
    settle_s: float = SETTLE_S

    def to_dict(self) -> dict:
        return {
            "extraction": asdict(self.extraction),
            "trajopt": self.trajopt.to_dict(),
            "gains": self.gains.to_dict(),
            "refinement": {"offsets_deg": [math.degrees(o) for o in self.refinement.offsets]},
            "ports": asdict(self.ports),
            "seed": self.seed,
            "settle_s": self.settle_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        try:
            known = {"extraction", "trajopt", "gains", "refinement", "ports", "seed", "settle_s"}
            unknown = set(d) - known
            if unknown:
                raise SchemaError(f"unknown config sections: {sorted(unknown)}")
            seed = int(d.get("seed", 0))
            ext = dict(d.get("extraction", {}))
            ext.setdefault("seed", seed)
            ref = d.get("refinement", {})
            return cls(
                extraction=ExtractionConfig(**ext),
                trajopt=TrajOptConfig(**d.get("trajopt", {})),
                gains=ControllerGains(**d.get("gains", {})),
                refinement=AxisRefinementConfig.from_degrees(ref["offsets_deg"]) if "offsets_deg" in ref else AxisRefinementConfig(),
                ports=PortConfig(**d.get("ports", {})),
                seed=seed,
                settle_s=float(d.get("settle_s", SETTLE_S)),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise SchemaError("config must be a JSON object")
        return cls.from_dict(d)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


# --- ports -----------------------------------------------------------------------


def build_ports(cfg: PipelineConfig, task=None):
    """(selector, proposer, matcher, refiner) for the configured backend."""
    p = cfg.ports
    if p.kind == "remote":
        from .ports.remote import remote_vlm_client

        r = remote_vlm_client(task=task, **p.remote)
        return r.selector, r.proposer, r.matcher, r.refiner
    selector = ScriptedSelector(p.selector_script) if p.selector_script else None
    proposer = ScriptedRegionProposer(p.region_centers) if p.region_centers else None
    return selector, proposer, RegionCenterCorrespondence(), OracleRefiner(math.radians(p.refiner_angle_deg))


# --- test scene ---------------------------------------------------------------------


@dataclass(eq=False)
class TestScene:
    __test__ = False  # not a pytest class

    observation: TestObservation
    target_dims: np.ndarray
    target_to_base: Pose
    obstacles: list[Box]
    grasp_pose_in_tool_frame: Pose | None = None

    @classmethod
    def from_dict(cls, d: dict) -> TestScene:
        if not isinstance(d, dict) or d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError("test scene must be a JSON object with schema_version 1")
        try:
            obs = TestObservation(
                intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
                tool_mask=rle_decode(d["tool_mask"]),
                depth=decode_array(d["depth"]).astype(float),
                target_frame=TargetFrame.from_dict(d["target_frame"]),
                target_mask=rle_decode(d["target_mask"]) if "target_mask" in d else None,
            )
            grasp = d.get("grasp_pose_in_tool_frame")
            return cls(
                observation=obs,
                target_dims=np.asarray(d["target_dims"], float),
                target_to_base=Pose.from_list(d.get("target_to_base", [1, 0, 0, 0, 0, 0, 0])),
                obstacles=[Box(b["lo"], b["hi"]) for b in d.get("obstacles", [])],
                grasp_pose_in_tool_frame=None if grasp is None else Pose.from_list(grasp),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"invalid test scene: {exc}") from exc

    @classmethod
    def load(cls, path) -> TestScene:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"test scene is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


# --- plan stage ----------------------------------------------------------------------


@dataclass(eq=False)
class Plan:
    k_test0: FunctionalKeypoints
    warp_angle: float
    warp_scale: float
    effect_point: EffectPoint
    correspondence: FunctionCorrespondence
    reference: PoseTrajectory
    t_f_index: int
    tool_trajectory: PoseTrajectory
    ee_trajectory: PoseTrajectory
    grasp: GraspAttachment
    report: dict

    def correspondence_dict(self) -> dict:
        d = self.correspondence.to_dict()
        d.update(
            k_test0=self.k_test0.to_dict(),
            warp_angle_rad=self.warp_angle,
            warp_scale=self.warp_scale,
            effect_point=[float(x) for x in self.effect_point.point],
            t_f_index=self.t_f_index,
            grasp_pose_in_tool_frame=self.grasp.grasp_pose_in_tool_frame.to_list(),
        )
        return d


def demo_pose_trajectory(ext: Extraction) -> PoseTrajectory:
    """Demo tool poses from the keypoint trajectory; translations are function points."""
    return PoseTrajectory(ext.trajectory.timestamps, [pose_from_keypoints(k) for k in ext.trajectory.keypoints])


GRASP_YAWS = (0.0, math.pi / 2, -math.pi / 2, math.pi)
IK_POS_TOL = 1e-4  # m


def top_down_grasp(k_test0: FunctionalKeypoints, t_init: Pose, target_to_base: Pose, yaw: float = 0.0) -> GraspAttachment:
    """Top-down grasp at the test grasp point, fixed relative to the tool."""
    r = target_to_base.rotation.inv() * Rotation.from_axis_angle([0.0, 0.0, 1.0], yaw) * TOP_DOWN
    return GraspAttachment(t_init.inv() @ Pose(r, k_test0.grasp))


def joint_limit_margin(chain: KinematicChain, ee: PoseTrajectory, q_start) -> float:
    """Smallest distance to a joint limit along a warm-started IK sweep of
    ``ee``; -inf when some waypoint is out of reach."""
    q = np.asarray(q_start, float)
    margin = math.inf
    for pose in ee.poses:
        q = solve_ik(chain, pose, q, iters=100)
        if np.linalg.norm(forward_kinematics(chain, q).translation - pose.translation) > IK_POS_TOL:
            return -math.inf
        margin = min(margin, float(np.min(np.minimum(q - chain.lower, chain.upper - q))))
    return margin


def choose_grasp(
    k_test0: FunctionalKeypoints,
    t_init: Pose,
    tool_traj: PoseTrajectory,
    target_to_base: Pose,
    chain: KinematicChain,
    gains: ControllerGains,
) -> GraspAttachment:
    """Among top-down grasps at a few yaws, keep the one whose trajectory
    stays farthest from the joint limits."""
    home = _home_configuration(chain, gains)
    best, best_margin = None, -math.inf
    for yaw in GRASP_YAWS:
        g = top_down_grasp(k_test0, t_init, target_to_base, yaw)
        m = joint_limit_margin(chain, tool_to_ee_trajectory(tool_traj, g, target_to_base), home)
        if best is None or m > best_margin:
            best, best_margin = g, m
    return best


def plan(ext: Extraction, scene: TestScene, cfg: PipelineConfig, ports=None, chain: KinematicChain | None = None) -> Plan:
    selector, proposer, matcher, refiner = ports if ports is not None else build_ports(cfg, ext.task)
    if proposer is None:
        raise SchemaError("mock ports need region_centers for keypoint transfer")
    obs = scene.observation
    tf = ext.keyframes.t_function
    demo_ctx = FrameContext(
        intrinsics=ext.intrinsics,
        tool_mask=np.zeros((ext.intrinsics.height, ext.intrinsics.width), bool),
        marks={"func": ext.function_pixel, "grasp": ext.grasp_pixel},
    )
    k_test0 = transfer_keypoints(demo_ctx, obs, proposer, matcher)

    demo_traj = demo_pose_trajectory(ext)
    k_demo_tf = ext.trajectory.keypoints[tf]
    warped, _ = warp_demo_trajectory(demo_traj, k_demo_tf, k_test0)
    angle, rho = warp_angle_and_scale(demo_traj.poses[0].translation, k_test0.func)
    rz = rotate_z(angle)
    q_eff = EffectPoint(rz.apply(scale_effect_point(ext.effect_point, ext.target_dims, scene.target_dims).point))

    rscene = RefinementScene(obs.tool_cloud(), obs.target_cloud(), obs.intrinsics, obs.target_frame, demo_ctx, ext.task)
    corr = compose_function_correspondence(k_demo_tf.transformed(rz), k_test0, q_eff, cfg.refinement, refiner, rscene)

    dt = 1.0 / cfg.gains.command_rate
    reference = resample_uniform(warped, cfg.trajopt.n_steps, dt)
    tf_idx = resampled_index(warped, tf, cfg.trajopt.n_steps)
    t_init = pose_from_keypoints(k_test0)
    t_func = pose_from_keypoints(corr.k_test_at_tf)
    topt = cfg.trajopt
    if scene.obstacles:
        topt = replace(topt, obstacle_boxes=list(topt.obstacle_boxes) + scene.obstacles)
    body = t_init.inv().apply(k_test0.as_array())
    tool_traj = optimize_trajectory(reference, t_init, t_func, tf_idx, topt, body_points=body)
    report = constraint_report(tool_traj, reference, t_init, t_func, tf_idx, topt, body)

    if scene.grasp_pose_in_tool_frame is not None:
        grasp = GraspAttachment(scene.grasp_pose_in_tool_frame)
    else:
        grasp = choose_grasp(k_test0, t_init, tool_traj, scene.target_to_base, chain or default_chain(), cfg.gains)
    ee = tool_to_ee_trajectory(tool_traj, grasp, scene.target_to_base)
    return Plan(k_test0, angle, rho, q_eff, corr, reference, tf_idx, tool_traj, ee, grasp, report)


def trajectory_csv(traj: PoseTrajectory) -> str:
    lines = ["step,time,x,y,z,qw,qx,qy,qz"]
    for i, (t, p) in enumerate(zip(traj.timestamps, traj.poses)):
        vals = [t, *p.translation, *p.rotation.wxyz]
        lines.append(",".join([str(i)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


# --- simulate stage ------------------------------------------------------------------


def _home_configuration(chain: KinematicChain, gains: ControllerGains) -> np.ndarray:
    home = gains.q_home if gains.q_home is not None else chain.q_home
    return np.zeros(chain.dof) if home is None else np.asarray(home, float)


def initial_configuration(chain: KinematicChain, gains: ControllerGains, ee: PoseTrajectory, mode: str = "ik") -> np.ndarray:
    """``home`` starts at the home configuration; ``ik`` solves IK for the
    first waypoint seeded at home."""
    home = _home_configuration(chain, gains)
    if mode == "home":
        return home
    if mode != "ik":
        raise ValueError(f"unknown q0 mode {mode!r}")
    return solve_ik(chain, ee.poses[0], home)


def simulate(ee: PoseTrajectory, cfg: PipelineConfig, chain: KinematicChain | None = None, q0_mode: str = "ik"):
    chain = chain or default_chain()
    q0 = initial_configuration(chain, cfg.gains, ee, q0_mode)
    t0 = ee.timestamps[0]
    commands = PoseTrajectory(ee.timestamps - t0, ee.poses)
    duration = float(commands.timestamps[-1]) + cfg.settle_s
    log = simulate_tracking(chain, cfg.gains, q0, commands, duration)
    summary = log.summary()
    summary["start_error_m"] = float(np.linalg.norm(forward_kinematics(chain, q0).translation - ee.poses[0].translation))
    return log, summary
