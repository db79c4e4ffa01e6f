"""Command-line entry point.

Exit codes: 0 ok, 2 input error (schema or io), 3 infeasible plan,
4 runtime fault (extraction, correspondence, controller, ports). Failures
print ``{"error": {...}}`` as JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .controller import KinematicChain, default_chain
from .errors import InfeasibleProblem, MaxIterationsExceeded, SchemaError, ToolKPError
from .extraction import Extraction, extract
from .fixtures import KINDS, make_fixture
from .keypoints import SCHEMA_VERSION, DemoBundle
from .metrics import evaluate_report, read_pairs_csv
from .pipeline import PipelineConfig, TestScene, build_ports, plan, simulate, trajectory_csv, write_json
from .trajectory import PoseTrajectory

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.extraction.seed = args.seed
    if getattr(args, "ports", None):
        cfg.ports.kind = args.ports
    return cfg


def _stamp(d: dict, cfg: PipelineConfig) -> dict:
    return {**d, "schema_version": SCHEMA_VERSION, "config_hash": cfg.config_hash()}


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_make_fixture(args) -> int:
    fx = make_fixture(args.kind, args.seed if args.seed is not None else 0)
    out = _out_dir(args)
    fx.bundle.save(out / "bundle.json")
    write_json(out / "truth.json", fx.truth)
    write_json(out / "scene.json", fx.scene)
    write_json(out / "config.json", fx.config)
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    bundle = DemoBundle.load(args.bundle)
    selector, *_ = build_ports(cfg, bundle.task)
    if selector is None:
        raise SchemaError("mock ports need ports.selector_script in the config")
    ext = extract(bundle, cfg.extraction, selector)
    write_json(_out_dir(args) / "extraction.json", _stamp(ext.to_dict(), cfg))
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    d = _load_json(args.extraction)
    try:
        ext = Extraction.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid extraction record: {exc}") from exc
    scene = TestScene.load(args.scene)
    p = plan(ext, scene, cfg)
    out = _out_dir(args)
    write_json(out / "correspondence.json", _stamp(p.correspondence_dict(), cfg))
    write_json(out / "tool_trajectory.json", _stamp({**p.tool_trajectory.to_dict(), "constraint_report": p.report}, cfg))
    write_json(out / "ee_trajectory.json", _stamp({**p.ee_trajectory.to_dict(), "constraint_report": p.report}, cfg))
    write_json(out / "reference_trajectory.json", _stamp(p.reference.to_dict(), cfg))
    write_json(out / "constraint_report.json", _stamp(p.report, cfg))
    (out / "tool_trajectory.csv").write_text(trajectory_csv(p.tool_trajectory))
    (out / "ee_trajectory.csv").write_text(trajectory_csv(p.ee_trajectory))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    d = _load_json(args.trajectory)
    try:
        traj = PoseTrajectory.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid trajectory: {exc}") from exc
    chain = KinematicChain.load(args.chain) if args.chain else default_chain()
    log, summary = simulate(traj, cfg, chain, args.q0)
    out = _out_dir(args)
    log.write_csv(out / "simlog.csv")
    write_json(out / "summary.json", _stamp(summary, cfg))
    return EXIT_OK


def cmd_eval_keypoints(args) -> int:
    report = evaluate_report(read_pairs_csv(args.csv))
    if args.out:
        out = _out_dir(args)
        write_json(out / "metrics.json", {**report.to_dict(), "schema_version": SCHEMA_VERSION})
        (out / "metrics.csv").write_text(report.to_csv())
    print(report.table_header())
    print(report.table_row(args.label))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toolkp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--ports", choices=("mock", "remote"))

    p = sub.add_parser("make-fixture", help="write a synthetic demonstration, truth sidecar, test scene and config")
    p.add_argument("--kind", choices=KINDS, default="pour")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("extract", help="keyframes and functional keypoints from a bundle")
    p.add_argument("--bundle", required=True)
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("plan", help="correspondence and trajectory for a test scene")
    p.add_argument("--extraction", "--bundle", dest="extraction", required=True, help="extraction JSON")
    p.add_argument("--scene", required=True)
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="track an end-effector trajectory with the controller")
    p.add_argument("--trajectory", required=True, help="ee trajectory JSON")
    p.add_argument("--chain", help="kinematic chain JSON (default: bundled 7-DoF arm)")
    p.add_argument("--q0", choices=("ik", "home"), default="ik")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval-keypoints", help="AKD and AP@15/30/45 from a pairs CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")
    p.add_argument("--label", default="method")
    p.set_defaults(func=cmd_eval_keypoints)
    return ap


def _exit_code(exc: ToolKPError) -> int:
    if isinstance(exc, (InfeasibleProblem, MaxIterationsExceeded)):
        return EXIT_INFEASIBLE
    if exc.kind == "schema":
        return EXIT_INPUT
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolKPError as exc:
        err, code = exc.to_dict(), _exit_code(exc)
    except OSError as exc:
        err = {"kind": "io", "stage": "io", "type": type(exc).__name__, "message": str(exc)}
        code = EXIT_INPUT
    err["command"] = args.command
    print(json.dumps({"error": err}, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
