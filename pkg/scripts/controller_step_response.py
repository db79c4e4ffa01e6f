"""Step response of the tracking controller to a static Cartesian setpoint.

    python scripts/controller_step_response.py --dx 0.05 --angle 30 --csv step.csv
"""

import argparse
import math

import numpy as np

from toolkp.controller import ControllerGains, default_chain, forward_kinematics, simulate_tracking
from toolkp.geometry import Pose, rotation_exp
from toolkp.trajectory import PoseTrajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dx", type=float, default=0.05, help="setpoint offset along base z, m")
    ap.add_argument("--angle", type=float, default=30.0, help="setpoint rotation about base x, deg")
    ap.add_argument("--duration", type=float, default=5.0)
    ap.add_argument("--kp", type=float, default=3.0)
    ap.add_argument("--csv")
    args = ap.parse_args()

    chain = default_chain()
    gains = ControllerGains(kp=args.kp, kp_rot=args.kp)
    start = forward_kinematics(chain, chain.q_home)
    goal = Pose(rotation_exp([math.radians(args.angle), 0, 0]) * start.rotation, start.translation + [0, 0, -args.dx])
    log = simulate_tracking(chain, gains, chain.q_home, PoseTrajectory([0.0, args.duration], [goal, goal]), args.duration)
    for t in np.arange(0.0, args.duration + 1e-9, 0.5):
        k = int(round(t * gains.control_rate))
        print(f"t={t:4.1f} s  pos err {1e3 * log.position_error[k]:9.4f} mm  rot err {math.degrees(log.orientation_error[k]):8.4f} deg")
    if args.csv:
        log.write_csv(args.csv)


if __name__ == "__main__":
    main()
