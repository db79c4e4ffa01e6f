"""Run fixture -> extract -> plan -> simulate with mock ports and print a summary.

    python scripts/run_mock_pipeline.py --kind pour --seed 7 --out runs/pour7
"""

import argparse
import json
import sys
import time
from pathlib import Path

from toolkp.cli import main


def run(kind: str, seed: int, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    o = str(out)
    steps = [
        ["make-fixture", "--kind", kind, "--seed", str(seed), "--out", o],
        ["extract", "--bundle", f"{o}/bundle.json", "--config", f"{o}/config.json", "--out", o],
        ["plan", "--extraction", f"{o}/extraction.json", "--scene", f"{o}/scene.json", "--config", f"{o}/config.json", "--out", o],
        ["simulate", "--trajectory", f"{o}/ee_trajectory.json", "--config", f"{o}/config.json", "--out", o],
    ]
    for argv in steps:
        t0 = time.perf_counter()
        rc = main(argv)
        print(f"{argv[0]:<13} rc={rc} {time.perf_counter() - t0:6.2f} s")
        if rc:
            return rc
    summary = json.loads((out / "summary.json").read_text())
    print(json.dumps({k: v for k, v in summary.items() if k != "config_hash"}, indent=1))
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", default="pour", choices=("pour", "pound", "linear"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="runs/mock")
    args = ap.parse_args()
    sys.exit(run(args.kind, args.seed, Path(args.out)))
