"""Keyframe detection accuracy over seeded fixtures, optionally across PELT penalties.

    python scripts/keyframe_sweep.py --seeds 30 --penalty 1 2 3 4
"""

import argparse
from collections import Counter

import numpy as np

from toolkp.errors import ExtractionError
from toolkp.extraction import ExtractionConfig, extract
from toolkp.fixtures import KINDS, make_fixture
from toolkp.ports.mock import ScriptedSelector


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--penalty", type=float, nargs="*", default=[None], help="multiples of log(n); default is 3")
    args = ap.parse_args()

    fixtures = [make_fixture(KINDS[s % len(KINDS)], s) for s in range(args.seeds)]
    for pen in args.penalty:
        errors, failures = [], Counter()
        for s, fx in enumerate(fixtures):
            cfg = ExtractionConfig(seed=s) if pen is None else ExtractionConfig(seed=s, changepoint_penalty=pen * np.log(len(fx.bundle)))
            try:
                ext = extract(fx.bundle, cfg, ScriptedSelector(fx.config["ports"]["selector_script"]))
            except ExtractionError as exc:
                failures[type(exc).__name__] += 1
                continue
            errors.append(ext.keyframes.t_function - fx.truth["keyframes"]["t_function"])
        e = np.abs(errors)
        label = "default" if pen is None else f"{pen:g} log n"
        print(f"penalty {label:>10}: within 2 frames {np.sum(e <= 2)}/{args.seeds}, mean |err| {e.mean():.2f}, failures {dict(failures)}")


if __name__ == "__main__":
    main()
