"""Deterministic port implementations for tests and offline runs."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from ..errors import UnknownTask
from ..keypoints import TaskSpec
from . import CandidateRendering, FrameContext, Region

TIE_EPS = 1e-12


class ScriptedSelector:
    """Looks the answer up by task instruction."""

    def __init__(self, script: Mapping[str, int]):
        if not script:
            raise ValueError("script must not be empty")
        self.script = dict(script)

    def select(self, frame: FrameContext, candidates: np.ndarray, task: TaskSpec | str) -> int:
        key = task if isinstance(task, str) else task.instruction
        if key not in self.script:
            raise UnknownTask(f"no scripted answer for task {key!r}")
        return int(self.script[key])


def mock_selector_from_script(script: Mapping[str, int]) -> ScriptedSelector:
    return ScriptedSelector(script)


class OracleRefiner:
    """Picks the candidate whose offset is nearest a known angle.

    Ties go to the smaller-magnitude offset.
    """

    def __init__(self, target_angle: float):
        if not math.isfinite(target_angle):
            raise ValueError("target angle must be finite")
        self.target_angle = float(target_angle)

    def select(self, demo_frame, renderings: Sequence[CandidateRendering], task=None) -> int:
        best = None
        for i, r in enumerate(renderings):
            key = (abs(r.offset - self.target_angle), abs(r.offset))
            if best is None:
                best = (key, i)
                continue
            (d0, m0), _ = best
            if key[0] < d0 - TIE_EPS or (abs(key[0] - d0) <= TIE_EPS and key[1] < m0):
                best = (key, i)
        if best is None:
            raise ValueError("no candidates to choose from")
        return best[1]


def oracle_refiner(target_angle: float) -> OracleRefiner:
    return OracleRefiner(target_angle)


class ScriptedRegionProposer:
    """Returns a region centred on a fixed pixel per role."""

    def __init__(self, centers: Mapping[str, Sequence[float]], side: float = 24.0):
        self.centers = {k: (float(v[0]), float(v[1])) for k, v in centers.items()}
        self.side = side

    def propose(self, demo_frame, test_frame, tool_mask, role: str) -> Region:
        return Region(self.centers[role], self.side)


class IdentityRegionProposer:
    """Centres the region on the demo mark itself (self-transfer)."""

    def __init__(self, side: float = 24.0):
        self.side = side

    def propose(self, demo_frame: FrameContext, test_frame, tool_mask, role: str) -> Region:
        u, v = demo_frame.marks[role]
        return Region((float(u), float(v)), self.side)


class IdentityCorrespondence:
    def match(self, demo_pixel, demo_frame, test_frame, region: Region):
        px = np.asarray(demo_pixel, float)
        return px if region.contains(px) else None


class RegionCenterCorrespondence:
    """Region centre if it lies on the tool, else the nearest in-region tool pixel."""

    def match(self, demo_pixel, demo_frame, test_frame: FrameContext, region: Region):
        mask = test_frame.tool_mask
        cu, cv = region.center
        iu, iv = int(round(cu)), int(round(cv))
        h, w = mask.shape
        if 0 <= iv < h and 0 <= iu < w and mask[iv, iu] and region.contains((iu, iv)):
            return np.array([float(iu), float(iv)])
        rows, cols = np.nonzero(mask & region.pixel_mask(mask.shape))
        if len(rows) == 0:
            return None
        d2 = (cols - cu) ** 2 + (rows - cv) ** 2
        i = int(np.argmin(d2))
        return np.array([float(cols[i]), float(rows[i])])
