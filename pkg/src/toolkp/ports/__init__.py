"""Swappable interfaces for every vision/language model the pipeline needs.

The core only ever talks to these protocols. ``mock`` holds deterministic
doubles; ``remote`` talks to an OpenAI-compatible chat endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..geometry import CameraIntrinsics
from ..keypoints import TaskSpec


@dataclass(eq=False)
class FrameContext:
    """Everything a port may look at for one image."""

    intrinsics: CameraIntrinsics
    tool_mask: np.ndarray
    target_mask: np.ndarray | None = None
    depth: np.ndarray | None = None
    rgb: np.ndarray | None = None
    index: int | None = None
    marks: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Region:
    """Square pixel region; ``center`` is (u, v)."""

    center: tuple[float, float]
    side: float

    def contains(self, pixel) -> bool:
        u, v = np.asarray(pixel, float)
        h = self.side / 2
        return abs(u - self.center[0]) <= h and abs(v - self.center[1]) <= h

    def pixel_mask(self, shape) -> np.ndarray:
        rows, cols = np.indices(shape)
        h = self.side / 2
        return (np.abs(cols - self.center[0]) <= h) & (np.abs(rows - self.center[1]) <= h)


@dataclass(eq=False)
class CandidateRendering:
    offset: float  # radians
    image: np.ndarray | None = None


class FunctionPointSelector(Protocol):
    def select(self, frame: FrameContext, candidates: np.ndarray, task: TaskSpec) -> int: ...


class RegionProposer(Protocol):
    def propose(self, demo_frame: FrameContext, test_frame: FrameContext, tool_mask: np.ndarray, role: str) -> Region: ...


class DenseCorrespondence(Protocol):
    def match(
        self, demo_pixel: np.ndarray, demo_frame: FrameContext, test_frame: FrameContext, region: Region
    ) -> np.ndarray | None: ...


class AxisRefiner(Protocol):
    def select(
        self, demo_frame: FrameContext | None, renderings: Sequence[CandidateRendering], task: TaskSpec | None
    ) -> int: ...


def parse_index(value) -> int:
    """Accept 3, "3" or "P3" (any case, surrounding whitespace)."""
    if isinstance(value, bool):
        raise ValueError(f"not an index: {value!r}")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        s = value.strip().strip("'\"`").strip()
        if s[:1] in ("P", "p"):
            s = s[1:]
        if s.isdigit():
            return int(s)
    raise ValueError(f"not an index: {value!r}")


__all__ = [
    "AxisRefiner",
    "CandidateRendering",
    "DenseCorrespondence",
    "FrameContext",
    "FunctionPointSelector",
    "Region",
    "RegionProposer",
    "parse_index",
]
