"""Keypoint-transfer metrics: average keypoint distance (AKD) and average
precision at pixel thresholds (AP@k)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySet, SchemaError

THRESHOLDS = (15, 30, 45)
CSV_COLUMNS = ("image_id", "gt_x", "gt_y", "pred_x", "pred_y")


@dataclass(frozen=True, eq=False)
class KeypointPairSet:
    gt: np.ndarray  # (M, 2) pixels
    pred: np.ndarray  # (M, 2) pixels
    image_ids: tuple[str, ...]

    def __post_init__(self):
        gt = np.asarray(self.gt, float).reshape(-1, 2)
        pred = np.asarray(self.pred, float).reshape(-1, 2)
        if len(gt) == 0:
            raise EmptySet("keypoint pair set is empty")
        if gt.shape != pred.shape or len(self.image_ids) != len(gt):
            raise SchemaError("ground truth, predictions and image ids differ in length")
        if not (np.all(np.isfinite(gt)) and np.all(np.isfinite(pred))):
            raise SchemaError("keypoint pixels must be finite")
        object.__setattr__(self, "gt", gt)
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "image_ids", tuple(str(i) for i in self.image_ids))

    @classmethod
    def from_pairs(cls, pairs, image_ids=None) -> KeypointPairSet:
        pairs = list(pairs)
        if not pairs:
            raise EmptySet("keypoint pair set is empty")
        gt = [p[0] for p in pairs]
        pred = [p[1] for p in pairs]
        ids = image_ids if image_ids is not None else [str(i) for i in range(len(pairs))]
        return cls(np.array(gt, float), np.array(pred, float), tuple(ids))

    def __len__(self) -> int:
        return len(self.gt)

    def distances(self) -> np.ndarray:
        d = self.pred - self.gt
        # explicit sqrt of the squared sum so each distance is correctly rounded
        return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])


def _as_set(pairs) -> KeypointPairSet:
    return pairs if isinstance(pairs, KeypointPairSet) else KeypointPairSet.from_pairs(pairs)


def akd(pairs) -> float:
    d = _as_set(pairs).distances()
    # fsum makes the mean independent of summation order
    return math.fsum(d) / len(d)


def ap_at(pairs, threshold: float) -> float:
    """Fraction of pairs whose distance is at most ``threshold`` (inclusive)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    d = _as_set(pairs).distances()
    return float(np.count_nonzero(d <= threshold) / len(d))


@dataclass(frozen=True)
class MetricsReport:
    akd: float
    ap15: float
    ap30: float
    ap45: float
    n_pairs: int = 0

    def to_dict(self) -> dict:
        return {"akd": self.akd, "ap15": self.ap15, "ap30": self.ap30, "ap45": self.ap45, "n_pairs": self.n_pairs}

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(float(d["akd"]), float(d["ap15"]), float(d["ap30"]), float(d["ap45"]), int(d.get("n_pairs", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        cols = ("akd", "ap15", "ap30", "ap45", "n_pairs")
        d = self.to_dict()
        return ",".join(cols) + "\n" + ",".join(repr(d[c]) for c in cols) + "\n"

    def table_row(self, label: str = "method") -> str:
        """One table row: AKD in pixels, AP values as percentages."""
        return (
            f"| {label} | {self.akd:.2f} | {100 * self.ap15:.2f}% | {100 * self.ap30:.2f}% | {100 * self.ap45:.2f}% |"
        )

    @staticmethod
    def table_header() -> str:
        return "| Method | AKD (pixel) | AP@15 | AP@30 | AP@45 |\n|---|---|---|---|---|"


def evaluate_report(pairs) -> MetricsReport:
    s = _as_set(pairs)
    return MetricsReport(akd(s), *(ap_at(s, t) for t in THRESHOLDS), n_pairs=len(s))


def read_pairs_csv(path) -> KeypointPairSet:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in CSV_COLUMNS):
            raise SchemaError(f"CSV must have columns {', '.join(CSV_COLUMNS)}")
        rows = list(reader)
    if not rows:
        raise EmptySet("CSV contains no keypoint pairs")
    try:
        gt = [(float(r["gt_x"]), float(r["gt_y"])) for r in rows]
        pred = [(float(r["pred_x"]), float(r["pred_y"])) for r in rows]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"non-numeric pixel value: {exc}") from exc
    return KeypointPairSet(np.array(gt), np.array(pred), tuple(r["image_id"] for r in rows))
