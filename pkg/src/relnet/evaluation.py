"""COCO-style mean average precision with 101-point interpolation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .geometry import iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0


@dataclass
class DetectionSet:
    """Final-scored detections of one scene."""

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    per_class: dict[int, list[float]] = field(default_factory=dict)

    def ap_at(self, t: float) -> float:
        j = _threshold_index(self.thresholds, t)
        if not self.per_class:
            return 0.0
        return float(np.mean([aps[j] for aps in self.per_class.values()]))

    @property
    def map(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([np.mean(aps) for aps in self.per_class.values()]))

    @property
    def map50(self) -> float | None:
        return self.ap_at(0.5) if _has(self.thresholds, 0.5) else None

    @property
    def map75(self) -> float | None:
        return self.ap_at(0.75) if _has(self.thresholds, 0.75) else None

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "map50": self.map50,
            "map75": self.map75,
            "thresholds": list(self.thresholds),
            "per_class": [
                {"class_id": int(c), "ap_per_threshold": [float(a) for a in aps]}
                for c, aps in sorted(self.per_class.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            thresholds=tuple(d["thresholds"]),
            per_class={int(e["class_id"]): list(e["ap_per_threshold"]) for e in d["per_class"]},
        )


def _has(thresholds, t) -> bool:
    return any(abs(x - t) < 1e-9 for x in thresholds)


def _threshold_index(thresholds, t) -> int:
    for j, x in enumerate(thresholds):
        if abs(x - t) < 1e-9:
            return j
    raise KeyError(f"threshold {t} not evaluated (have {list(thresholds)})")


def interpolated_ap(is_tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence."""
    if num_gt <= 0:
        raise ContractError("AP undefined without ground truth")
    is_tp = np.asarray(is_tp, dtype=bool)
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    recall = tp / num_gt
    precision = tp / np.arange(1, is_tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < envelope.size
    return float(np.where(valid, envelope[np.minimum(idx, envelope.size - 1)], 0.0).sum() / RECALL_POINTS.size)


def evaluate_map(gts: Sequence[tuple[np.ndarray, np.ndarray]], dets: Sequence[DetectionSet],
                 iou_thresholds: Sequence[float] = COCO_THRESHOLDS) -> EvalReport:
    """AP per class and IoU threshold.

    ``gts[s]`` is ``(boxes [G,4], classes [G])`` of scene ``s``; ``dets[s]``
    its scored detections. Detections are pooled per class across scenes and
    ranked by score (ties by scene then box coordinates, so input order never
    matters). Each is matched greedily to the unmatched same-class ground
    truth of highest IoU at or above the threshold.
    """
    if len(gts) != len(dets):
        raise ContractError(f"{len(gts)} ground-truth scenes vs {len(dets)} detection scenes")
    thresholds = tuple(float(t) for t in iou_thresholds)
    gt_boxes = [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b, _ in gts]
    gt_classes = [np.asarray(c, dtype=np.int64).reshape(-1) for _, c in gts]
    classes = sorted({int(c) for cs in gt_classes for c in cs})
    if not classes:
        raise ContractError("evaluate_map needs at least one ground truth")

    report = EvalReport(thresholds=thresholds)
    for c in classes:
        num_gt = 0
        rows = []  # (score, scene, box..., iou row against this scene's class-c GTs)
        for s, (gb, gc, ds) in enumerate(zip(gt_boxes, gt_classes, dets)):
            gmask = gc == c
            num_gt += int(gmask.sum())
            dmask = ds.classes == c
            if not dmask.any():
                continue
            db, dsc = ds.boxes[dmask], ds.scores[dmask]
            ious = iou_matrix(db, gb[gmask]) if gmask.any() else np.zeros((db.shape[0], 0))
            for k in range(db.shape[0]):
                rows.append((dsc[k], s, db[k], ious[k]))
        if not rows:
            report.per_class[c] = [0.0] * len(thresholds)
            continue
        keys = np.array([[-r[0], r[1], *r[2]] for r in rows])
        order = np.lexsort(keys.T[::-1])
        aps = []
        for t in thresholds:
            matched: dict[int, np.ndarray] = {}
            flags = np.zeros(len(rows), dtype=bool)
            for pos, i in enumerate(order):
                _, s, _, row = rows[i]
                if row.size == 0:
                    continue
                used = matched.setdefault(s, np.zeros(row.size, dtype=bool))
                cand = np.where(used | (row < t), -1.0, row)
                j = int(np.argmax(cand))
                if cand[j] >= 0:
                    used[j] = True
                    flags[pos] = True
            aps.append(interpolated_ap(flags, num_gt))
        report.per_class[c] = aps
    return report
