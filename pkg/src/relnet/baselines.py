"""Greedy NMS and Gaussian SoftNMS for a single class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .geometry import iou_matrix


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ContractError(f"NMS threshold must lie in (0, 1), got {self.iou_threshold}")


@dataclass(frozen=True)
class SoftNmsConfig:
    sigma: float = 0.5
    score_floor: float = 1e-4
    method: str = "gaussian"  # or "hard": drop iff IoU > iou_threshold
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.method not in ("gaussian", "hard"):
            raise ContractError(f"unknown SoftNMS method {self.method!r}")


def nms(boxes, scores, config: NmsConfig | float) -> np.ndarray:
    """Indices kept by greedy NMS, in selection order. Ties go to the earlier input."""
    if not isinstance(config, NmsConfig):
        config = NmsConfig(float(config))
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    kept = []
    for i in np.argsort(-scores, kind="stable"):
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed |= overlaps[i] > config.iou_threshold
    return np.asarray(kept, dtype=np.int64)


def soft_nms(boxes, scores, config: SoftNmsConfig | float) -> tuple[np.ndarray, np.ndarray]:
    """Iteratively pick the best detection and decay its neighbours' scores.

    Gaussian decay multiplies by ``exp(-IoU^2 / sigma)``. Detections that fall
    below ``score_floor`` after rescoring are dropped. Returns selected indices
    in selection order and their final scores.
    """
    if not isinstance(config, SoftNmsConfig):
        config = SoftNmsConfig(sigma=float(config))
    current = np.array(scores, dtype=np.float64)
    if current.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(current.size, dtype=bool)
    picked, picked_scores = [], []
    while alive.any():
        cand = np.nonzero(alive)[0]
        i = int(cand[np.argmax(current[cand])])
        picked.append(i)
        picked_scores.append(current[i])
        alive[i] = False
        rest = np.nonzero(alive)[0]
        if rest.size == 0:
            break
        ov = overlaps[i, rest]
        if config.method == "gaussian":
            current[rest] *= np.exp(-(ov * ov) / config.sigma)
        else:
            current[rest] = np.where(ov > config.iou_threshold, 0.0, current[rest])
        alive[rest[current[rest] < config.score_floor]] = False
    return np.asarray(picked, dtype=np.int64), np.asarray(picked_scores)
