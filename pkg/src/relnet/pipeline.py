"""Glue between scenes, models, duplicate removal methods and the evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ContractError, Node
from .baselines import NmsConfig, SoftNmsConfig, nms, soft_nms
from .dedup import DedupConfig, dedup_inference
from .evaluation import COCO_THRESHOLDS, DetectionSet, EvalReport, evaluate_map
from .geometry import decode_deltas, iou_matrix
from .head import HeadConfig, head_forward
from .synthgen import GenConfig, Scene

METHODS = ("none", "nms", "softnms", "learned", "oracle")
NMS_SWEEP = (0.3, 0.4, 0.5, 0.6, 0.7)
SOFTNMS_SWEEP = (0.2, 0.4, 0.6, 0.8, 1.0)
# fixed-seed splits of the default synthetic benchmark; they share one feature model
BENCH_TRAIN = GenConfig(seed=1, num_scenes=2000)
BENCH_EVAL = GenConfig(seed=2, num_scenes=500)


@dataclass
class Candidates:
    """Per-class candidate detections of one scene before duplicate removal."""

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    feats: np.ndarray


def raw_candidates(scene: Scene) -> Candidates:
    return Candidates(scene.det_boxes, scene.det_classes, scene.det_scores, scene.det_feats)


def head_candidates(scene: Scene, head_params: Mapping[str, np.ndarray], head_cfg: HeadConfig) -> Candidates:
    """Every proposal paired with every foreground class, scored by the head."""
    nodes = {k: Node(v) for k, v in head_params.items()}
    out = head_forward(scene.det_feats, scene.det_boxes, nodes, head_cfg)
    boxes = decode_deltas(scene.det_boxes, out.box_deltas.value)
    scores = out.class_scores.value[:, 1:]
    n, c = scores.shape
    return Candidates(
        boxes=np.repeat(boxes, c, axis=0),
        classes=np.tile(np.arange(c), n),
        scores=scores.reshape(-1),
        feats=np.repeat(out.features.value, c, axis=0),
    )


def _per_class(cands: Candidates):
    for c in np.unique(cands.classes):
        yield np.nonzero(cands.classes == c)[0]


def oracle_keep(scene: Scene, cands: Candidates) -> DetectionSet:
    """Keep, per ground truth, only the same-class candidate of highest IoU."""
    keep = []
    for g, (gb, gc) in enumerate(zip(scene.gt_boxes, scene.gt_classes)):
        idx = np.nonzero(cands.classes == gc)[0]
        if idx.size:
            ious = iou_matrix(cands.boxes[idx], gb[None])[:, 0]
            keep.append(idx[int(np.argmax(ious))])
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    return DetectionSet(cands.boxes[keep], cands.classes[keep], cands.scores[keep])


def apply_method(cands: Candidates, method: str, param: float | None = None,
                 dedup_params: Mapping[str, np.ndarray] | None = None, dedup_cfg: DedupConfig | None = None,
                 prune: bool = True, scene: Scene | None = None) -> DetectionSet:
    """Remove duplicates from ``cands`` and return the surviving scored detections.

    Learned dedup drops detections the network never scored (pruned or
    over the per-class cap) rather than reporting them with score 0.
    """
    if method == "none":
        return DetectionSet(cands.boxes, cands.classes, cands.scores)
    if method == "oracle":
        if scene is None:
            raise ContractError("oracle needs the scene's ground truth")
        return oracle_keep(scene, cands)
    if method == "nms":
        cfg = NmsConfig(0.5 if param is None else float(param))
        keep = np.concatenate([idx[nms(cands.boxes[idx], cands.scores[idx], cfg)] for idx in _per_class(cands)]
                              or [np.zeros(0, dtype=np.int64)])
        return DetectionSet(cands.boxes[keep], cands.classes[keep], cands.scores[keep])
    if method == "softnms":
        cfg = SoftNmsConfig(sigma=0.5 if param is None else float(param))
        keeps, scores = [], []
        for idx in _per_class(cands):
            sel, sc = soft_nms(cands.boxes[idx], cands.scores[idx], cfg)
            keeps.append(idx[sel])
            scores.append(sc)
        if not keeps:
            return DetectionSet(np.zeros((0, 4)), np.zeros(0), np.zeros(0))
        keep = np.concatenate(keeps)
        return DetectionSet(cands.boxes[keep], cands.classes[keep], np.concatenate(scores))
    if method == "learned":
        if dedup_params is None or dedup_cfg is None:
            raise ContractError("learned dedup needs parameters and a config")
        nodes = {k: Node(v) for k, v in dedup_params.items()}
        res = dedup_inference(cands.boxes, cands.classes, cands.scores, cands.feats, nodes, dedup_cfg, prune=prune)
        m = res.evaluated
        return DetectionSet(cands.boxes[m], cands.classes[m], res.final_score[m])
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_method(scenes: Sequence[Scene], method: str, param: float | None = None, *,
                    head: tuple[Mapping[str, np.ndarray], HeadConfig] | None = None,
                    dedup_params: Mapping[str, np.ndarray] | None = None, dedup_cfg: DedupConfig | None = None,
                    prune: bool = True, thresholds: Sequence[float] = COCO_THRESHOLDS,
                    candidates: Sequence[Candidates] | None = None) -> EvalReport:
    """mAP of ``method`` on ``scenes``; candidates come from the head when given, else the raw scene."""
    if candidates is None:
        candidates = scene_candidates(scenes, head)
    dets = [apply_method(c, method, param, dedup_params, dedup_cfg, prune, scene=s)
            for s, c in zip(scenes, candidates)]
    return evaluate_map([(s.gt_boxes, s.gt_classes) for s in scenes], dets, thresholds)


def scene_candidates(scenes: Sequence[Scene], head: tuple[Mapping[str, np.ndarray], HeadConfig] | None = None
                     ) -> list[Candidates]:
    if head is None:
        return [raw_candidates(s) for s in scenes]
    params, cfg = head
    return [head_candidates(s, params, cfg) for s in scenes]


@dataclass(frozen=True)
class SweepRow:
    method: str
    param: float | None
    map: float
    map50: float
    map75: float

    def to_dict(self) -> dict:
        return {"method": self.method, "param": self.param, "map": self.map, "map50": self.map50,
                "map75": self.map75}


def sweep(scenes: Sequence[Scene], nms_params: Sequence[float] = NMS_SWEEP,
          softnms_params: Sequence[float] = SOFTNMS_SWEEP, *, head=None, dedup_params=None,
          dedup_cfg: DedupConfig | None = None, candidates=None) -> list[SweepRow]:
    """NMS and SoftNMS parameter grids, plus the learned model when given."""
    if candidates is None:
        candidates = scene_candidates(scenes, head)
    runs = [("nms", p) for p in nms_params] + [("softnms", p) for p in softnms_params]
    if dedup_params is not None:
        runs.append(("learned", None))
    rows = []
    for method, p in runs:
        r = evaluate_method(scenes, method, p, dedup_params=dedup_params, dedup_cfg=dedup_cfg,
                            candidates=candidates)
        rows.append(SweepRow(method, p, r.map, r.map50, r.map75))
    return rows


def format_table(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'method':<10}{'param':>8}{'mAP':>9}{'mAP50':>9}{'mAP75':>9}"]
    for r in rows:
        p = "-" if r.param is None else f"{r.param:g}"
        lines.append(f"{r.method:<10}{p:>8}{r.map:>9.4f}{r.map50:>9.4f}{r.map75:>9.4f}")
    return "\n".join(lines)
