"""Learned duplicate removal: rank embedding + feature fusion + one relation module + per-threshold classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, ShapeError
from .geometry import DEFAULT_WAVE_BASE, iou_matrix, sinusoid_embed
from .head import sub_params
from .relation import RelationConfig, check_fields, init_relation_params, relation_module_forward
from .rng import SplitMix64

DEFAULT_ETAS = (0.5, 0.6, 0.7, 0.8, 0.9)
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class DedupConfig:
    d_feat: int = 256
    d_fused: int = 128
    rank_dim: int = 128
    relation: RelationConfig = field(default_factory=lambda: RelationConfig(d_f=128, d_k=64, d_g=64, num_heads=16))
    etas: tuple[float, ...] = DEFAULT_ETAS
    n_cap: int = 100
    prune_threshold: float | None = 0.01
    wave_base: float = DEFAULT_WAVE_BASE

    def __post_init__(self):
        object.__setattr__(self, "etas", tuple(float(e) for e in self.etas))
        if not self.etas or any(not 0 < e < 1 for e in self.etas):
            raise ContractError(f"etas must lie in (0, 1): {self.etas}")
        if any(b <= a for a, b in zip(self.etas, self.etas[1:])):
            raise ContractError(f"etas must be strictly increasing: {self.etas}")
        if self.n_cap < 1:
            raise ContractError("n_cap must be >= 1")
        if self.relation.d_f != self.d_fused:
            raise ContractError(f"relation d_f={self.relation.d_f} must equal d_fused={self.d_fused}")
        if self.rank_dim % 2:
            raise ContractError("rank_dim must be even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["etas"] = list(self.etas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DedupConfig":
        check_fields(cls, d)
        d = dict(d)
        rel = d.pop("relation", None)
        if rel is None:
            rel = RelationConfig(d_f=d.get("d_fused", cls.d_fused))
        elif not isinstance(rel, RelationConfig):
            rel = RelationConfig.from_dict(rel)
        return cls(relation=rel, **d)


def init_dedup_params(cfg: DedupConfig, rng: SplitMix64) -> dict[str, np.ndarray]:
    def uni(shape, fan_in):
        b = 1 / math.sqrt(fan_in)
        return rng.uniform(-b, b, shape)

    params = {
        "W_f": uni((cfg.d_fused, cfg.d_feat), cfg.d_feat),
        "W_fR": uni((cfg.d_fused, cfg.rank_dim), cfg.rank_dim),
    }
    for k, v in init_relation_params(cfg.relation, rng).items():
        params[f"rm.{k}"] = v
    params["W_s"] = uni((len(cfg.etas), cfg.d_fused), cfg.d_fused)
    return params


def score_ranks(scores) -> np.ndarray:
    """1-based descending-score rank of each entry; equal scores keep input order."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    ranks = np.empty(s.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, s.shape[0] + 1)
    return ranks


def rank_embed(scores, rank_dim: int = 128, wave_base: float = DEFAULT_WAVE_BASE) -> np.ndarray:
    """Row ``n`` is the sinusoidal embedding of detection ``n``'s score rank."""
    if np.size(scores) < 1:
        raise ContractError("rank_embed needs at least one detection")
    return sinusoid_embed(score_ranks(scores).astype(np.float64), rank_dim, wave_base)


def dedup_forward(features, scores, boxes, params: Mapping[str, Node], cfg: DedupConfig) -> Node:
    """Per-threshold correctness probabilities ``s1`` of shape ``[N, K]``.

    ``scores`` only feed the (non-differentiable) rank embedding.
    """
    features = ad.as_node(features)
    score_vals = scores.value if isinstance(scores, Node) else np.asarray(scores, dtype=np.float64)
    n = features.shape[0]
    if n < 1:
        raise ContractError("dedup_forward needs at least one detection")
    if n > cfg.n_cap:
        raise ContractError(f"{n} detections exceed n_cap={cfg.n_cap}; truncate by score first")
    if features.shape != (n, cfg.d_feat) or score_vals.shape != (n,):
        raise ShapeError(f"features {features.shape} / scores {score_vals.shape} do not fit d_feat={cfg.d_feat}")
    ranks = rank_embed(score_vals, cfg.rank_dim, cfg.wave_base)
    fused = ad.matmul(features, ad.transpose(params["W_f"])) + ad.matmul(ranks, ad.transpose(params["W_fR"]))
    related = relation_module_forward(fused, boxes, sub_params(params, "rm."), cfg.relation)
    return ad.sigmoid(ad.matmul(related, ad.transpose(params["W_s"])))


def final_scores(s0, s1) -> np.ndarray:
    """``s0 * mean_eta(s1)``; ``s1`` may be ``[N]`` or ``[N, K]``."""
    s0 = np.asarray(s0, dtype=np.float64)
    s1 = np.asarray(s1, dtype=np.float64)
    if s1.ndim == 2:
        s1 = s1.mean(axis=1)
    if s0.shape != s1.shape:
        raise ContractError(f"length mismatch: s0 {s0.shape} vs s1 {s1.shape}")
    return s0 * s1


def assign_labels(det_boxes, det_scores, gt_boxes, eta: float) -> np.ndarray:
    """1 for the top-scoring detection matched to each ground truth, else 0.

    A detection matches the ground truth of largest IoU (ties: lowest index)
    when that IoU is at least ``eta``.
    """
    if not 0 < eta < 1:
        raise ContractError(f"eta must lie in (0, 1), got {eta}")
    det_scores = np.asarray(det_scores, dtype=np.float64)
    n = det_scores.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if n == 0 or gt_boxes.shape[0] == 0:
        return labels
    ious = iou_matrix(det_boxes, gt_boxes)
    best_gt = ious.argmax(axis=1)
    matched = ious[np.arange(n), best_gt] >= eta
    best_det: dict[int, int] = {}
    for i in np.nonzero(matched)[0]:
        g = int(best_gt[i])
        if g not in best_det or det_scores[i] > det_scores[best_det[g]]:
            best_det[g] = int(i)
    labels[list(best_det.values())] = 1
    return labels


def assign_label_matrix(det_boxes, det_scores, gt_boxes, etas: Sequence[float]) -> np.ndarray:
    """``[N, K]`` labels, one column per threshold."""
    cols = [assign_labels(det_boxes, det_scores, gt_boxes, e) for e in etas]
    return np.stack(cols, axis=1) if cols else np.zeros((len(det_scores), 0), dtype=np.int64)


def dedup_loss(s0, s1, labels) -> Node:
    """Binary cross-entropy on the product ``s0 * s1``, averaged over detections and thresholds."""
    s0, s1 = ad.as_node(s0), ad.as_node(s1)
    labels = np.asarray(labels, dtype=np.float64)
    if s1.ndim == 1:
        s1 = ad.reshape(s1, (-1, 1))
    if labels.ndim == 1:
        labels = labels[:, None]
    if s1.shape != labels.shape or s0.shape != (s1.shape[0],):
        raise ShapeError(f"dedup_loss shapes: s0 {s0.shape}, s1 {s1.shape}, labels {labels.shape}")
    p = ad.clip(ad.reshape(s0, (-1, 1)) * s1, PROB_CLAMP, 1 - PROB_CLAMP)
    terms = labels * ad.log(p) + (1 - labels) * ad.log(1 - p)
    return ad.neg(ad.mean(terms))


@dataclass
class ScoredDetections:
    s1: np.ndarray  # mean over thresholds; 0 where the network did not run
    final_score: np.ndarray
    evaluated: np.ndarray  # bool mask of detections the network scored


def select_survivors(s0: np.ndarray, cfg: DedupConfig, prune: bool = True) -> np.ndarray:
    """Indices (into ``s0``) kept for the network: prune, then cap at n_cap by score."""
    idx = np.arange(s0.shape[0])
    if prune and cfg.prune_threshold is not None:
        idx = idx[s0 > cfg.prune_threshold]
    if idx.size > cfg.n_cap:
        top = np.argsort(-s0[idx], kind="stable")[: cfg.n_cap]
        idx = np.sort(idx[top])
    return idx


def dedup_inference(boxes, classes, s0, features, params: Mapping[str, Node], cfg: DedupConfig,
                    prune: bool = True) -> ScoredDetections:
    """Run the network per class on surviving detections; everything else scores 0."""
    boxes = np.asarray(boxes, dtype=np.float64)
    classes = np.asarray(classes)
    s0 = np.asarray(s0, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n = s0.shape[0]
    s1 = np.zeros(n)
    evaluated = np.zeros(n, dtype=bool)
    for c in np.unique(classes):
        members = np.nonzero(classes == c)[0]
        keep = members[select_survivors(s0[members], cfg, prune)]
        if keep.size == 0:
            continue
        probs = dedup_forward(features[keep], s0[keep], boxes[keep], params, cfg).value
        s1[keep] = probs.mean(axis=1)
        evaluated[keep] = True
    final = np.where(evaluated, s0 * s1, 0.0)
    return ScoredDetections(s1=s1, final_score=final, evaluated=evaluated)
