"""2fc recognition head with optional stacked relation modules after each fc."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, ShapeError
from .relation import RelationConfig, check_fields, geometry_embedding, init_relation_params, relation_module_forward
from .rng import SplitMix64


@dataclass(frozen=True)
class HeadConfig:
    d_in: int = 256
    d_hidden: int = 128
    r1: int = 1
    r2: int = 1
    num_classes: int = 4
    relation: RelationConfig = field(default_factory=lambda: RelationConfig(d_f=128))

    def __post_init__(self):
        if min(self.d_in, self.d_hidden, self.num_classes) <= 0:
            raise ContractError("head dims must be positive")
        if self.r1 < 0 or self.r2 < 0:
            raise ContractError("relation repeat counts must be >= 0")
        if self.relation.d_f != self.d_hidden:
            raise ContractError(f"relation d_f={self.relation.d_f} must equal d_hidden={self.d_hidden}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeadConfig":
        check_fields(cls, d)
        d = dict(d)
        rel = d.pop("relation", None)
        if rel is None:
            rel = RelationConfig(d_f=d.get("d_hidden", cls.d_hidden))
        elif not isinstance(rel, RelationConfig):
            rel = RelationConfig.from_dict(rel)
        return cls(relation=rel, **d)


@dataclass
class HeadOutput:
    logits: Node
    class_scores: Node  # [N, C+1], column 0 is background
    box_deltas: Node  # [N, 4], class agnostic
    features: Node  # [N, d_hidden], input to the score/box layers


def _linear_init(rng: SplitMix64, d_out: int, d_in: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, (d_out, d_in)), rng.uniform(-bound, bound, (d_out,))


def init_head_params(cfg: HeadConfig, rng: SplitMix64) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    params["fc1.W"], params["fc1.b"] = _linear_init(rng, cfg.d_hidden, cfg.d_in)
    for i in range(cfg.r1):
        for k, v in init_relation_params(cfg.relation, rng).items():
            params[f"rm1.{i}.{k}"] = v
    params["fc2.W"], params["fc2.b"] = _linear_init(rng, cfg.d_hidden, cfg.d_hidden)
    for i in range(cfg.r2):
        for k, v in init_relation_params(cfg.relation, rng).items():
            params[f"rm2.{i}.{k}"] = v
    params["cls.W"], params["cls.b"] = _linear_init(rng, cfg.num_classes + 1, cfg.d_hidden)
    params["box.W"], params["box.b"] = _linear_init(rng, 4, cfg.d_hidden)
    return params


def sub_params(params: Mapping[str, Node], prefix: str) -> dict[str, Node]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def linear(x, params: Mapping[str, Node], name: str) -> Node:
    return ad.matmul(x, ad.transpose(params[f"{name}.W"])) + params[f"{name}.b"]


def head_forward(roi_feats, boxes, params: Mapping[str, Node], cfg: HeadConfig) -> HeadOutput:
    """fc -> relu -> RM x r1 -> fc -> relu -> RM x r2 -> (scores, box deltas)."""
    roi_feats = ad.as_node(roi_feats)
    boxes = np.asarray(boxes, dtype=np.float64)
    if roi_feats.ndim != 2 or roi_feats.shape[1] != cfg.d_in:
        raise ShapeError(f"roi features must be [N, {cfg.d_in}], got {roi_feats.shape}")
    if roi_feats.shape[0] < 1 or boxes.shape != (roi_feats.shape[0], 4):
        raise ShapeError(f"boxes {boxes.shape} do not match roi features {roi_feats.shape}")
    embedding = None
    if cfg.r1 + cfg.r2 and cfg.relation.geo_mode == "ours":
        embedding = geometry_embedding(boxes, cfg.relation)

    h = ad.relu(linear(roi_feats, params, "fc1"))
    for i in range(cfg.r1):
        h = relation_module_forward(h, boxes, sub_params(params, f"rm1.{i}."), cfg.relation, embedding=embedding)
    h = ad.relu(linear(h, params, "fc2"))
    for i in range(cfg.r2):
        h = relation_module_forward(h, boxes, sub_params(params, f"rm2.{i}."), cfg.relation, embedding=embedding)
    logits = linear(h, params, "cls")
    return HeadOutput(
        logits=logits,
        class_scores=ad.softmax_rows(logits),
        box_deltas=linear(h, params, "box"),
        features=h,
    )


def recognition_loss(output: HeadOutput, labels, regression_targets, return_terms: bool = False):
    """Mean softmax cross-entropy plus smooth-L1 box loss over foreground proposals.

    ``labels`` are in ``[0, C]`` with 0 meaning background; background rows of
    ``regression_targets`` are ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, num_cols = output.logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_cols):
        raise ContractError(f"labels must lie in [0, {num_cols - 1}]")
    logp = ad.log_softmax_rows(output.logits)
    ce = ad.neg(ad.mean(logp[np.arange(n), labels]))
    fg = np.nonzero(labels > 0)[0]
    if fg.size:
        targets = np.asarray(regression_targets, dtype=np.float64)[fg]
        diff = output.box_deltas[fg] - targets
        box = ad.sum(ad.smooth_l1(diff)) * (1.0 / fg.size)
    else:
        box = Node(0.0)
    total = ce + box
    return (total, ce, box) if return_terms else total
