"""Object relation module: geometry-aware multi-head attention over a set of boxes.

Weight tensors are stacked over heads. Relation-weight tensors are indexed
``[head, m, n]`` where ``n`` is the receiving object and ``m`` the
contributing one; normalization runs over ``m``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, ShapeError
from .geometry import DEFAULT_EPS, DEFAULT_WAVE_BASE, embed_geom, rel_geom_pairs
from .rng import SplitMix64

GEO_MODES = ("ours", "none", "unary")
DEFAULT_GEO_SCALE = 100.0


@dataclass(frozen=True)
class RelationConfig:
    num_heads: int = 16
    d_k: int = 64
    d_g: int = 64
    d_f: int = 128
    geo_mode: str = "ours"
    eps: float = DEFAULT_EPS
    wave_base: float = DEFAULT_WAVE_BASE
    # relative geometry is multiplied by this before the sinusoids; at 1 the
    # embedding of nearby pairs is almost constant and whole heads die in the ReLU
    geo_scale: float = DEFAULT_GEO_SCALE

    def __post_init__(self):
        if min(self.num_heads, self.d_k, self.d_g, self.d_f) <= 0:
            raise ContractError(f"relation dims must be positive: {self}")
        if self.d_f % self.num_heads:
            raise ContractError(f"d_f={self.d_f} not divisible by num_heads={self.num_heads}")
        if self.d_g % 8:
            raise ContractError(f"d_g={self.d_g} must be divisible by 8")
        if not self.geo_scale > 0:
            raise ContractError(f"geo_scale must be positive, got {self.geo_scale}")
        if self.geo_mode not in GEO_MODES:
            raise ContractError(f"unknown geo_mode {self.geo_mode!r}")

    @property
    def d_v(self) -> int:
        return self.d_f // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelationConfig":
        check_fields(cls, d)
        return cls(**d)


def check_fields(cls, d: Mapping) -> None:
    """Reject keys that are not fields of dataclass ``cls``."""
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ContractError(f"unknown {cls.__name__} fields: {sorted(unknown)}")


def init_relation_params(cfg: RelationConfig, rng: SplitMix64) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight."""
    r, dk, df, dg = cfg.num_heads, cfg.d_k, cfg.d_f, cfg.d_g
    bound_f, bound_g = 1 / math.sqrt(df), 1 / math.sqrt(dg)
    params = {
        "W_K": rng.uniform(-bound_f, bound_f, (r, dk, df)),
        "W_Q": rng.uniform(-bound_f, bound_f, (r, dk, df)),
        "W_V": rng.uniform(-bound_f, bound_f, (r, cfg.d_v, df)),
    }
    if cfg.geo_mode == "ours":
        params["W_G"] = rng.uniform(-bound_g, bound_g, (r, dg))
    elif cfg.geo_mode == "unary":
        params["W_U"] = rng.uniform(-bound_g, bound_g, (df, dg))
    return params


def param_count(cfg: RelationConfig) -> int:
    """N_r (2 d_f d_k + d_g) + d_f^2."""
    return cfg.num_heads * (2 * cfg.d_f * cfg.d_k + cfg.d_g) + cfg.d_f**2


def flop_count(cfg: RelationConfig, n: int) -> int:
    """N d_f (2 N_r d_k + d_f) + N^2 N_r (d_g + d_k + d_f/N_r + 1)."""
    if n < 1:
        raise ContractError("flop_count needs n >= 1")
    nr, dk, dg, df = cfg.num_heads, cfg.d_k, cfg.d_g, cfg.d_f
    return n * df * (2 * nr * dk + df) + n * n * nr * (dg + dk + df // nr + 1)


def cost_formula(num_heads: int, d_k: int, d_g: int, d_f: int, n: int) -> tuple[int, int]:
    """Raw formulas without config validation other than d_f / N_r divisibility."""
    if num_heads and d_f % num_heads:
        raise ContractError(f"d_f={d_f} not divisible by num_heads={num_heads}")
    params = num_heads * (2 * d_f * d_k + d_g) + d_f**2
    per_head_v = d_f // num_heads if num_heads else 0
    flops = n * d_f * (2 * num_heads * d_k + d_f) + n * n * num_heads * (d_g + d_k + per_head_v + 1)
    return params, flops


def geometry_embedding(boxes: np.ndarray, cfg: RelationConfig) -> np.ndarray:
    """``[N, N, d_g]`` pair embeddings; entry ``[m, n]`` embeds geometry of n relative to m."""
    return embed_geom(cfg.geo_scale * rel_geom_pairs(boxes, cfg.eps), cfg.d_g, cfg.wave_base)


def _check_inputs(features: Node, boxes: np.ndarray, cfg: RelationConfig) -> None:
    if features.ndim != 2 or features.shape[1] != cfg.d_f:
        raise ShapeError(f"features must be [N, {cfg.d_f}], got {features.shape}")
    if features.shape[0] < 1:
        raise ContractError("relation module needs at least one object")
    if np.shape(boxes) != (features.shape[0], 4):
        raise ShapeError(f"boxes {np.shape(boxes)} do not match features {features.shape}")


def _project(features: Node, weight) -> Node:
    # [N, d_f] x [R, d, d_f]^T -> [R, N, d]
    return ad.matmul(features, ad.transpose(weight, (0, 2, 1)))


def _head_slice(x: Node, head: int | None) -> Node:
    return x if head is None else x[head]


def appearance_weights(features, params: Mapping[str, Node], cfg: RelationConfig, head: int | None = None) -> Node:
    """Scaled dot products ``[R, N, N]`` (or ``[N, N]`` for one head), entry ``[m, n]``."""
    features = ad.as_node(features)
    keys = _project(features, params["W_K"])
    queries = _project(features, params["W_Q"])
    logits = ad.matmul(keys, ad.transpose(queries, (0, 2, 1))) * (1.0 / math.sqrt(cfg.d_k))
    return _head_slice(logits, head)


def geometry_weights(boxes, params: Mapping[str, Node], cfg: RelationConfig, head: int | None = None,
                     embedding: np.ndarray | None = None) -> Node:
    """ReLU-trimmed geometric weights ``[R, N, N]``, entry ``[m, n]``."""
    if cfg.geo_mode != "ours":
        raise ContractError(f"geometry_weights is defined only in 'ours' mode, not {cfg.geo_mode!r}")
    if embedding is None:
        embedding = geometry_embedding(np.asarray(boxes, float), cfg)
    n = embedding.shape[0]
    flat = embedding.reshape(n * n, cfg.d_g)
    raw = ad.matmul(flat, ad.transpose(params["W_G"]))  # [N*N, R]
    raw = ad.transpose(ad.reshape(raw, (n, n, cfg.num_heads)), (2, 0, 1))
    return _head_slice(ad.relu(raw), head)


def relation_weights(omega_a, omega_g) -> Node:
    """Normalize ``omega_g * exp(omega_a)`` over contributors ``m`` (axis -2).

    Columns whose geometric weights are all zero come out as zero.
    """
    omega_g = ad.as_node(omega_g)
    if np.any(omega_g.value < 0):
        raise ContractError("geometric weights must be nonnegative")
    return ad.weighted_softmax(omega_a, omega_g, axis=-2)


def unary_embedding(boxes: np.ndarray, cfg: RelationConfig) -> np.ndarray:
    return embed_geom(np.asarray(boxes, float), cfg.d_g, cfg.wave_base)


def relation_module_forward(features, boxes, params: Mapping[str, Node], cfg: RelationConfig,
                            return_weights: bool = False, embedding: np.ndarray | None = None):
    """Augment each object's feature with the concatenated per-head relation features.

    Output has the same ``[N, d_f]`` shape as the input. With
    ``return_weights`` the ``[R, N, N]`` relation-weight Node is returned too.
    """
    features = ad.as_node(features)
    boxes = np.asarray(boxes, dtype=np.float64)
    _check_inputs(features, boxes, cfg)
    n = features.shape[0]

    attend = features
    if cfg.geo_mode == "unary":
        attend = features + ad.matmul(unary_embedding(boxes, cfg), ad.transpose(params["W_U"]))

    omega_a = appearance_weights(attend, params, cfg)
    if cfg.geo_mode == "ours":
        omega_g = geometry_weights(boxes, params, cfg, embedding=embedding)
    else:
        omega_g = Node(np.ones((cfg.num_heads, n, n)))
    weights = ad.weighted_softmax(omega_a, omega_g, axis=-2)

    values = _project(attend, params["W_V"])  # [R, N, d_v]
    relation = ad.matmul(ad.transpose(weights, (0, 2, 1)), values)  # [R, N(n), d_v]
    relation = ad.reshape(ad.transpose(relation, (1, 0, 2)), (n, cfg.d_f))
    out = features + relation
    return (out, weights) if return_weights else out


class RelationPair(NamedTuple):
    n: int
    m: int
    head: int
    weight: float


def top_relation_pairs(features, boxes, params: Mapping[str, Node], cfg: RelationConfig, k: int) -> list[RelationPair]:
    """The ``k`` largest off-diagonal relation weights, ties by ascending (n, m, head)."""
    if k < 0:
        raise ContractError("k must be nonnegative")
    _, weights = relation_module_forward(features, boxes, params, cfg, return_weights=True)
    w = weights.value
    r_idx, m_idx, n_idx = np.nonzero(~np.eye(w.shape[1], dtype=bool)[None].repeat(w.shape[0], 0))
    vals = w[r_idx, m_idx, n_idx]
    order = np.lexsort((r_idx, m_idx, n_idx, -vals))[:k]
    return [RelationPair(int(n_idx[i]), int(m_idx[i]), int(r_idx[i]), float(vals[i])) for i in order]


def dump_relation_pairs(pairs, boxes, **extra) -> list[str]:
    """One JSON line per pair with fields n, m, head, weight, box_n, box_m."""
    boxes = np.asarray(boxes, dtype=np.float64)
    lines = []
    for p in pairs:
        rec = dict(extra)
        rec.update(n=p.n, m=p.m, head=p.head, weight=p.weight,
                   box_n=boxes[p.n].tolist(), box_m=boxes[p.m].tolist())
        lines.append(json.dumps(rec))
    return lines
