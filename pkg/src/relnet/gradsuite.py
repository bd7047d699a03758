"""Finite-difference checks of every learnable module on small random instances."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, grad_check
from .dedup import DedupConfig, dedup_forward, dedup_loss, init_dedup_params
from .head import HeadConfig, head_forward, init_head_params, recognition_loss, sub_params
from .relation import RelationConfig, geometry_embedding, init_relation_params, relation_module_forward
from .rng import SplitMix64, derive_seed

MODULES = ("autodiff", "relation", "head", "dedup", "e2e")
SMALL_RELATION = dict(num_heads=4, d_k=8, d_g=16, d_f=16)


def random_boxes(rng: SplitMix64, n: int, clustered: bool = True) -> np.ndarray:
    """Boxes with some heavy overlaps, like a detector's duplicates."""
    centers = rng.uniform(20.0, 80.0, (n, 2))
    if clustered and n > 1:
        centers[1::2] = centers[0::2][: centers[1::2].shape[0]] + rng.normal(0.0, 3.0, (n // 2, 2))
    sizes = rng.uniform(10.0, 40.0, (n, 2))
    return np.concatenate([centers, sizes], axis=1)


def clear_relu_kinks(point: dict, boxes: np.ndarray, cfg: RelationConfig, rng: SplitMix64,
                     margin: float = 1e-3) -> None:
    """Resample every ``W_G`` until no geometry pre-activation sits within ``margin`` of 0.

    A finite-difference step straddling the ReLU kink would otherwise report
    a spurious mismatch.
    """
    emb = geometry_embedding(boxes, cfg)
    bound = 1.0 / np.sqrt(cfg.d_g)
    for name in [k for k in point if k.endswith("W_G")]:
        w = point[name]
        for _ in range(1000):
            if np.abs(emb @ w.T).min() > margin:
                break
            w = rng.uniform(-bound, bound, w.shape)
        point[name] = w


def _with_prefix(prefix: str, params: dict) -> dict:
    return {prefix + k: v for k, v in params.items()}


def relation_case(geo_mode: str, seed: int = 0, n: int = 5):
    rng = SplitMix64(derive_seed(seed, 1, ("ours", "none", "unary").index(geo_mode)))
    cfg = RelationConfig(**SMALL_RELATION, geo_mode=geo_mode)
    boxes = random_boxes(rng, n)
    readout = rng.normal(0.0, 1.0, (n, cfg.d_f))
    point = {"features": rng.normal(0.0, 1.0, (n, cfg.d_f)), **init_relation_params(cfg, rng)}
    clear_relu_kinks(point, boxes, cfg, rng)

    def f(p):
        params = {k: v for k, v in p.items() if k != "features"}
        return ad.sum(relation_module_forward(p["features"], boxes, params, cfg) * readout)

    return f, point


def head_case(seed: int = 0, n: int = 6):
    rng = SplitMix64(derive_seed(seed, 2))
    cfg = HeadConfig(d_in=12, d_hidden=16, r1=1, r2=1, num_classes=3, relation=RelationConfig(**SMALL_RELATION))
    boxes = random_boxes(rng, n)
    labels = rng.integers(0, cfg.num_classes + 1, (n,))
    labels[0] = 1
    targets = rng.normal(0.0, 0.5, (n, 4))
    point = {"roi": rng.normal(0.0, 1.0, (n, cfg.d_in)), **init_head_params(cfg, rng)}
    clear_relu_kinks(point, boxes, cfg.relation, rng)

    def f(p):
        params = {k: v for k, v in p.items() if k != "roi"}
        return recognition_loss(head_forward(p["roi"], boxes, params, cfg), labels, targets)

    return f, point


def dedup_case(seed: int = 0, n: int = 6):
    rng = SplitMix64(derive_seed(seed, 3))
    cfg = DedupConfig(d_feat=12, d_fused=16, rank_dim=16, relation=RelationConfig(**SMALL_RELATION))
    boxes = random_boxes(rng, n)
    scores = rng.uniform(0.05, 0.95, (n,))
    labels = (rng.random((n, len(cfg.etas))) < 0.3).astype(np.int64)
    point = {"feat": rng.normal(0.0, 1.0, (n, cfg.d_feat)), "s0": scores, **init_dedup_params(cfg, rng)}
    clear_relu_kinks(point, boxes, cfg.relation, rng)

    def f(p):
        params = {k: v for k, v in p.items() if k not in ("feat", "s0")}
        s1 = dedup_forward(p["feat"], scores, boxes, params, cfg)
        return dedup_loss(p["s0"], s1, labels)

    return f, point


def e2e_case(seed: int = 0, n: int = 6):
    """Joint loss, differentiated with respect to head parameters through the dedup branch."""
    rng = SplitMix64(derive_seed(seed, 4))
    rel = RelationConfig(**SMALL_RELATION)
    hcfg = HeadConfig(d_in=12, d_hidden=16, r1=1, r2=1, num_classes=2, relation=rel)
    dcfg = DedupConfig(d_feat=16, d_fused=16, rank_dim=16, relation=rel, prune_threshold=None)
    boxes = random_boxes(rng, n)
    labels = rng.integers(0, hcfg.num_classes + 1, (n,))
    targets = rng.normal(0.0, 0.5, (n, 4))
    dedup_labels = (rng.random((n, len(dcfg.etas))) < 0.3).astype(np.int64)
    roi = rng.normal(0.0, 1.0, (n, hcfg.d_in))
    point = {**_with_prefix("head/", init_head_params(hcfg, rng)), **_with_prefix("dedup/", init_dedup_params(dcfg, rng))}
    clear_relu_kinks(point, boxes, rel, rng)

    def f(p):
        out = head_forward(roi, boxes, sub_params(p, "head/"), hcfg)
        s0 = out.class_scores[:, 1]
        s1 = dedup_forward(out.features, s0.value, boxes, sub_params(p, "dedup/"), dcfg)
        rec = recognition_loss(out, labels, targets)
        return rec + dedup_loss(s0, s1, dedup_labels)

    return f, point


def autodiff_cases(seed: int = 0):
    rng = SplitMix64(derive_seed(seed, 5))
    x = rng.normal(0.0, 1.0, (3, 4))
    w = rng.uniform(0.1, 1.0, (3, 4))
    yield "quadratic", (lambda p: ad.sum(p["x"] * p["x"])), {"x": x}
    yield "softmax_rows", (lambda p: ad.sum(ad.softmax_rows(p["x"]) * w)), {"x": x}
    yield "weighted_softmax", (lambda p: ad.sum(ad.weighted_softmax(p["x"], p["w"], axis=0) * x)), {"x": x, "w": w}
    yield "matmul", (lambda p: ad.sum(ad.exp(ad.matmul(p["x"], ad.transpose(p["w"]))))), {"x": x, "w": w}
    yield "sigmoid_log", (lambda p: ad.sum(ad.log(ad.sigmoid(p["x"])))), {"x": x}


def iter_checks(module: str = "all", seed: int = 0) -> Iterator[tuple[str, Callable, dict]]:
    if module not in MODULES + ("all",):
        raise ad.ContractError(f"unknown module {module!r}; choose from {MODULES + ('all',)}")
    want = MODULES if module == "all" else (module,)
    if "autodiff" in want:
        for name, f, point in autodiff_cases(seed):
            yield f"autodiff/{name}", f, point
    if "relation" in want:
        for mode in ("ours", "none", "unary"):
            yield (f"relation/{mode}", *relation_case(mode, seed))
    if "head" in want:
        yield ("head/r1=r2=1", *head_case(seed))
    if "dedup" in want:
        yield ("dedup/network+loss", *dedup_case(seed))
    if "e2e" in want:
        yield ("e2e/joint", *e2e_case(seed))


def run_checks(module: str = "all", seed: int = 0, tolerance: float = 1e-4,
               max_coords: int | None = 24) -> dict[str, GradCheckReport]:
    return {name: grad_check(f, point, tolerance=tolerance, max_coords=max_coords, seed=seed)
            for name, f, point in iter_checks(module, seed)}
