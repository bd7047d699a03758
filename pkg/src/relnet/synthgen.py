"""Synthetic detection scenes standing in for a backbone + proposal network.

Each scene holds ground-truth boxes and candidate detections. Every ground
truth spawns ``duplicates_per_gt`` jittered detections whose score is a noisy
increasing function of their IoU with it; ``background_count`` extra
detections land anywhere with low scores. Detection features mix a class
prototype, a noisy localization-quality code, the true regression offset and
white noise, so a learned model has signal beyond the score ranking.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .autodiff import ContractError
from .geometry import clip_to_scene, encode_deltas, iou_matrix
from .rng import SplitMix64, derive_seed

FORMAT_NAME = "relnet-scenes"
FORMAT_VERSION = 1


class SceneFormatError(ValueError):
    """Malformed scene file; the message names the offending line."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    num_scenes: int = 100
    num_classes: int = 4
    width: float = 640.0
    height: float = 480.0
    gt_min: int = 2
    gt_max: int = 6
    gt_size_min: float = 40.0
    gt_size_max: float = 160.0
    # probability that a new object is placed next to an existing one of the same class
    crowd_prob: float = 0.35
    duplicates_per_gt: int = 6
    background_count: int = 6
    # per-duplicate jitter is scaled by a uniform quality draw in [0, 1)
    pos_jitter: float = 0.1
    size_jitter: float = 0.12
    score_slope: float = 0.9
    score_bias: float = 0.05
    score_noise: float = 0.05
    background_score_max: float = 0.3
    d_in: int = 64
    # the feature model (class prototypes, projections) is shared by every split drawn from it
    feature_seed: int = 0
    proto_scale: float = 1.0
    box_mix: float = 1.0
    quality_noise: float = 0.03
    feat_noise: float = 0.3

    def __post_init__(self):
        counts = (self.num_scenes, self.num_classes, self.gt_min, self.gt_max, self.duplicates_per_gt,
                  self.background_count, self.d_in)
        if any(c < 0 for c in counts) or self.num_classes < 1 or self.d_in < 1:
            raise ContractError(f"invalid counts in {self}")
        if self.gt_max < self.gt_min:
            raise ContractError("gt_max < gt_min")
        if self.width <= 0 or self.height <= 0:
            raise ContractError("scene size must be positive")
        if not 0 < self.gt_size_min <= self.gt_size_max <= min(self.width, self.height):
            raise ContractError("ground-truth size range must fit in the scene")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Scene:
    scene_id: int
    gt_boxes: np.ndarray  # [G, 4]
    gt_classes: np.ndarray  # [G]
    det_boxes: np.ndarray  # [N, 4]
    det_classes: np.ndarray  # [N]
    det_scores: np.ndarray  # [N]
    det_feats: np.ndarray  # [N, d]

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        self.det_boxes = np.asarray(self.det_boxes, dtype=np.float64).reshape(-1, 4)
        self.det_classes = np.asarray(self.det_classes, dtype=np.int64).reshape(-1)
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        n = self.det_scores.shape[0]
        self.det_feats = np.asarray(self.det_feats, dtype=np.float64).reshape(n, -1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.scene_id == other.scene_id and all(
            a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.gt_boxes, self.gt_classes, self.det_boxes, self.det_classes, self.det_scores, self.det_feats)

    @property
    def num_dets(self) -> int:
        return self.det_scores.shape[0]


def feature_bank(cfg: GenConfig) -> dict[str, np.ndarray]:
    """Fixed projection vectors shared by all scenes of a config."""
    rng = SplitMix64(derive_seed(cfg.feature_seed, 0xFEA7))
    d = cfg.d_in
    return {
        "protos": rng.normal(0.0, cfg.proto_scale, (cfg.num_classes + 1, d)),
        "quality": rng.normal(0.0, 1.0, (d,)),
        "deltas": rng.normal(0.0, 0.5, (d, 4)),
    }


def _sample_gts(cfg: GenConfig, rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    count = rng.integers(cfg.gt_min, cfg.gt_max + 1)
    boxes, classes = [], []
    for _ in range(count):
        w, h = rng.uniform(cfg.gt_size_min, cfg.gt_size_max, (2,))
        crowd, side, frac = rng.random((3,))
        if boxes and crowd < cfg.crowd_prob:
            j = rng.integers(0, len(boxes))
            cls = classes[j]
            ref = boxes[j]
            # neighbour shifted by 0.4-0.9 of the reference size along one axis
            shift = (0.4 + 0.5 * frac) * (1 if side < 0.5 else -1)
            horizontal = rng.random() < 0.5
            cx = ref[0] + (shift * ref[2] if horizontal else 0.0)
            cy = ref[1] + (0.0 if horizontal else shift * ref[3])
            w, h = ref[2] * (0.8 + 0.4 * frac), ref[3] * (0.8 + 0.4 * (1 - frac))
        else:
            cls = rng.integers(0, cfg.num_classes)
            cx, cy = rng.random((2,)) * (cfg.width, cfg.height)
        w, h = min(w, cfg.width), min(h, cfg.height)
        cx = float(np.clip(cx, w / 2, cfg.width - w / 2))
        cy = float(np.clip(cy, h / 2, cfg.height - h / 2))
        boxes.append((cx, cy, float(w), float(h)))
        classes.append(int(cls))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64)


def generate_scene(cfg: GenConfig, index: int, bank: Mapping[str, np.ndarray] | None = None) -> Scene:
    bank = feature_bank(cfg) if bank is None else bank
    rng = SplitMix64(derive_seed(cfg.seed, index))
    gt_boxes, gt_classes = _sample_gts(cfg, rng)
    g, m, b = gt_boxes.shape[0], cfg.duplicates_per_gt, cfg.background_count

    src = np.repeat(np.arange(g), m)
    parent = gt_boxes[src]
    quality = rng.random((src.size,))
    offsets = rng.normal(0.0, 1.0, (src.size, 4))
    dup = np.empty_like(parent)
    dup[:, 0] = parent[:, 0] + offsets[:, 0] * cfg.pos_jitter * quality * parent[:, 2]
    dup[:, 1] = parent[:, 1] + offsets[:, 1] * cfg.pos_jitter * quality * parent[:, 3]
    dup[:, 2] = parent[:, 2] * np.exp(offsets[:, 2] * cfg.size_jitter * quality)
    dup[:, 3] = parent[:, 3] * np.exp(offsets[:, 3] * cfg.size_jitter * quality)
    dup = clip_to_scene(dup, cfg.width, cfg.height)
    dup_iou = iou_matrix(dup, gt_boxes)[np.arange(src.size), src] if src.size else np.zeros(0)
    dup_scores = np.clip(cfg.score_slope * dup_iou + cfg.score_bias + rng.normal(0.0, cfg.score_noise, (src.size,)),
                         0.0, 1.0)

    bg_wh = rng.uniform(cfg.gt_size_min, cfg.gt_size_max, (b, 2))
    bg_xy = rng.random((b, 2)) * (cfg.width, cfg.height)
    bg = clip_to_scene(np.concatenate([bg_xy, bg_wh], axis=1), cfg.width, cfg.height)
    bg_classes = rng.integers(0, cfg.num_classes, (b,)) if b else np.zeros(0, dtype=np.int64)
    bg_scores = cfg.background_score_max * rng.random((b,)) ** 2

    det_boxes = np.concatenate([dup, bg]) if b else dup
    det_classes = np.concatenate([gt_classes[src], bg_classes]).astype(np.int64)
    det_scores = np.concatenate([dup_scores, bg_scores])
    n = det_scores.shape[0]

    # localization quality: IoU with the best-overlapping ground truth of any class
    best_iou = iou_matrix(det_boxes, gt_boxes).max(axis=1) if g and n else np.zeros(n)
    q_code = best_iou + rng.normal(0.0, cfg.quality_noise, (n,))
    deltas = np.zeros((n, 4))
    if src.size:
        deltas[: src.size] = np.clip(encode_deltas(dup, parent), -3.0, 3.0)
    proto_idx = np.concatenate([gt_classes[src], np.full(b, cfg.num_classes)]).astype(np.int64)
    feats = (
        bank["protos"][proto_idx]
        + cfg.box_mix * (q_code[:, None] * bank["quality"][None, :] + deltas @ bank["deltas"].T)
        + rng.normal(0.0, cfg.feat_noise, (n, cfg.d_in))
    )
    return Scene(index, gt_boxes, gt_classes, det_boxes, det_classes, det_scores, feats)


def generate(cfg: GenConfig) -> list[Scene]:
    """``cfg.num_scenes`` scenes; scene ``i`` depends only on (seed, i)."""
    bank = feature_bank(cfg)
    return [generate_scene(cfg, i, bank) for i in range(cfg.num_scenes)]


# ---------------------------------------------------------------- file I/O


def _scene_record(s: Scene) -> dict:
    return {
        "scene_id": int(s.scene_id),
        "gts": [{"box": b.tolist(), "class": int(c)} for b, c in zip(s.gt_boxes, s.gt_classes)],
        "dets": [
            {"box": b.tolist(), "class": int(c), "score": float(sc), "feat": f.tolist()}
            for b, c, sc, f in zip(s.det_boxes, s.det_classes, s.det_scores, s.det_feats)
        ],
    }


def write_scenes(scenes: Iterable[Scene], path) -> None:
    """JSON-lines file: one header line, then one record per scene."""
    scenes = list(scenes)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(scenes)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in scenes:
            fh.write(json.dumps(_scene_record(s)) + "\n")


def _parse_box(v, where: str) -> list[float]:
    if not (isinstance(v, list) and len(v) == 4 and all(isinstance(x, (int, float)) for x in v)):
        raise SceneFormatError(f"{where}: box must be 4 numbers")
    if not (v[2] > 0 and v[3] > 0):
        raise SceneFormatError(f"{where}: box needs positive width and height")
    return [float(x) for x in v]


def _parse_scene(rec, lineno: int) -> Scene:
    where = f"line {lineno}"
    if not isinstance(rec, dict) or not {"scene_id", "gts", "dets"} <= rec.keys():
        raise SceneFormatError(f"{where}: record needs scene_id, gts, dets")
    try:
        gt_boxes = [_parse_box(g["box"], where) for g in rec["gts"]]
        gt_classes = [int(g["class"]) for g in rec["gts"]]
        det_boxes = [_parse_box(d["box"], where) for d in rec["dets"]]
        det_classes = [int(d["class"]) for d in rec["dets"]]
        det_scores = [float(d["score"]) for d in rec["dets"]]
        feats = [[float(x) for x in d["feat"]] for d in rec["dets"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"{where}: bad field ({exc})") from exc
    if len({len(f) for f in feats}) > 1:
        raise SceneFormatError(f"{where}: feature vectors differ in length")
    if any(not 0.0 <= s <= 1.0 for s in det_scores):
        raise SceneFormatError(f"{where}: scores must lie in [0, 1]")
    d = len(feats[0]) if feats else 0
    return Scene(int(rec["scene_id"]), gt_boxes, gt_classes, det_boxes, det_classes, det_scores,
                 np.array(feats, dtype=np.float64).reshape(len(feats), d))


def read_scenes(path) -> list[Scene]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.endswith("\n"):
        lines = text.split("\n")
        raise SceneFormatError(f"line {len(lines)}: file truncated (no trailing newline)")
    lines = text.split("\n")[:-1]
    if not lines:
        raise SceneFormatError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"line 1: invalid JSON ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise SceneFormatError("line 1: not a scene file header")
    if header.get("version") != FORMAT_VERSION:
        raise SceneFormatError(f"line 1: unsupported version {header.get('version')!r}")
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        scenes.append(_parse_scene(rec, lineno))
    if len(scenes) != header.get("count"):
        raise SceneFormatError(
            f"line {len(lines) + 1}: expected {header.get('count')} scenes, found {len(scenes)} (truncated?)"
        )
    return scenes
