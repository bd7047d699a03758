"""SGD training for the head, the dedup network, and both jointly; checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, ShapeError
from .dedup import (
    DedupConfig,
    assign_label_matrix,
    dedup_forward,
    dedup_loss,
    init_dedup_params,
    select_survivors,
)
from .geometry import decode_deltas, encode_deltas, iou_matrix
from .head import HeadConfig, head_forward, init_head_params, recognition_loss, sub_params
from .rng import SplitMix64, derive_seed
from .synthgen import Scene

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"RELNETCK"
HEAD_IOU = 0.5  # proposal counts as foreground at IoU >= 0.5 with a ground truth

_HEAD_INIT_KEY = 0x4EAD
_DEDUP_INIT_KEY = 0xDED0
_ORDER_KEY = 0x5CE


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, tampered with, or of another version."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    lr_drop: float = 0.1
    drop_at: float = 2 / 3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 6000
    seed: int = 0
    rec_weight: float = 1.0
    dedup_weight: float = 1.0
    log_every: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be >= 0")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")

    def lr_at(self, iteration: int) -> float:
        drop_point = int(round(self.drop_at * self.iterations))
        return self.lr * (self.lr_drop if iteration >= drop_point else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    iteration: int = 0
    losses: list[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], velocity: Mapping[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> tuple[dict, dict]:
    """``v <- momentum v + grad + wd p``; ``p <- p - lr v``. Returns new (params, velocity)."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        v = velocity.get(name)
        if g is None:
            g = np.zeros_like(p)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g + weight_decay * p
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


def scene_order(seed: int, num_scenes: int, iteration: int, _cache: dict = {}) -> int:
    """Scene visited at ``iteration``: a fresh seeded permutation per epoch."""
    epoch, pos = divmod(iteration, num_scenes)
    key = (seed, num_scenes, epoch)
    perm = _cache.get(key)
    if perm is None:
        if len(_cache) > 64:
            _cache.clear()
        perm = SplitMix64(derive_seed(seed, _ORDER_KEY, epoch)).permutation(num_scenes)
        _cache[key] = perm
    return int(perm[pos])


def _train_loop(params: dict[str, np.ndarray], loss_fn: Callable[[dict[str, Node], int], Node | None],
                num_scenes: int, cfg: TrainConfig, config_snapshot: dict, init: Checkpoint | None,
                stop_at: int | None, trainable: Callable[[str], bool] = lambda name: True) -> Checkpoint:
    if num_scenes < 1:
        raise ContractError("training needs at least one scene")
    velocity: dict[str, np.ndarray] = {}
    start, losses = 0, []
    if init is not None:
        params = {k: np.array(v) for k, v in init.params.items()}
        velocity = {k: np.array(v) for k, v in init.velocity.items()}
        start, losses = init.iteration, list(init.losses)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    for it in range(start, end):
        nodes = {k: Node(v, name=k) for k, v in params.items() if trainable(k)}
        frozen = {k: v for k, v in params.items() if not trainable(k)}
        loss = loss_fn({**frozen, **nodes}, scene_order(cfg.seed, num_scenes, it))
        grads = {}
        if loss is not None:
            ad.backward(loss)
            grads = {k: n.grad for k, n in nodes.items() if n.grad is not None}
            losses.append(float(loss.value))
        else:
            losses.append(0.0)
        upd_p, upd_v = sgd_step({k: params[k] for k in nodes}, grads, velocity, cfg.lr_at(it), cfg.momentum,
                                cfg.weight_decay)
        params.update(upd_p)
        velocity.update(upd_v)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            window = losses[-cfg.log_every:]
            log.info("iter %d  loss %.5f  lr %.2e", it + 1, float(np.mean(window)), cfg.lr_at(it))
    return Checkpoint(params=params, velocity=velocity, config=config_snapshot, iteration=max(end, start),
                      losses=losses)


# ---------------------------------------------------------------- scene prep


@dataclass
class ProposalTargets:
    labels: np.ndarray  # [N] in [0, C], 0 = background
    deltas: np.ndarray  # [N, 4]


def proposal_targets(scene: Scene) -> ProposalTargets:
    n = scene.num_dets
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if scene.gt_boxes.shape[0] and n:
        ious = iou_matrix(scene.det_boxes, scene.gt_boxes)
        best = ious.argmax(axis=1)
        fg = ious[np.arange(n), best] >= HEAD_IOU
        labels[fg] = scene.gt_classes[best[fg]] + 1
        deltas[fg] = encode_deltas(scene.det_boxes[fg], scene.gt_boxes[best[fg]])
    return ProposalTargets(labels, deltas)


def dedup_scene_loss(scene: Scene, boxes: np.ndarray, s0_columns: Callable[[int], Node | np.ndarray],
                     features, class_ids: Sequence[int], params: Mapping[str, Node], cfg: DedupConfig) -> Node | None:
    """Dedup loss over every class of a scene, averaged over all detections and thresholds.

    ``s0_columns(c)`` gives the per-detection score for class ``c``; detections
    are pruned and capped exactly as at inference.
    """
    s0_parts, s1_parts, label_parts = [], [], []
    features = ad.as_node(features)
    for c in class_ids:
        s0_full = ad.as_node(s0_columns(c))
        keep = select_survivors(s0_full.value, cfg)
        if keep.size == 0:
            continue
        s0 = s0_full[keep]
        s1 = dedup_forward(features[keep], s0.value, boxes[keep], params, cfg)
        gts = scene.gt_boxes[scene.gt_classes == c]
        label_parts.append(assign_label_matrix(boxes[keep], s0.value, gts, cfg.etas))
        s0_parts.append(s0)
        s1_parts.append(s1)
    if not s0_parts:
        return None
    return dedup_loss(ad.concat(s0_parts), ad.concat(s1_parts), np.concatenate(label_parts))


def _raw_dedup_loss(scene: Scene, params, cfg: DedupConfig) -> Node | None:
    classes = scene.det_classes
    members = {c: np.nonzero(classes == c)[0] for c in np.unique(classes)}
    s0_parts, s1_parts, label_parts = [], [], []
    feats = scene.det_feats
    for c, idx in members.items():
        keep = idx[select_survivors(scene.det_scores[idx], cfg)]
        if keep.size == 0:
            continue
        s0 = scene.det_scores[keep]
        s1 = dedup_forward(feats[keep], s0, scene.det_boxes[keep], params, cfg)
        label_parts.append(assign_label_matrix(scene.det_boxes[keep], s0, scene.gt_boxes[scene.gt_classes == c],
                                               cfg.etas))
        s0_parts.append(s0)
        s1_parts.append(s1)
    if not s0_parts:
        return None
    return dedup_loss(np.concatenate(s0_parts), ad.concat(s1_parts), np.concatenate(label_parts))


def head_dedup_inputs(scene: Scene, out):
    """Boxes after class-agnostic regression, plus a per-class score accessor."""
    boxes = decode_deltas(scene.det_boxes, out.box_deltas.value)
    scores = out.class_scores

    def column(c):
        return scores[:, c + 1]

    return boxes, column


# ---------------------------------------------------------------- regimes


def _snapshot(mode: str, train_cfg: TrainConfig, head_cfg: HeadConfig | None = None,
              dedup_cfg: DedupConfig | None = None, source: str | None = None) -> dict:
    snap = {"mode": mode, "train": train_cfg.to_dict()}
    if head_cfg is not None:
        snap["head"] = head_cfg.to_dict()
    if dedup_cfg is not None:
        snap["dedup"] = dedup_cfg.to_dict()
    if source is not None:
        snap["source"] = source
    return snap


def _prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def init_head(head_cfg: HeadConfig, seed: int) -> dict[str, np.ndarray]:
    return init_head_params(head_cfg, SplitMix64(derive_seed(seed, _HEAD_INIT_KEY)))


def init_dedup(dedup_cfg: DedupConfig, seed: int) -> dict[str, np.ndarray]:
    return init_dedup_params(dedup_cfg, SplitMix64(derive_seed(seed, _DEDUP_INIT_KEY)))


def train_head(scenes: Sequence[Scene], head_cfg: HeadConfig, cfg: TrainConfig, init: Checkpoint | None = None,
               stop_at: int | None = None) -> Checkpoint:
    targets = [proposal_targets(s) for s in scenes]

    def loss_fn(p, i):
        hp = sub_params(p, "head/")
        out = head_forward(scenes[i].det_feats, scenes[i].det_boxes, hp, head_cfg)
        return recognition_loss(out, targets[i].labels, targets[i].deltas)

    params = _prefixed("head", init_head(head_cfg, cfg.seed))
    return _train_loop(params, loss_fn, len(scenes), cfg, _snapshot("head", cfg, head_cfg=head_cfg), init, stop_at)


def train_dedup(scenes: Sequence[Scene], dedup_cfg: DedupConfig, cfg: TrainConfig,
                head: Checkpoint | None = None, head_cfg: HeadConfig | None = None,
                init: Checkpoint | None = None, stop_at: int | None = None) -> Checkpoint:
    """Train the dedup network on raw scene detections, or on a frozen head's outputs.

    With ``head`` given, detections are the head's per-class scores on every
    proposal with regressed boxes and the head's final features.
    """
    if head is None:
        if scenes and scenes[0].det_feats.shape[1] != dedup_cfg.d_feat:
            raise ContractError(f"scene features are {scenes[0].det_feats.shape[1]}-d, dedup expects {dedup_cfg.d_feat}")

        def loss_fn(p, i):
            return _raw_dedup_loss(scenes[i], sub_params(p, "dedup/"), dedup_cfg)

        params = _prefixed("dedup", init_dedup(dedup_cfg, cfg.seed))
        snap = _snapshot("dedup", cfg, dedup_cfg=dedup_cfg, source="raw")
        return _train_loop(params, loss_fn, len(scenes), cfg, snap, init, stop_at)

    if head_cfg is None:
        head_cfg = HeadConfig.from_dict(head.config["head"])
    head_nodes = {k: Node(v) for k, v in head.group("head").items()}
    cache: dict[int, tuple] = {}

    def head_view(i):
        if i not in cache:
            out = head_forward(scenes[i].det_feats, scenes[i].det_boxes, head_nodes, head_cfg)
            boxes, column = head_dedup_inputs(scenes[i], out)
            cols = {c: np.array(column(c).value) for c in range(head_cfg.num_classes)}
            cache[i] = (boxes, cols, np.array(out.features.value))
        return cache[i]

    def loss_fn(p, i):
        boxes, cols, feats = head_view(i)
        return dedup_scene_loss(scenes[i], boxes, cols.__getitem__, feats, range(head_cfg.num_classes),
                                sub_params(p, "dedup/"), dedup_cfg)

    params = {**_prefixed("head", head.group("head")), **_prefixed("dedup", init_dedup(dedup_cfg, cfg.seed))}
    snap = _snapshot("dedup", cfg, head_cfg=head_cfg, dedup_cfg=dedup_cfg, source="head")
    return _train_loop(params, loss_fn, len(scenes), cfg, snap, init, stop_at,
                       trainable=lambda name: name.startswith("dedup/"))


def train_end_to_end(scenes: Sequence[Scene], head_cfg: HeadConfig, dedup_cfg: DedupConfig, cfg: TrainConfig,
                     init: Checkpoint | None = None, stop_at: int | None = None,
                     on_labels: Callable[[int, int, np.ndarray], None] | None = None) -> Checkpoint:
    """Joint loss ``rec_weight * recognition + dedup_weight * dedup``.

    Dedup labels are recomputed every iteration from the current head outputs.
    ``on_labels(iteration, scene_index, labels)`` observes them (for tests).
    """
    if dedup_cfg.d_feat != head_cfg.d_hidden:
        raise ContractError(f"dedup d_feat={dedup_cfg.d_feat} must equal head d_hidden={head_cfg.d_hidden}")
    targets = [proposal_targets(s) for s in scenes]
    counter = {"it": init.iteration if init is not None else 0}

    def loss_fn(p, i):
        scene = scenes[i]
        out = head_forward(scene.det_feats, scene.det_boxes, sub_params(p, "head/"), head_cfg)
        rec = recognition_loss(out, targets[i].labels, targets[i].deltas)
        boxes, column = head_dedup_inputs(scene, out)
        dd = dedup_scene_loss(scene, boxes, column, out.features, range(head_cfg.num_classes),
                              sub_params(p, "dedup/"), dedup_cfg)
        if on_labels is not None:
            on_labels(counter["it"], i, _e2e_labels(scene, boxes, column, head_cfg, dedup_cfg))
        counter["it"] += 1
        total = rec * cfg.rec_weight
        if dd is not None:
            total = total + dd * cfg.dedup_weight
        return total

    params = {**_prefixed("head", init_head(head_cfg, cfg.seed)), **_prefixed("dedup", init_dedup(dedup_cfg, cfg.seed))}
    snap = _snapshot("e2e", cfg, head_cfg=head_cfg, dedup_cfg=dedup_cfg)
    return _train_loop(params, loss_fn, len(scenes), cfg, snap, init, stop_at)


def _e2e_labels(scene, boxes, column, head_cfg, dedup_cfg) -> np.ndarray:
    """First-threshold labels for every (proposal, class), -1 where pruned."""
    out = np.full((boxes.shape[0], head_cfg.num_classes), -1, dtype=np.int64)
    for c in range(head_cfg.num_classes):
        s0 = np.asarray(ad.as_node(column(c)).value)
        keep = select_survivors(s0, dedup_cfg)
        if keep.size:
            gts = scene.gt_boxes[scene.gt_classes == c]
            out[keep, c] = assign_label_matrix(boxes[keep], s0[keep], gts, dedup_cfg.etas[:1])[:, 0]
    return out


# ---------------------------------------------------------------- checkpoint I/O


def _encode(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    tensors = [("param", k, v) for k, v in sorted(ckpt.params.items())]
    tensors += [("velocity", k, v) for k, v in sorted(ckpt.velocity.items())]
    for kind, name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.version,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "losses": ckpt.losses,
        "tensors": entries,
        "payload_nbytes": offset,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, little-endian header length, JSON header, raw float64 payload."""
    Path(path).write_bytes(_encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a relnet checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("checkpoint truncated in header length")
    (hlen,) = struct.unpack("<Q", raw[pos: pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r}, this build reads {CHECKPOINT_VERSION}")
    payload = raw[pos + hlen:]
    if len(payload) != header.get("payload_nbytes"):
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {header.get('payload_nbytes')}")
    params, velocity = {}, {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if e["nbytes"] != expected:
            raise CheckpointError(f"tensor {e['name']!r}: {e['nbytes']} bytes for shape {shape}")
        data = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(data) != e["nbytes"] or hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise CheckpointError(f"tensor {e['name']!r} failed its integrity check")
        arr = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        (params if e["kind"] == "param" else velocity)[e["name"]] = arr
    return Checkpoint(params=params, velocity=velocity, config=header["config"], iteration=header["iteration"],
                      losses=list(header["losses"]), version=version)
