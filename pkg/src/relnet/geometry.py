"""Box arithmetic, relative geometry, sinusoidal embeddings and IoU.

Boxes are (cx, cy, w, h) with (cx, cy) the box center. Array variants take
``[..., 4]`` arrays in the same layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

DEFAULT_EPS = 1e-3
DEFAULT_WAVE_BASE = 1000.0
# Fast R-CNN style target normalization for (dx, dy, dw, dh)
DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box needs positive size, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


def _arr(b) -> np.ndarray:
    return b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    size = corners[..., 2:] - corners[..., :2]
    return np.concatenate([corners[..., :2] + size / 2, size], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a [N,4]`` and ``b [M,4]``."""
    ca, cb = to_corners(np.reshape(a, (-1, 4))), to_corners(np.reshape(b, (-1, 4)))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a, b) -> float:
    return float(iou_matrix(_arr(a)[None], _arr(b)[None])[0, 0])


def rel_geom(m, n, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Relative geometry 4-vector of box ``n`` seen from box ``m``."""
    return rel_geom_pairs(np.stack([_arr(m), _arr(n)]), eps)[0, 1]


def rel_geom_pairs(boxes: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``[N,N,4]`` array whose entry ``[m, n]`` is ``rel_geom(box_m, box_n)``."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    dx = np.abs(cx[:, None] - cx[None, :]) / w[:, None]
    dy = np.abs(cy[:, None] - cy[None, :]) / h[:, None]
    return np.stack(
        [
            np.log(np.maximum(dx, eps)),
            np.log(np.maximum(dy, eps)),
            np.log(w[None, :] / w[:, None]),
            np.log(h[None, :] / h[:, None]),
        ],
        axis=-1,
    )


def _frequencies(dim: int, wave_base: float) -> np.ndarray:
    if dim <= 0 or dim % 2:
        raise ContractError(f"sinusoid dim must be a positive even integer, got {dim}")
    if wave_base <= 1:
        raise ContractError("wave_base must exceed 1")
    i = np.arange(dim // 2)
    return 1.0 / wave_base ** (2 * i / dim)


def sinusoid_embed(x, dim: int, wave_base: float = DEFAULT_WAVE_BASE) -> np.ndarray:
    """Interleaved [sin, cos] features of ``x`` at ``dim/2`` wavelengths.

    ``x`` may be a scalar or an array; the embedding is appended as a new
    trailing axis.
    """
    freqs = _frequencies(dim, wave_base)
    arg = np.asarray(x, dtype=np.float64)[..., None] * freqs
    out = np.empty(arg.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def embed_geom(g, d_g: int, wave_base: float = DEFAULT_WAVE_BASE) -> np.ndarray:
    """Embed trailing 4-vectors to ``d_g`` dims, ``d_g/4`` per coordinate."""
    if d_g <= 0 or d_g % 8:
        raise ContractError(f"d_g must be a positive multiple of 8, got {d_g}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != 4:
        raise ContractError(f"geometry vectors must have 4 entries, got {g.shape}")
    emb = sinusoid_embed(g, d_g // 4, wave_base)  # [..., 4, d_g/4]
    return emb.reshape(g.shape[:-1] + (d_g,))


def encode_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets taking ``proposals`` to ``targets`` (normalized by DELTA_STDS)."""
    p, t = np.asarray(proposals, float), np.asarray(targets, float)
    raw = np.stack(
        [
            (t[..., 0] - p[..., 0]) / p[..., 2],
            (t[..., 1] - p[..., 1]) / p[..., 3],
            np.log(t[..., 2] / p[..., 2]),
            np.log(t[..., 3] / p[..., 3]),
        ],
        axis=-1,
    )
    return raw / DELTA_STDS


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray, max_log: float = math.log(1000 / 16)) -> np.ndarray:
    p = np.asarray(proposals, float)
    d = np.asarray(deltas, float) * DELTA_STDS
    dw = np.clip(d[..., 2], -max_log, max_log)
    dh = np.clip(d[..., 3], -max_log, max_log)
    return np.stack(
        [
            p[..., 0] + d[..., 0] * p[..., 2],
            p[..., 1] + d[..., 1] * p[..., 3],
            p[..., 2] * np.exp(dw),
            p[..., 3] * np.exp(dh),
        ],
        axis=-1,
    )


def clip_to_scene(boxes: np.ndarray, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    c = to_corners(boxes)
    c[..., 0::2] = np.clip(c[..., 0::2], 0.0, width)
    c[..., 1::2] = np.clip(c[..., 1::2], 0.0, height)
    out = from_corners(c)
    # keep a minimal extent so every box stays valid
    out[..., 2] = np.maximum(out[..., 2], min_size)
    out[..., 3] = np.maximum(out[..., 3], min_size)
    out[..., 0] = np.clip(out[..., 0], out[..., 2] / 2, width - out[..., 2] / 2)
    out[..., 1] = np.clip(out[..., 1], out[..., 3] / 2, height - out[..., 3] / 2)
    return out
