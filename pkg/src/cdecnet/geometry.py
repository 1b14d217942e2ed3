"""Box arithmetic: IoU, delta coding, NMS, ground-truth assignment, RoI sampling.

Boxes are continuous corner coordinates ``(x1, y1, x2, y2)`` in pixels; area is
``(x2 - x1) * (y2 - y1)``. Array functions take ``(N, 4)`` float arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

BACKGROUND = -1
DEFAULT_STAGE_STDS = (
    (0.1, 0.1, 0.2, 0.2),
    (0.05, 0.05, 0.1, 0.1),
    (0.033, 0.033, 0.067, 0.067),
)
MAX_LOG_SCALE = float(np.log(1000.0 / 16))


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        vals = (self.x1, self.y1, self.x2, self.y2)
        return all(np.isfinite(vals)) and self.x2 > self.x1 and self.y2 > self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int = 1
    scale_tag: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def with_tag(self, tag: int | None) -> "Detection":
        return replace(self, scale_tag=tag)


def boxes_to_array(boxes: Sequence[BBox] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def detections_to_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    return boxes_to_array([d.box for d in dets]), np.array([d.score for d in dets], dtype=np.float64)


# -- IoU ------------------------------------------------------------------------------
def box_area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


# -- delta coding -----------------------------------------------------------------------
def _centers(b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, targets: np.ndarray,
                 stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    ax, ay, aw, ah = _centers(np.asarray(anchors, dtype=np.float64).reshape(-1, 4))
    tx, ty, tw, th = _centers(np.asarray(targets, dtype=np.float64).reshape(-1, 4))
    d = np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)
    return d / np.asarray(stds, dtype=np.float64)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray,
                 stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
                 clip: tuple[float, float] | None = None) -> np.ndarray:
    """Inverse of ``encode_boxes``. ``clip`` is (height, width) of the image.

    Log-scale deltas are clamped so a wild regressor cannot overflow ``exp``.
    """
    ax, ay, aw, ah = _centers(np.asarray(anchors, dtype=np.float64).reshape(-1, 4))
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * np.asarray(stds, dtype=np.float64)
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip is not None:
        out = clip_boxes(out, clip)
    return out


def clip_boxes(boxes: np.ndarray, size: tuple[float, float]) -> np.ndarray:
    h, w = size
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
    return out


def valid_mask(boxes: np.ndarray, min_size: float = 1e-6) -> np.ndarray:
    """True where a (possibly clipped) box still has positive width and height."""
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size) \
        & np.isfinite(boxes).all(axis=1)


def encode_deltas(anchor: BBox, target: BBox, stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> tuple[float, ...]:
    return tuple(float(v) for v in encode_boxes(anchor.as_array(), target.as_array(), stds)[0])


def decode_deltas(anchor: BBox, deltas: Sequence[float], stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
                  clip: tuple[float, float] | None = None) -> BBox | None:
    """Decoded box, or None when clipping leaves it degenerate."""
    out = decode_boxes(anchor.as_array(), np.asarray(deltas), stds, clip)
    if not valid_mask(out)[0]:
        return None
    return BBox.from_array(out[0])


# -- NMS -----------------------------------------------------------------------------------
def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending input index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy NMS; returns kept input indices in score order."""
    order = score_order(scores)
    if len(order) == 0:
        return order
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thr
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    boxes, scores = detections_to_arrays(dets)
    return [dets[i] for i in nms_indices(boxes, scores, iou_thr)]


# -- assignment and sampling -----------------------------------------------------------------
def assign_array(proposals: np.ndarray, gts: np.ndarray, pos_thr: float,
                 neg_thr: float | None = None, rescue: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Label each proposal with a GT index, BACKGROUND, or -2 (ignored).

    A proposal is positive for its argmax-IoU GT when that IoU >= ``pos_thr``;
    with ``neg_thr`` set, proposals with IoU in [neg_thr, pos_thr) are ignored.
    Each GT's best proposal is also forced positive so no GT goes unmatched.
    Returns (labels, max IoU per proposal).
    """
    n = len(proposals)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    if n == 0 or len(gts) == 0:
        return labels, np.zeros(n)
    ious = iou_matrix(proposals, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    if neg_thr is not None:
        labels[best_iou >= neg_thr] = -2
    pos = best_iou >= pos_thr
    labels[pos] = best_gt[pos]
    if rescue:
        for g in range(len(gts)):
            top = ious[:, g].max()
            if top > 0:
                # every proposal tied at the best overlap is promoted
                for i in np.flatnonzero(ious[:, g] == top):
                    labels[i] = g
    return labels, best_iou


def assign(proposals: Sequence[BBox], gts: Sequence[BBox], pos_thr: float,
           rescue: bool = True) -> list[int | None]:
    """Per proposal: matched GT index, or None for background."""
    if not 0.0 < pos_thr < 1.0:
        raise ValueError("pos_thr must lie in (0, 1)")
    labels, _ = assign_array(boxes_to_array(proposals), boxes_to_array(gts), pos_thr, rescue=rescue)
    return [None if lab < 0 else int(lab) for lab in labels]


def sample_rois(labels: Sequence[int | None] | np.ndarray, ratio: float, total: int,
                rng: np.random.Generator | int | None = 0) -> np.ndarray:
    """Pick up to ``total`` indices, at most ``ratio * total`` of them positive.

    ``labels`` holds a GT index (>= 0) for positives, BACKGROUND / None for
    negatives and -2 for ignored entries, which are never sampled.
    """
    if total <= 0:
        raise ValueError("total must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lab = np.array([BACKGROUND if v is None else v for v in labels], dtype=np.int64)
    pos = np.flatnonzero(lab >= 0)
    neg = np.flatnonzero(lab == BACKGROUND)
    n_pos = min(len(pos), int(ratio * total))
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), total - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.concatenate([np.sort(pos), np.sort(neg)]).astype(np.int64)
