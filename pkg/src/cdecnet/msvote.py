"""Multi-scale test-time inference with quorum voting.

Every scale runs a full single-scale detection on a resized copy of the page.
Boxes are mapped back to page coordinates and grouped greedily. A group
survives only when at least ``quorum`` distinct scales contributed to it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import BBox, Detection, detections_to_arrays, iou_matrix

DEFAULT_FACTORS = (0.7, 0.8, 0.9, 1.0, 1.15, 1.3, 1.5)
FUSION_MODES = ("weighted", "keep-seed")


@dataclass(frozen=True)
class ScaleSet:
    factors: tuple[float, ...] = DEFAULT_FACTORS
    quorum: int = 4

    def __post_init__(self):
        f = tuple(float(v) for v in self.factors)
        object.__setattr__(self, "factors", f)
        if len(f) != 7 or 1.0 not in f:
            raise ValueError(f"a scale set holds exactly 7 factors including 1.0, got {f}")
        if list(f) != sorted(f) or len(set(f)) != 7 or min(f) <= 0:
            raise ValueError(f"factors must be positive, distinct and ascending, got {f}")
        if sum(v < 1.0 for v in f) != 3:
            raise ValueError("a scale set needs three factors below 1.0 and three above")
        if not 1 <= self.quorum <= 7:
            raise ValueError(f"quorum must lie in [1, 7], got {self.quorum}")


@dataclass
class DetectionCluster:
    members: list[Detection]
    fused: Detection | None = None

    @property
    def seed(self) -> Detection:
        return self.members[0]

    @property
    def scales(self) -> set:
        return {d.scale_tag for d in self.members}


def _canonical(dets: Sequence[Detection]) -> list[int]:
    """Descending score; ties broken by scale tag, then by position in the input."""
    keys = [(-d.score, -1 if d.scale_tag is None else d.scale_tag, i) for i, d in enumerate(dets)]
    return [k[2] for k in sorted(keys)]


def cluster_detections(dets: Sequence[Detection], iou_thr: float = 0.5) -> list[DetectionCluster]:
    """Greedy grouping around the best remaining detection.

    Each seed absorbs every unclaimed detection with IoU >= ``iou_thr`` against it,
    keeping at most one detection per scale tag (the highest scoring). Untagged
    detections count as a single scale. Losers of the per-scale contest stay
    available for later seeds.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    dets = list(dets)
    if not dets:
        return []
    order = _canonical(dets)
    boxes, _ = detections_to_arrays(dets)
    ious = iou_matrix(boxes, boxes)
    free = np.ones(len(dets), dtype=bool)
    clusters = []
    for s in order:
        if not free[s]:
            continue
        free[s] = False
        members, seen = [dets[s]], {dets[s].scale_tag}
        for j in order:
            if free[j] and ious[s, j] >= iou_thr and dets[j].scale_tag not in seen:
                free[j] = False
                seen.add(dets[j].scale_tag)
                members.append(dets[j])
        clusters.append(DetectionCluster(members))
    return clusters


def fuse_cluster(c: DetectionCluster, mode: str = "weighted") -> Detection:
    """Score-weighted mean corners and mean score; ``keep-seed`` keeps the seed box."""
    if not c.members:
        raise ValueError("cannot fuse an empty cluster")
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    boxes, scores = detections_to_arrays(c.members)
    score = float(np.clip(scores.mean(), 0.0, 1.0))
    if mode == "keep-seed":
        box = c.seed.box
    else:
        w = scores / scores.sum() if scores.sum() > 0 else np.full(len(scores), 1.0 / len(scores))
        box = BBox.from_array(w @ boxes)
    return Detection(box, score, c.seed.class_id)


def vote(dets: Sequence[Detection], quorum: int, iou_thr: float = 0.5,
         mode: str = "weighted") -> list[Detection]:
    """Cluster tagged detections and fuse the clusters that span at least ``quorum`` scales."""
    out = []
    for c in cluster_detections(dets, iou_thr):
        if len(c.scales) >= quorum:
            c.fused = fuse_cluster(c, mode)
            out.append(c.fused)
    return out


def resize_page(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize by ``factor``; output dims are rounded to the nearest pixel."""
    h, w = image.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return np.array(image, dtype=np.float64)
    out = ndimage.zoom(np.asarray(image, dtype=np.float64), (nh / h, nw / w), order=1, mode="nearest",
                       grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def _map_back(d: Detection, sy: float, sx: float, h: int, w: int, tag: int) -> Detection:
    b = d.box
    box = BBox(min(max(b.x1 / sx, 0.0), w), min(max(b.y1 / sy, 0.0), h),
               min(max(b.x2 / sx, 0.0), w), min(max(b.y2 / sy, 0.0), h))
    return Detection(box, d.score, d.class_id, tag)


def pool_scales(model, image: np.ndarray, factors: Sequence[float], cfg=None) -> list[Detection]:
    """Single-scale detections at every factor, mapped to page coordinates and tagged by factor index."""
    from .detector import detect

    h, w = image.shape
    pooled: list[Detection] = []
    for tag, f in enumerate(factors):
        img = resize_page(image, f)
        sy, sx = img.shape[0] / h, img.shape[1] / w
        for d in detect(model, img, cfg):
            m = _map_back(d, sy, sx, h, w, tag)
            if m.box.is_valid():
                pooled.append(m)
    return pooled


def detect_multiscale(model, image: np.ndarray, scales: ScaleSet | None = None, cfg=None,
                      iou_thr: float = 0.5, mode: str = "weighted") -> list[Detection]:
    scales = scales or ScaleSet()
    out = vote(pool_scales(model, image, scales.factors, cfg), scales.quorum, iou_thr, mode)
    out.sort(key=lambda d: -d.score)
    return out
