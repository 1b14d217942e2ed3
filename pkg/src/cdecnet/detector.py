"""Anchors, region proposals, RoI align, and the three-stage IoU cascade.

Stage ``t`` is trained on boxes labelled at IoU threshold ``stage_ious[t]``.
Its regressed boxes, detached, become the proposals for stage ``t + 1``, which
relabels them at its own higher threshold. At test time the boxes flow through
all stages and the final score averages every head's class posterior on the
final boxes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor, add, concat, make_result, matmul, permute, relu, reshape, take_rows
from .backbone import CompositeBackbone, FeaturePyramid, FPN, default_stages
from .deform import ConvKernel, _Bilinear
from .geometry import (
    DEFAULT_STAGE_STDS,
    BBox,
    Detection,
    assign_array,
    decode_boxes,
    encode_boxes,
    iou_matrix,
    nms_indices,
    sample_rois,
    score_order,
    valid_mask,
)
from .losses import sigmoid_binary_cross_entropy, smooth_l1, softmax, softmax_cross_entropy
from .module import Module, param_zeros


@dataclass(frozen=True)
class AnchorSpec:
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scale: float = 8.0

    def __post_init__(self):
        if not self.ratios or min(self.ratios) <= 0 or self.scale <= 0:
            raise ValueError(f"invalid anchor spec {self}")


@dataclass
class CascadeConfig:
    stage_ious: tuple[float, ...] = (0.5, 0.6, 0.7)
    stage_stds: tuple[tuple[float, ...], ...] = DEFAULT_STAGE_STDS
    roi_out: int = 4
    score_thr: float = 0.6
    nms_thr: float = 0.3
    composite_enabled: bool = True
    deformable_enabled: bool = True
    num_classes: int = 1
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale: float = 8.0
    channels: tuple[int, ...] = (16, 32, 64, 128)
    deformable_from: int = 2
    stem_channels: int = 8
    fpn_width: int = 32
    head_hidden: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pre_nms: int = 200
    rpn_post_nms: int = 50
    rpn_nms_thr: float = 0.7
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    roi_finest_scale: float = 28.0
    smooth_l1_beta: float = 1.0
    max_detections: int = 100

    def __post_init__(self):
        self.stage_ious = tuple(float(u) for u in self.stage_ious)
        self.stage_stds = tuple(tuple(float(v) for v in s) for s in self.stage_stds)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.channels = tuple(int(c) for c in self.channels)
        u = self.stage_ious
        if not u or any(not 0.0 < v < 1.0 for v in u) or any(b <= a for a, b in zip(u, u[1:])):
            raise ValueError(f"stage_ious must increase strictly inside (0, 1), got {u}")
        if len(self.stage_stds) != len(u) or any(len(s) != 4 for s in self.stage_stds):
            raise ValueError("one 4-vector of delta stds per cascade stage required")
        if self.rpn_pre_nms < self.rpn_post_nms:
            raise ValueError("rpn_pre_nms must be >= rpn_post_nms")

    @property
    def anchors(self) -> AnchorSpec:
        return AnchorSpec(self.anchor_ratios, self.anchor_scale)

    @property
    def num_stages(self) -> int:
        return len(self.stage_ious)


# -- anchors -----------------------------------------------------------------------------
def gen_anchors(level_shape: tuple[int, int], stride: int, spec: AnchorSpec) -> np.ndarray:
    """Anchors ordered (ratio, row, col), matching the RPN's channel-major layout.

    Each has area (scale * stride)^2 and height / width = ratio, centred on the
    pixel centre of its feature location.
    """
    h, w = level_shape
    if h <= 0 or w <= 0:
        raise ValueError(f"level shape must be positive, got {level_shape}")
    size = spec.scale * stride
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    cy, cx = cy.reshape(-1), cx.reshape(-1)
    out = []
    for r in spec.ratios:
        aw = size / np.sqrt(r)
        ah = size * np.sqrt(r)
        out.append(np.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], axis=1))
    return np.concatenate(out, axis=0)


# -- dense layers -----------------------------------------------------------------------------
class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None, std: float | None = None):
        if rng is None:
            self.weight = param_zeros(n_in, n_out)
        else:
            s = np.sqrt(2.0 / n_in) if std is None else std
            self.weight = Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True)
        self.bias = param_zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


# -- RPN ---------------------------------------------------------------------------------------
class RPNHead(Module):
    def __init__(self, width: int, num_anchors: int, rng: np.random.Generator):
        self.conv = ConvKernel(width, width, 3, 1, rng=rng)
        self.cls = ConvKernel(width, num_anchors, 1, 1)
        self.reg = ConvKernel(width, 4 * num_anchors, 1, 1)
        self.cls.weight.data = rng.normal(0, 0.01, size=self.cls.weight.shape)
        self.reg.weight.data = rng.normal(0, 0.01, size=self.reg.weight.shape)

    def __call__(self, pyr: FeaturePyramid) -> list[tuple[Tensor, Tensor]]:
        return rpn_forward(pyr, self)


def rpn_forward(pyr: FeaturePyramid, head: RPNHead) -> list[tuple[Tensor, Tensor]]:
    """Per level: objectness (A x H x W) and deltas (4A x H x W)."""
    out = []
    for level in pyr.levels:
        h = relu(head.conv(level))
        out.append((head.cls(h), head.reg(h)))
    return out


def _flatten_rpn(rpn_out: Sequence[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    """Objectness (N,) and deltas (N, 4) in anchor order across all levels."""
    logits, deltas = [], []
    for obj, reg in rpn_out:
        a, h, w = obj.shape
        logits.append(reshape(obj, (a * h * w,)))
        d = permute(reshape(reg, (a, 4, h * w)), (0, 2, 1))
        deltas.append(reshape(d, (a * h * w, 4)))
    return concat(logits, 0), concat(deltas, 0)


def rpn_proposals(rpn_out, anchors: np.ndarray, k_pre: int, k_post: int, nms_thr: float,
                  image_size: tuple[int, int]) -> np.ndarray:
    """Decode, clip, keep the top ``k_pre`` by objectness, NMS, then cap at ``k_post``."""
    if k_pre < k_post:
        raise ValueError("k_pre must be >= k_post")
    logits = np.concatenate([obj.data.reshape(-1) for obj, _ in rpn_out])
    deltas = np.concatenate([reg.data.reshape(obj.shape[0], 4, -1).transpose(0, 2, 1).reshape(-1, 4)
                             for obj, reg in rpn_out])
    boxes = decode_boxes(anchors, deltas, clip=image_size)
    ok = np.flatnonzero(valid_mask(boxes, 1.0))
    order = ok[score_order(logits[ok])][:k_pre]
    keep = nms_indices(boxes[order], logits[order], nms_thr)[:k_post]
    return boxes[order[keep]]


# -- RoI align -----------------------------------------------------------------------------------
def roi_levels(rois: np.ndarray, num_levels: int, finest_scale: float) -> np.ndarray:
    """Pyramid level per RoI: floor(log2(sqrt(area) / finest_scale)), clamped."""
    scale = np.sqrt(np.clip((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1]), 1e-12, None))
    lvl = np.floor(np.log2(scale / finest_scale + 1e-6))
    return np.clip(lvl, 0, num_levels - 1).astype(np.int64)


def roi_align(pyr: FeaturePyramid, rois: np.ndarray, out: int, finest_scale: float = 28.0,
              levels: np.ndarray | None = None) -> Tensor:
    """(N, C, out, out) features, one bilinear sample at each cell centre.

    Coordinates map to feature space as ``x / stride - 0.5`` (pixel centres).
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if rois.size and not valid_mask(rois).all():
        raise ValueError("roi_align received a degenerate RoI")
    n = len(rois)
    c = pyr.channels
    if levels is None:
        levels = roi_levels(rois, len(pyr.levels), finest_scale)
    result = np.zeros((n, c, out, out))
    frac = (np.arange(out) + 0.5) / out
    plans = []
    for li, (level, stride) in enumerate(zip(pyr.levels, pyr.strides)):
        idx = np.flatnonzero(levels == li)
        if len(idx) == 0:
            continue
        r = rois[idx]
        ys = r[:, 1, None] + frac[None, :] * (r[:, 3] - r[:, 1])[:, None]
        xs = r[:, 0, None] + frac[None, :] * (r[:, 2] - r[:, 0])[:, None]
        ys = np.repeat(ys[:, :, None], out, axis=2) / stride - 0.5
        xs = np.repeat(xs[:, None, :], out, axis=1) / stride - 0.5
        _, h, w = level.shape
        bl = _Bilinear(h, w, ys.reshape(-1), xs.reshape(-1))
        vals = bl.gather(level.data).reshape(c, len(idx), out, out)
        result[idx] = vals.transpose(1, 0, 2, 3)
        plans.append((li, idx, bl))

    def _bw(g):
        for li, idx, bl in plans:
            level = pyr.levels[li]
            if level.requires_grad:
                gi = g[idx].transpose(1, 0, 2, 3).reshape(c, -1)
                level.accumulate(bl.scatter(gi, c))

    return make_result(result, tuple(pyr.levels), "roi_align", _bw)


# -- cascade heads ---------------------------------------------------------------------------------
class CascadeHead(Module):
    """flatten -> fc -> relu -> fc -> relu -> (class logits, class-agnostic deltas)."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.cls = Linear(hidden, num_classes + 1, rng, std=0.01)
        self.reg = Linear(hidden, 4, rng, std=0.001)

    def __call__(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        n = roi_feats.shape[0]
        x = reshape(roi_feats, (n, -1))
        x = relu(self.fc1(x))
        x = relu(self.fc2(x))
        return self.cls(x), self.reg(x)


class DetectorModel(Module):
    def __init__(self, cfg: CascadeConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        specs = default_stages(cfg.channels, cfg.deformable_from if cfg.deformable_enabled else None)
        self.backbone = CompositeBackbone(specs, in_ch=1, stem_ch=cfg.stem_channels,
                                          enabled=cfg.composite_enabled, rng=rng)
        self.fpn = FPN(self.backbone.out_channels, cfg.fpn_width, rng)
        self.rpn = RPNHead(cfg.fpn_width, len(cfg.anchor_ratios), rng)
        in_dim = cfg.fpn_width * cfg.roi_out * cfg.roi_out
        self.heads = [CascadeHead(in_dim, cfg.head_hidden, cfg.num_classes, rng)
                      for _ in cfg.stage_ious]
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def size_divisor(self) -> int:
        return self.backbone.strides[-1]

    def pyramid(self, x: Tensor) -> FeaturePyramid:
        return self.fpn(self.backbone(x), self.backbone.strides)

    def anchors_for(self, pyr: FeaturePyramid) -> np.ndarray:
        key = tuple(lvl.shape[1:] for lvl in pyr.levels)
        if key not in self._anchor_cache:
            spec = self.cfg.anchors
            self._anchor_cache[key] = np.concatenate(
                [gen_anchors(lvl.shape[1:], s, spec) for lvl, s in zip(pyr.levels, pyr.strides)])
        return self._anchor_cache[key]


def head_forward(model: DetectorModel, roi_feats: Tensor, head_idx: int) -> tuple[Tensor, Tensor]:
    if not 0 <= head_idx < len(model.heads):
        raise IndexError(f"head index {head_idx} out of range for {len(model.heads)} stages")
    return model.heads[head_idx](roi_feats)


# -- input preparation -------------------------------------------------------------------------------
def prepare_image(image: np.ndarray, divisor: int) -> tuple[Tensor, tuple[int, int]]:
    """Ink-intensity tensor (1 - page) padded with blank page to a multiple of ``divisor``."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ph = -(-h // divisor) * divisor
    pw = -(-w // divisor) * divisor
    x = np.zeros((1, ph, pw))
    x[0, :h, :w] = 1.0 - img
    return Tensor(x), (h, w)


# -- training --------------------------------------------------------------------------------------------
@dataclass
class StageRecord:
    """Bookkeeping of one cascade stage during a training step."""

    rois: np.ndarray
    labels: np.ndarray
    num_pos: int
    cls_loss: float
    box_loss: float


@dataclass
class TrainOutput:
    total: Tensor
    rpn_cls: float
    rpn_box: float
    stages: list[StageRecord] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        d = {"total": float(self.total.data), "rpn_cls": self.rpn_cls, "rpn_box": self.rpn_box}
        for i, st in enumerate(self.stages, 1):
            d[f"s{i}_cls"] = st.cls_loss
            d[f"s{i}_box"] = st.box_loss
        return d


def _zero() -> Tensor:
    return Tensor(0.0)


def _rpn_loss(model: DetectorModel, rpn_out, anchors: np.ndarray, gts: np.ndarray,
              rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    logits, deltas = _flatten_rpn(rpn_out)
    labels, _ = assign_array(anchors, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    idx = sample_rois(labels, cfg.rpn_pos_fraction, cfg.rpn_batch, rng)
    targets = (labels[idx] >= 0).astype(np.float64)
    cls = sigmoid_binary_cross_entropy(take_rows(logits, idx), targets)
    pos = idx[labels[idx] >= 0]
    if len(pos) == 0:
        return cls, _zero()
    t = encode_boxes(anchors[pos], gts[labels[pos]])
    box = smooth_l1(take_rows(deltas, pos), t, cfg.smooth_l1_beta)
    return cls, box


def cascade_losses(model: DetectorModel, image: np.ndarray, gt_boxes: np.ndarray,
                   gt_classes: Sequence[int], rng: np.random.Generator,
                   replay: Sequence[StageRecord] | None = None) -> TrainOutput:
    """Forward pass with all training losses; no parameter update.

    ``replay`` reuses the sampled RoIs and labels of an earlier call, which makes the
    loss a smooth function of the parameters (used by finite-difference checks).
    """
    cfg = model.cfg
    x, size = prepare_image(image, model.size_divisor)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gcls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    pyr = model.pyramid(x)
    rpn_out = model.rpn(pyr)
    anchors = model.anchors_for(pyr)
    rpn_cls, rpn_box = _rpn_loss(model, rpn_out, anchors, gts, rng)
    total = add(rpn_cls, rpn_box)
    proposals = rpn_proposals(rpn_out, anchors, cfg.rpn_pre_nms, cfg.rpn_post_nms,
                              cfg.rpn_nms_thr, size)
    records = []
    for t, (u, stds) in enumerate(zip(cfg.stage_ious, cfg.stage_stds)):
        rois = np.concatenate([proposals, gts]) if len(gts) else proposals
        is_gt = np.arange(len(rois)) >= len(proposals)
        labels, _ = assign_array(rois, gts, u)
        idx = sample_rois(labels, cfg.roi_pos_fraction, cfg.roi_batch, rng)
        if replay is not None:
            rois, labels = replay[t].rois, replay[t].labels
            idx = np.arange(len(rois))
            is_gt = np.zeros(len(rois), dtype=bool)
        if len(idx) == 0:
            records.append(StageRecord(rois[:0], labels[:0], 0, 0.0, 0.0))
            proposals = proposals[:0]
            continue
        sel = rois[idx]
        sel_lab = labels[idx]
        feats = roi_align(pyr, sel, cfg.roi_out, cfg.roi_finest_scale)
        cls_logits, deltas = head_forward(model, feats, t)
        pos = np.flatnonzero(sel_lab >= 0)
        cls_targets = np.zeros(len(idx), dtype=np.int64)
        cls_targets[pos] = gcls[sel_lab[pos]]
        cls_loss = softmax_cross_entropy(cls_logits, cls_targets)
        if len(pos):
            target = encode_boxes(sel[pos], gts[sel_lab[pos]], stds)
            box_loss = smooth_l1(take_rows(deltas, pos), target, cfg.smooth_l1_beta)
        else:
            box_loss = _zero()
        total = add(total, add(cls_loss, box_loss))
        records.append(StageRecord(sel, sel_lab, len(pos), float(cls_loss.data), float(box_loss.data)))
        refined = decode_boxes(sel, deltas.data, stds, clip=size)
        keep = valid_mask(refined, 1.0) & ~is_gt[idx]
        proposals = refined[keep]
    return TrainOutput(total, float(rpn_cls.data), float(rpn_box.data), records)


def cascade_train_step(model: DetectorModel, sample, cfg: CascadeConfig | None = None,
                       optimizer=None, lr: float | None = None,
                       rng: np.random.Generator | None = None) -> dict[str, float]:
    """One forward/backward pass on ``sample`` followed by one optimizer step."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = cascade_losses(model, sample.image, sample.gt_array(), sample.gt_classes, rng)
    out.total.backward()
    if optimizer is not None:
        optimizer.step(lr)
    return out.as_dict()


# -- inference -----------------------------------------------------------------------------------------------
@dataclass
class CascadeTrace:
    """Boxes after each stage plus the proposals they came from (inference order)."""

    proposals: np.ndarray
    stage_boxes: list[np.ndarray]
    scores: np.ndarray
    labels: np.ndarray


def cascade_inference(model: DetectorModel, image: np.ndarray) -> CascadeTrace:
    cfg = model.cfg
    x, size = prepare_image(image, model.size_divisor)
    pyr = model.pyramid(x)
    rpn_out = model.rpn(pyr)
    anchors = model.anchors_for(pyr)
    boxes = rpn_proposals(rpn_out, anchors, cfg.rpn_pre_nms, cfg.rpn_post_nms, cfg.rpn_nms_thr, size)
    proposals = boxes
    stage_boxes = []
    for t, stds in enumerate(cfg.stage_stds):
        if len(boxes) == 0:
            stage_boxes.append(boxes)
            continue
        _, deltas = head_forward(model, roi_align(pyr, boxes, cfg.roi_out, cfg.roi_finest_scale), t)
        refined = decode_boxes(boxes, deltas.data, stds, clip=size)
        # degenerate refinements fall back to their input box so chains stay aligned
        bad = ~valid_mask(refined, 1.0)
        refined[bad] = boxes[bad]
        boxes = refined
        stage_boxes.append(boxes)
    if len(boxes) == 0:
        return CascadeTrace(proposals, stage_boxes, np.zeros((0, cfg.num_classes + 1)), np.zeros(0, np.int64))
    feats = roi_align(pyr, boxes, cfg.roi_out, cfg.roi_finest_scale)
    probs = np.mean([softmax(head_forward(model, feats, t)[0].data) for t in range(cfg.num_stages)], axis=0)
    labels = probs[:, 1:].argmax(axis=1) + 1
    return CascadeTrace(proposals, stage_boxes, probs, labels)


def detect(model: DetectorModel, image: np.ndarray, cfg: CascadeConfig | None = None,
           scale_tag: int | None = None) -> list[Detection]:
    """Single-scale detections with score >= score_thr, after per-class NMS."""
    cfg = cfg or model.cfg
    trace = cascade_inference(model, image)
    if not trace.stage_boxes or len(trace.stage_boxes[-1]) == 0:
        return []
    boxes = trace.stage_boxes[-1]
    scores = trace.scores[np.arange(len(boxes)), trace.labels]
    dets: list[Detection] = []
    for k in np.unique(trace.labels):
        sel = np.flatnonzero((trace.labels == k) & (scores >= cfg.score_thr))
        if len(sel) == 0:
            continue
        keep = sel[nms_indices(boxes[sel], scores[sel], cfg.nms_thr)]
        dets.extend(Detection(BBox.from_array(boxes[i]), float(np.clip(scores[i], 0.0, 1.0)), int(k), scale_tag)
                    for i in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[:cfg.max_detections]


def stage_iou_profile(model: DetectorModel, samples, match_iou: float = 0.5) -> tuple[int, list[float]]:
    """Mean IoU with the matched ground truth of proposals and of each stage's boxes.

    A chain counts when its stage-1 box overlaps some GT box by at least ``match_iou``;
    every later box of that chain is scored against the same GT box.
    Returns (number of chains, [proposal mean, stage-1 mean, ...]).
    """
    per_stage: list[list[np.ndarray]] = [[] for _ in range(model.cfg.num_stages + 1)]
    for s in samples:
        gts = s.gt_array()
        if len(gts) == 0:
            continue
        trace = cascade_inference(model, s.image)
        if len(trace.proposals) == 0:
            continue
        chain = [trace.proposals] + trace.stage_boxes
        first = iou_matrix(chain[1], gts)
        target = first.argmax(axis=1)
        keep = first.max(axis=1) >= match_iou
        rows = np.arange(len(target))
        for t, boxes in enumerate(chain):
            per_stage[t].append(iou_matrix(boxes, gts)[rows, target][keep])
    n = int(sum(len(a) for a in per_stage[1]))
    if n == 0:
        return 0, [float("nan")] * len(per_stage)
    return n, [float(np.concatenate(a).mean()) for a in per_stage]
