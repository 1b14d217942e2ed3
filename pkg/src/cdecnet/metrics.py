"""Recall / precision / F1 at an IoU threshold, average precision, and IoU sweeps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BBox, Detection, boxes_to_array, detections_to_arrays, iou_matrix, score_order


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def _match_arrays(pboxes: np.ndarray, scores: np.ndarray, gboxes: np.ndarray,
                  iou_thr: float) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    """Greedy matching in descending score order; returns per-pred TP flags and pairs."""
    n = len(pboxes)
    tp = np.zeros(n, dtype=bool)
    pairs = []
    if n == 0 or len(gboxes) == 0:
        return tp, pairs
    ious = iou_matrix(pboxes, gboxes)
    taken = np.zeros(len(gboxes), dtype=bool)
    for i in score_order(scores):
        cand = np.where(taken, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= iou_thr:
            taken[j] = True
            tp[i] = True
            pairs.append((int(i), j, float(ious[i, j])))
    return tp, pairs


def match(preds: Sequence[Detection], gts: Sequence[BBox] | np.ndarray, iou_thr: float) -> MatchResult:
    """Each prediction, highest score first, takes the highest-IoU unmatched GT
    whose IoU is at least ``iou_thr``; ties go to the lower GT index."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    pboxes, scores = detections_to_arrays(preds)
    gboxes = boxes_to_array(gts)
    tp, pairs = _match_arrays(pboxes, scores, gboxes, iou_thr)
    ntp = int(tp.sum())
    return MatchResult(ntp, len(preds) - ntp, len(gboxes) - ntp, pairs)


def prf1(m: MatchResult) -> tuple[float, float, float]:
    """(recall, precision, F1). An empty prediction set on an empty GT set scores 1."""
    n_gt = m.tp + m.fn
    n_pred = m.tp + m.fp
    if n_gt == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    r = m.tp / n_gt if n_gt else 0.0
    p = m.tp / n_pred if n_pred else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return r, p, f1


def _merge(results: Sequence[MatchResult]) -> MatchResult:
    return MatchResult(sum(r.tp for r in results), sum(r.fp for r in results), sum(r.fn for r in results))


def dataset_prf1(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[BBox]], iou_thr: float,
                 aggregation: str = "micro") -> tuple[float, float, float]:
    """Micro pools counts over images; macro averages per-image R, P, F1."""
    results = [match(p, g, iou_thr) for p, g in zip(preds, gts)]
    if aggregation == "micro":
        return prf1(_merge(results))
    if aggregation == "macro":
        vals = np.array([prf1(r) for r in results]) if results else np.ones((1, 3))
        return tuple(float(v) for v in vals.mean(axis=0))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def average_precision(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[BBox]],
                      iou_thr: float, interpolation: str = "all") -> float:
    """Area under the monotone precision envelope of the global score sweep.

    ``interpolation="11pt"`` gives the 11-recall-point variant instead.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    flags, all_scores, img_ids, pred_idx = [], [], [], []
    n_gt = 0
    for k, (p, g) in enumerate(zip(preds, gts)):
        pboxes, scores = detections_to_arrays(p)
        gboxes = boxes_to_array(g)
        n_gt += len(gboxes)
        tp, _ = _match_arrays(pboxes, scores, gboxes, iou_thr)
        flags.append(tp)
        all_scores.append(scores)
        img_ids.append(np.full(len(scores), k))
        pred_idx.append(np.arange(len(scores)))
    if not flags:
        return 1.0
    flags = np.concatenate(flags)
    scores = np.concatenate(all_scores)
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.concatenate(pred_idx), np.concatenate(img_ids), -scores))
    hits = flags[order].astype(np.float64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    if interpolation == "11pt":
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0, 1, 11)]))
    if interpolation != "all":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def threshold_range(lo: float, hi: float, step: float) -> list[float]:
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    n = int(round((hi - lo) / step)) if step > 0 else 0
    return [round(lo + i * step, 10) for i in range(n + 1)]


def map_over_range(preds, gts, thr_lo: float = 0.5, thr_hi: float = 0.9, step: float = 0.1) -> float:
    """Mean AP over thresholds lo, lo + step, ..., hi (inclusive)."""
    return float(np.mean([average_precision(preds, gts, t) for t in threshold_range(thr_lo, thr_hi, step)]))


# -- reports ---------------------------------------------------------------------------------------
@dataclass
class MetricRow:
    iou_thr: float
    recall: float
    precision: float
    f1: float
    ap: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    dataset: str = ""
    model: str = ""

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([MetricRow(**r) for r in d["rows"]], d.get("dataset", ""), d.get("model", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        head = f"{'IoU':>5} {'R':>7} {'P':>7} {'F1':>7} {'mAP':>7}"
        lines = [f"dataset={self.dataset} model={self.model}", head]
        for r in self.rows:
            lines.append(f"{r.iou_thr:5.2f} {r.recall:7.3f} {r.precision:7.3f} {r.f1:7.3f} {r.ap:7.3f}")
        return "\n".join(lines) + "\n"

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        jp, tp = stem.with_suffix(".json"), stem.with_suffix(".txt")
        jp.write_text(self.to_json(), encoding="utf-8")
        tp.write_text(self.to_text(), encoding="utf-8")
        return jp, tp


def iou_sweep(preds, gts, thresholds: Sequence[float], dataset: str = "", model: str = "",
              aggregation: str = "micro") -> MetricReport:
    if not thresholds:
        raise ValueError("at least one threshold required")
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        r, p, f1 = dataset_prf1(preds, gts, t, aggregation)
        rows.append(MetricRow(float(t), r, p, f1, average_precision(preds, gts, t)))
    return MetricReport(rows, dataset, model)
