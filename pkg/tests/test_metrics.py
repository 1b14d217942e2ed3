from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdecnet.geometry import BBox, Detection
from cdecnet.metrics import (
    MatchResult,
    MetricReport,
    average_precision,
    dataset_prf1,
    iou_sweep,
    map_over_range,
    match,
    prf1,
    threshold_range,
)

from oracles import brute_ap, brute_match, random_int_boxes, random_scores

DYADIC_THRESHOLDS = (0.25, 0.375, 0.5, 0.625, 0.75)
SWEEP = (0.5, 0.6, 0.7, 0.8, 0.9)


def dets(boxes, scores):
    return [Detection(BBox(*b), s) for b, s in zip(boxes, scores)]


def random_image(rng, max_pred=6, max_gt=4):
    n, m = int(rng.integers(0, max_pred + 1)), int(rng.integers(0, max_gt + 1))
    return random_int_boxes(rng, n, 14, 10), random_scores(rng, n), random_int_boxes(rng, m, 14, 10)


class TestMatch:
    def test_perfect(self):
        m = match(dets([(0, 0, 10, 10)], [0.9]), [BBox(0, 0, 10, 10)], 0.5)
        assert (m.tp, m.fp, m.fn) == (1, 0, 0) and m.pairs == [(0, 0, 1.0)]

    def test_duplicate_is_false_positive(self):
        m = match(dets([(0, 0, 10, 10), (0, 0, 10, 9)], [0.8, 0.9]), [BBox(0, 0, 10, 10)], 0.5)
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)
        assert m.pairs[0][0] == 1  # higher score claims the GT

    def test_below_threshold(self):
        m = match(dets([(0, 0, 10, 4)], [0.9]), [BBox(0, 0, 10, 10)], 0.5)
        assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    def test_threshold_range_checked(self):
        with pytest.raises(ValueError):
            match([], [], 0.0)

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pb, sc, gb = random_image(rng)
        thr = float(rng.choice(DYADIC_THRESHOLDS))
        m = match(dets(pb, sc), [BBox(*g) for g in gb], thr)
        tp, pairs = brute_match(pb, sc, gb, thr)
        assert m.tp == sum(tp) and m.fp == len(pb) - sum(tp) and m.fn == len(gb) - sum(tp)
        assert [(i, j) for i, j, _ in m.pairs] == pairs


class TestPRF1:
    @pytest.mark.parametrize("counts, expected", [
        ((3, 1, 2), (0.6, 0.75, 2 / 3)),
        ((0, 0, 0), (1.0, 1.0, 1.0)),
        ((0, 2, 0), (0.0, 0.0, 0.0)),
        ((0, 0, 4), (0.0, 0.0, 0.0)),
    ])
    def test_examples(self, counts, expected):
        assert prf1(MatchResult(*counts)) == pytest.approx(expected)

    def test_micro_pools_counts(self):
        preds = [dets([(0, 0, 10, 10)], [0.9]), dets([(50, 50, 60, 60), (0, 0, 5, 5)], [0.9, 0.8])]
        gts = [[BBox(0, 0, 10, 10)], [BBox(50, 50, 60, 60)]]
        assert dataset_prf1(preds, gts, 0.5) == pytest.approx((1.0, 2 / 3, 0.8))

    def test_macro_averages_images(self):
        preds = [dets([(0, 0, 10, 10)], [0.9]), dets([(50, 50, 60, 60), (0, 0, 5, 5)], [0.9, 0.8])]
        gts = [[BBox(0, 0, 10, 10)], [BBox(50, 50, 60, 60)]]
        r, p, f1 = dataset_prf1(preds, gts, 0.5, "macro")
        assert (r, p) == pytest.approx((1.0, 0.75)) and f1 == pytest.approx((1.0 + 2 / 3) / 2)

    def test_unknown_aggregation(self):
        with pytest.raises(ValueError):
            dataset_prf1([], [], 0.5, "weighted")


class TestAP:
    def test_perfect_is_one(self):
        assert average_precision([dets([(0, 0, 10, 10)], [0.9])], [[BBox(0, 0, 10, 10)]], 0.5) == 1.0

    def test_miss_then_hit_is_half(self):
        preds = [dets([(40, 40, 50, 50), (0, 0, 10, 10)], [0.9, 0.8])]
        assert average_precision(preds, [[BBox(0, 0, 10, 10)]], 0.5) == pytest.approx(0.5)

    def test_empty_conventions(self):
        assert average_precision([[]], [[]], 0.5) == 1.0
        assert average_precision([dets([(0, 0, 1, 1)], [0.5])], [[]], 0.5) == 0.0
        assert average_precision([[]], [[BBox(0, 0, 1, 1)]], 0.5) == 0.0

    def test_eleven_point(self):
        preds = [dets([(0, 0, 10, 10)], [0.9])]
        gts = [[BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)]]
        # precision 1 up to recall 0.5: six of eleven points
        assert average_precision(preds, gts, 0.5, "11pt") == pytest.approx(6 / 11)

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_oracle(self, seed):
        rng = np.random.default_rng(seed)
        images = [random_image(rng) for _ in range(int(rng.integers(1, 4)))]
        thr = float(rng.choice(DYADIC_THRESHOLDS))
        got = average_precision([dets(pb, sc) for pb, sc, _ in images],
                                [[BBox(*g) for g in gb] for _, _, gb in images], thr)
        want = brute_ap(images, thr)
        assert isinstance(want, Fraction)
        assert abs(got - float(want)) <= 1e-12


class TestSweep:
    def test_threshold_range_inclusive(self):
        assert threshold_range(0.5, 0.9, 0.1) == [0.5, 0.6, 0.7, 0.8, 0.9]

    def test_map_over_range_is_mean(self):
        preds = [dets([(0, 0, 10, 10)], [0.9])]
        gts = [[BBox(0, 0, 10, 9)]]  # IoU 0.9
        assert map_over_range(preds, gts) == 1.0
        gts = [[BBox(0, 0, 10, 7)]]  # IoU 0.7
        assert map_over_range(preds, gts) == pytest.approx(3 / 5)

    def test_five_rows(self):
        rep = iou_sweep([dets([(0, 0, 10, 10)], [0.9])], [[BBox(0, 0, 10, 8)]], SWEEP, "d", "m")
        assert [r.iou_thr for r in rep.rows] == list(SWEEP)
        assert [r.f1 for r in rep.rows] == [1.0, 1.0, 1.0, 1.0, 0.0]

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            iou_sweep([], [], (0.7, 0.5))

    @pytest.mark.parametrize("seed", range(100))
    def test_f1_and_recall_non_increasing(self, seed):
        rng = np.random.default_rng(10_000 + seed)
        images = [random_image(rng) for _ in range(3)]
        preds = [dets(pb, sc) for pb, sc, _ in images]
        gts = [[BBox(*g) for g in gb] for _, _, gb in images]
        rows = iou_sweep(preds, gts, SWEEP).rows
        for a, b in zip(rows, rows[1:]):
            assert b.f1 <= a.f1 + 1e-12
            assert b.recall <= a.recall + 1e-12

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)),
                    max_size=6),
           st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)),
                    max_size=6))
    def test_true_positives_non_increasing(self, p, g):
        preds = [Detection(BBox(x, y, x + w, y + h), (i + 1) / 8) for i, (x, y, w, h) in enumerate(p)]
        gts = [BBox(x, y, x + w, y + h) for x, y, w, h in g]
        tps = [match(preds, gts, t).tp for t in SWEEP]
        assert tps == sorted(tps, reverse=True)


class TestReport:
    def test_json_roundtrip(self, tmp_path):
        rep = iou_sweep([dets([(0, 0, 10, 10)], [0.9])], [[BBox(1, 0, 10, 10)]], SWEEP, "toy", "cascade")
        assert MetricReport.from_json(rep.to_json()) == rep
        jp, tp = rep.save(tmp_path / "report")
        assert MetricReport.from_json(jp.read_text()) == rep
        assert tp.read_text().splitlines()[0] == "dataset=toy model=cascade"
        assert len(tp.read_text().splitlines()) == 2 + len(SWEEP)
