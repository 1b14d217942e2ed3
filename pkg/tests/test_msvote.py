import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdecnet.detector import CascadeConfig, detect
from cdecnet.geometry import BBox, Detection
from cdecnet.msvote import (
    DEFAULT_FACTORS,
    DetectionCluster,
    ScaleSet,
    cluster_detections,
    detect_multiscale,
    fuse_cluster,
    pool_scales,
    resize_page,
    vote,
)

import gradsuite
from oracles import brute_cluster, random_int_boxes, random_scores

DYADIC_THRESHOLDS = (0.25, 0.375, 0.5, 0.625, 0.75)


def planted(n_scales, box=(10, 10, 50, 40), score=0.9):
    return [Detection(BBox(*box), score, 1, t) for t in range(n_scales)]


@st.composite
def tagged_dets(draw):
    n = draw(st.integers(0, 14))
    out = []
    for _ in range(n):
        x, y = draw(st.integers(0, 30)), draw(st.integers(0, 30))
        w, h = draw(st.integers(1, 15)), draw(st.integers(1, 15))
        out.append(Detection(BBox(x, y, x + w, y + h), draw(st.sampled_from([0.25, 0.5, 0.75, 1.0])), 1,
                             draw(st.integers(0, 6))))
    return out


class TestScaleSet:
    def test_default(self):
        s = ScaleSet()
        assert s.factors == DEFAULT_FACTORS and s.quorum == 4

    @pytest.mark.parametrize("factors", [
        (0.7, 0.8, 0.9, 1.15, 1.3, 1.5, 1.6),       # no 1.0
        (0.7, 0.8, 1.0, 1.15, 1.3, 1.5),            # six factors
        (0.8, 0.7, 0.9, 1.0, 1.15, 1.3, 1.5),       # unsorted
        (0.6, 0.7, 0.8, 0.9, 1.0, 1.15, 1.3),       # four below one
        (0.7, 0.8, 0.8, 1.0, 1.15, 1.3, 1.5),       # duplicate
    ])
    def test_invalid_factors(self, factors):
        with pytest.raises(ValueError):
            ScaleSet(factors)

    @pytest.mark.parametrize("q", [0, 8])
    def test_invalid_quorum(self, q):
        with pytest.raises(ValueError):
            ScaleSet(quorum=q)


class TestCluster:
    def test_seven_identical_form_one_cluster(self):
        cs = cluster_detections(planted(7))
        assert len(cs) == 1 and cs[0].scales == set(range(7))

    def test_disjoint_groups(self):
        dets = planted(4) + planted(5, box=(100, 100, 140, 130), score=0.8)
        cs = cluster_detections(dets)
        assert sorted(len(c.members) for c in cs) == [4, 5]

    def test_same_scale_never_shares_a_cluster(self):
        dets = [Detection(BBox(0, 0, 10, 10), 0.9, 1, 2), Detection(BBox(0, 0, 10, 10), 0.8, 1, 2)]
        assert [len(c.members) for c in cluster_detections(dets)] == [1, 1]

    def test_seed_is_best(self):
        dets = planted(3, score=0.5) + [Detection(BBox(11, 10, 50, 40), 0.95, 1, 5)]
        assert cluster_detections(dets)[0].seed is dets[-1]

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            cluster_detections(planted(2), 1.0)

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 11))
        boxes = random_int_boxes(rng, n)
        scores = random_scores(rng, n)
        tags = [int(t) for t in rng.integers(0, 7, n)]
        thr = float(rng.choice(DYADIC_THRESHOLDS))
        dets = [Detection(BBox(*b), s, 1, t) for b, s, t in zip(boxes, scores, tags)]
        pos = {id(d): i for i, d in enumerate(dets)}
        got = [[pos[id(m)] for m in c.members] for c in cluster_detections(dets, thr)]
        assert got == brute_cluster(boxes, scores, tags, thr)

    @given(tagged_dets())
    def test_partition_and_distinct_scales(self, dets):
        cs = cluster_detections(dets)
        members = [id(m) for c in cs for m in c.members]
        assert sorted(members) == sorted(id(d) for d in dets)
        assert all(len(c.scales) == len(c.members) for c in cs)
        if dets:
            per_tag = max(sum(d.scale_tag == t for d in dets) for t in range(7))
            assert per_tag <= len(cs) <= len(dets)


class TestFuse:
    def test_weighted_equal_scores(self):
        c = DetectionCluster([Detection(BBox(0, 0, 2, 2), 0.5, 1, 0), Detection(BBox(0, 0, 4, 4), 0.5, 1, 1)])
        f = fuse_cluster(c)
        assert f.box == BBox(0, 0, 3, 3) and f.score == 0.5

    def test_weighted_by_score(self):
        c = DetectionCluster([Detection(BBox(0, 0, 4, 4), 0.75, 1, 0), Detection(BBox(0, 0, 8, 8), 0.25, 1, 1)])
        f = fuse_cluster(c)
        assert f.box == BBox(0, 0, 5, 5) and f.score == 0.5

    def test_keep_seed(self):
        c = DetectionCluster([Detection(BBox(0, 0, 2, 2), 0.9, 1, 0), Detection(BBox(0, 0, 4, 4), 0.5, 1, 1)])
        assert fuse_cluster(c, "keep-seed").box == BBox(0, 0, 2, 2)

    def test_errors(self):
        with pytest.raises(ValueError):
            fuse_cluster(DetectionCluster([]))
        with pytest.raises(ValueError):
            fuse_cluster(DetectionCluster(planted(1)), "median")


class TestVote:
    def test_three_of_seven_dropped(self):
        assert vote(planted(3), 4) == []

    def test_four_of_seven_kept(self):
        out = vote(planted(4), 4)
        assert len(out) == 1 and out[0].box == BBox(10, 10, 50, 40)

    @given(tagged_dets(), st.integers(1, 6))
    def test_higher_quorum_keeps_a_subset(self, dets, q):
        strict = vote(dets, q + 1)
        loose = vote(dets, q)
        assert all(d in loose for d in strict)

    @given(tagged_dets())
    def test_quorum_one_keeps_every_cluster(self, dets):
        assert len(vote(dets, 1)) == len(cluster_detections(dets))


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(0, 1, (9, 7))
        assert np.array_equal(resize_page(img, 1.0), img)

    def test_shape_and_range(self):
        out = resize_page(np.random.default_rng(0).uniform(0, 1, (20, 30)), 1.15)
        assert out.shape == (23, 34) and out.min() >= 0 and out.max() <= 1

    def test_constant_page_stays_constant(self):
        np.testing.assert_allclose(resize_page(np.full((16, 12), 0.4), 0.7), 0.4, atol=1e-12)


@pytest.fixture(scope="module")
def model():
    m, page, _ = gradsuite.micro_model(5)
    return m, page, CascadeConfig(**{**m.cfg.__dict__, "score_thr": 0.1})


class TestPipeline:
    def test_single_scale_quorum_one_equals_detect(self, model):
        m, page, cfg = model
        single = detect(m, page, cfg)
        voted = vote(pool_scales(m, page, (1.0,), cfg), 1)
        assert single
        key = lambda d: (-d.score, tuple(d.box.as_array()))  # noqa: E731
        assert sorted(single, key=key) == sorted(voted, key=key)

    def test_deterministic_and_in_bounds(self, model):
        m, page, cfg = model
        a = detect_multiscale(m, page, ScaleSet(quorum=2), cfg)
        b = detect_multiscale(m, page, ScaleSet(quorum=2), cfg)
        assert a == b
        assert all(0 <= d.box.x1 < d.box.x2 <= 32 and 0 <= d.box.y1 < d.box.y2 <= 32 for d in a)

    def test_pool_tags_are_factor_indices(self, model):
        m, page, cfg = model
        tags = {d.scale_tag for d in pool_scales(m, page, DEFAULT_FACTORS, cfg)}
        assert tags <= set(range(7))
