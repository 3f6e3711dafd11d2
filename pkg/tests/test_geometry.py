import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detkd.geometry import (
    BACKGROUND,
    Box,
    LabeledProposal,
    assign_pyramid_level,
    boxes_to_array,
    clip_box,
    extract_rois_from_dense,
    filter_negative_candidates,
    iou,
    iou_matrix,
    sample_proposals,
)

coord = st.floats(0, 60, allow_nan=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    w, h = draw(st.floats(0.5, 30)), draw(st.floats(0.5, 30))
    return Box(x1, y1, x1 + w, y1 + h)


def gt(box, label=1, image_id=0, k=0):
    return LabeledProposal(box, label, image_id, k)


class TestIou:
    def test_identity(self):
        b = Box(1, 2, 5, 9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_hand_value(self):
        assert math.isclose(iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)), 1 / 7)

    @given(boxes(), boxes())
    def test_bounded_and_symmetric(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)

    @given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
    def test_matrix_matches_scalar(self, a, b):
        m = iou_matrix(boxes_to_array(a), boxes_to_array(b))
        expect = np.array([[iou(x, y) for y in b] for x in a])
        np.testing.assert_allclose(m, expect, atol=1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            Box(3, 0, 1, 2)


class TestLevels:
    def test_base_scale(self):
        assert assign_pyramid_level(Box(0, 0, 8, 8), 4) == 0

    def test_two_octaves(self):
        assert assign_pyramid_level(Box(0, 0, 32, 32), 6) == 2

    def test_tiny_box_clamped(self):
        assert assign_pyramid_level(Box(0, 0, 0.5, 0.5), 4) == 0

    def test_huge_box_clamped(self):
        assert assign_pyramid_level(Box(0, 0, 1000, 1000), 4) == 3

    @given(st.floats(0.5, 500), st.floats(1.0, 4.0))
    def test_scale_monotone(self, side, factor):
        small = assign_pyramid_level(Box(0, 0, side, side), 5)
        large = assign_pyramid_level(Box(0, 0, side * factor, side * factor), 5)
        assert 0 <= small <= large <= 4


class TestSampleProposals:
    gts = [gt(Box(4, 4, 24, 30), 2, 7, 0), gt(Box(30, 20, 60, 50), 3, 7, 1)]

    def test_no_jitter_copies_ground_truth(self):
        sample = sample_proposals(self.gts, 16, 0.5, 0.0, 0, (64, 64))
        pos = [p for p in sample.proposals if p.is_positive]
        assert [p.box for p in pos] == [self.gts[k % 2].box for k in range(8)]

    def test_counts(self):
        sample = sample_proposals(self.gts, 64, 0.25, 0.1, 1, (64, 64))
        pos = [p for p in sample.proposals if p.is_positive]
        assert len(pos) == 16 and len(sample.proposals) == 64
        assert not sample.short_negatives

    @pytest.mark.parametrize("seed", range(5))
    def test_negatives_avoid_ground_truth(self, seed):
        sample = sample_proposals(self.gts, 64, 0.25, 0.1, seed, (64, 64))
        neg = [p for p in sample.proposals if not p.is_positive]
        ov = iou_matrix(boxes_to_array([p.box for p in neg]), boxes_to_array([g.box for g in self.gts]))
        assert (ov.max(axis=1) < 0.5).all()

    def test_positives_keep_overlap(self):
        sample = sample_proposals(self.gts, 64, 0.5, 0.3, 3, (64, 64))
        for p in sample.proposals:
            if p.is_positive:
                assert iou(p.box, self.gts[p.gt_index].box) >= 0.5

    def test_crowded_scene_flags_short(self):
        full = [gt(Box(0, 0, 64, 64))]
        # any box of side >= 50 overlaps the full-grid gt with IoU >= 0.61
        sample = sample_proposals(full, 8, 0.25, 0.0, 0, (64, 64), size_range=(50, 60))
        assert sample.short_negatives
        assert sum(not p.is_positive for p in sample.proposals) == 0

    def test_deterministic(self):
        a = sample_proposals(self.gts, 32, 0.25, 0.1, 11, (64, 64))
        b = sample_proposals(self.gts, 32, 0.25, 0.1, 11, (64, 64))
        assert a.proposals == b.proposals


class TestExtractRois:
    gts = [gt(Box(10, 10, 30, 30), 4)]

    def test_exact_prediction_is_positive(self):
        rois = extract_rois_from_dense([Box(10, 10, 30, 30)], self.gts)
        assert rois[0].label == 4 and rois[0].source == 0

    def test_disjoint_prediction_is_negative_candidate(self):
        rois = extract_rois_from_dense([Box(10, 10, 30, 30), Box(40, 40, 60, 60)], self.gts)
        assert [r.label for r in rois] == [4, BACKGROUND]

    def test_ratio(self):
        pos = [Box(10 + k * 0.1, 10, 30, 30) for k in range(4)]
        neg = [Box(40, 40 + k * 0.2, 60, 60) for k in range(40)]
        rois = extract_rois_from_dense(pos + neg, self.gts, seed=0)
        assert sum(r.is_positive for r in rois) == 4
        assert sum(not r.is_positive for r in rois) == 12

    def test_empty_predictions(self):
        assert extract_rois_from_dense([], self.gts) == []
        assert extract_rois_from_dense([None], self.gts) == []

    @given(st.lists(boxes(), min_size=1, max_size=20))
    def test_positives_clear_threshold(self, preds):
        for r in extract_rois_from_dense(preds, self.gts):
            if r.is_positive:
                assert iou(r.box, self.gts[0].box) >= 0.5


class TestFilterNegatives:
    def test_anchor_removed(self):
        a = gt(Box(0, 0, 10, 10))
        assert filter_negative_candidates(a, [a]) == []

    def test_other_image_kept(self):
        a = gt(Box(0, 0, 10, 10), image_id=0)
        twin = gt(Box(0, 0, 10, 10), image_id=1)
        assert filter_negative_candidates(a, [twin]) == [twin]

    def test_threshold_one_drops_only_duplicates(self):
        a = gt(Box(0, 0, 10, 10))
        near = LabeledProposal(Box(0, 0, 10, 9.5), BACKGROUND, 0)
        assert filter_negative_candidates(a, [a, near], iou_threshold=1.0) == [near]

    @given(st.lists(boxes(), max_size=10), st.floats(0, 1))
    def test_never_drops_cross_image(self, cands, thr):
        a = gt(Box(5, 5, 20, 20), image_id=0)
        others = [LabeledProposal(b, BACKGROUND, 1) for b in cands]
        assert filter_negative_candidates(a, others, thr) == others


def test_clip_box():
    assert clip_box([-5, -5, 10, 10], 8, 8) == Box(0, 0, 8, 8)
    assert clip_box([70, 70, 80, 80], 64, 64) is None
