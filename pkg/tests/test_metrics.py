import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrovseg.errors import ContractError, ShapeError
from mrovseg.metrics import (ConfusionAccumulator, PQAccumulator, miou, panoptic_quality,
                             segments_from_map)


class TestMIoU:
    def test_hand_case(self):
        res = miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
        assert res.per_class_iou == {0: 1 / 2, 1: 2 / 3}
        assert res.miou == 7 / 12

    def test_absent_classes_skipped(self):
        res = miou(np.array([[0, 2]]), np.array([[0, 0]]), 3)
        assert res.per_class_iou == {0: 0.5}

    def test_no_classes(self):
        res = miou(np.array([[255]]), np.array([[255]]), 2)
        assert res.miou is None and not res.defined

    def test_ignore_index(self):
        res = miou(np.array([[1, 1]]), np.array([[1, 255]]), 2)
        assert res.miou == 1.0

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            miou(np.array([[3]]), np.array([[0]]), 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)

    @settings(max_examples=30)
    @given(arrays(np.int64, (6, 5), elements=st.integers(0, 3)),
           arrays(np.int64, (6, 5), elements=st.integers(0, 3)), st.integers(1, 5))
    def test_merge_equals_single_pass(self, pred, gt, cut):
        whole = ConfusionAccumulator(4)
        whole.update(pred, gt)
        a, b = ConfusionAccumulator(4), ConfusionAccumulator(4)
        a.update(pred[:cut], gt[:cut])
        b.update(pred[cut:], gt[cut:])
        assert a.merge(b).miou() == whole.miou()

    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 2)))
    def test_perfect_prediction(self, gt):
        assert miou(gt, gt, 3).miou == 1.0


def square(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


class TestPQ:
    def test_hand_case(self):
        gt = square(10, 10, 0, 10, 0, 5)               # 50 px
        pred = square(10, 10, 0, 10, 0, 4)             # 40 px inside gt: IoU 0.8
        res = panoptic_quality([(1, pred)], [(1, gt)])
        assert (res.pq, res.sq, res.rq) == (0.8, 0.8, 1.0)

    def test_exactly_half_is_not_a_match(self):
        gt = square(4, 4, 0, 4, 0, 2)
        pred = square(4, 4, 0, 4, 0, 1)
        res = panoptic_quality([(0, pred)], [(0, gt)])
        assert (res.tp, res.fp, res.fn) == (0, 1, 1)
        assert res.pq == 0.0

    def test_class_must_agree(self):
        m = square(4, 4, 0, 4, 0, 4)
        res = panoptic_quality([(1, m)], [(2, m)])
        assert (res.tp, res.fp, res.fn) == (0, 1, 1)

    def test_overlapping_predictions_rejected(self):
        m = square(4, 4, 0, 2, 0, 2)
        with pytest.raises(ContractError):
            panoptic_quality([(0, m), (1, m)], [])

    @settings(max_examples=40)
    @given(st.integers(0, 2**31 - 1))
    def test_pq_is_sq_times_rq(self, seed):
        rng = np.random.default_rng(seed)
        acc = PQAccumulator()
        for _ in range(3):
            gt_map = rng.integers(0, 4, (8, 8))
            pred_map = np.where(rng.random((8, 8)) < 0.8, gt_map, rng.integers(0, 4, (8, 8)))
            segs = lambda m: [(int(k) % 2, m == k) for k in np.unique(m)]
            acc.update(segs(pred_map), segs(gt_map))
        r = acc.result()
        assert abs(r.pq - r.sq * r.rq) < 1e-9

    def test_segments_from_map(self):
        pan = np.array([[0, 1], [2, 2]])
        segs = segments_from_map(pan, [{"id": 1, "class": 4}, {"id": 2, "class": 0}])
        assert [c for c, _ in segs] == [4, 0]
        assert segs[1][1].sum() == 2
