"""Semantic (mIoU) and panoptic (PQ/SQ/RQ) evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class MIoUResult:
    per_class_iou: dict          # class id -> IoU, only classes present in gt
    miou: Optional[float]        # None when no class is present ("no classes")

    @property
    def defined(self) -> bool:
        return self.miou is not None

    def to_dict(self) -> dict:
        return {"per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
                "miou": self.miou}


class ConfusionAccumulator:
    """``K x K`` pixel counts, ground truth on rows and prediction on columns."""

    def __init__(self, n_classes: int, ignore_index: Optional[int] = 255):
        if n_classes < 1:
            raise ContractError("need at least one class")
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = np.ones(gt.shape, dtype=bool) if self.ignore_index is None else gt != self.ignore_index
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        k = self.n_classes
        for name, arr in (("prediction", p), ("ground truth", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ContractError(f"{name} label outside 0..{k - 1}")
        self.matrix += np.bincount(g * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ContractError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.n_classes, self.ignore_index)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def miou(self) -> MIoUResult:
        m = self.matrix
        tp = np.diag(m)
        gt_count = m.sum(axis=1)
        pred_count = m.sum(axis=0)
        # exact rationals from integer counts, rounded once at the end
        exact = {int(k): Fraction(int(tp[k]), int(gt_count[k] + pred_count[k] - tp[k]))
                 for k in np.flatnonzero(gt_count > 0)}
        if not exact:
            return MIoUResult({}, None)
        mean = sum(exact.values(), Fraction(0)) / len(exact)
        return MIoUResult({k: float(v) for k, v in exact.items()}, float(mean))


def miou(pred_map, gt_map, n_classes: int, ignore_index: Optional[int] = 255) -> MIoUResult:
    acc = ConfusionAccumulator(n_classes, ignore_index)
    acc.update(pred_map, gt_map)
    return acc.miou()


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {"pq": self.pq, "sq": self.sq, "rq": self.rq,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


class PQAccumulator:
    """Running TP/FP/FN counts and summed TP IoU; mergeable across shards."""

    def __init__(self):
        self.iou_sum = 0.0
        self.tp = self.fp = self.fn = 0

    def update(self, pred_segments: Sequence, gt_segments: Sequence) -> None:
        _check_disjoint(pred_segments)
        matched_p, matched_g = set(), set()
        for gi, (gc, gm) in enumerate(gt_segments):
            gm = np.asarray(gm, dtype=bool)
            for pi, (pc, pm) in enumerate(pred_segments):
                if pc != gc or pi in matched_p:
                    continue
                pm = np.asarray(pm, dtype=bool)
                union = np.logical_or(pm, gm).sum()
                iou = np.logical_and(pm, gm).sum() / union if union else 0.0
                if iou > 0.5:  # unique match by construction for disjoint predictions
                    matched_p.add(pi)
                    matched_g.add(gi)
                    self.iou_sum += float(iou)
                    break
        self.tp += len(matched_g)
        self.fp += len(pred_segments) - len(matched_p)
        self.fn += len(gt_segments) - len(matched_g)

    def merge(self, other: "PQAccumulator") -> "PQAccumulator":
        out = PQAccumulator()
        out.iou_sum = self.iou_sum + other.iou_sum
        out.tp, out.fp, out.fn = self.tp + other.tp, self.fp + other.fp, self.fn + other.fn
        return out

    def result(self) -> PQResult:
        if self.tp == 0:
            return PQResult(0.0, 0.0, 0.0, 0, self.fp, self.fn)
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        sq = self.iou_sum / self.tp
        rq = self.tp / denom
        return PQResult(self.iou_sum / denom, sq, rq, self.tp, self.fp, self.fn)


def _check_disjoint(segments: Sequence) -> None:
    if len(segments) < 2:
        return
    count = np.zeros(np.shape(segments[0][1]), dtype=np.int64)
    for _, m in segments:
        count += np.asarray(m, dtype=bool)
    if count.max() > 1:
        raise ContractError("predicted segments overlap")


def panoptic_quality(pred_segments: Sequence, gt_segments: Sequence) -> PQResult:
    """PQ/SQ/RQ for ``(class, mask)`` segment lists of one image."""
    acc = PQAccumulator()
    acc.update(pred_segments, gt_segments)
    return acc.result()


def segments_from_map(panoptic_map: np.ndarray, segments: Sequence[dict]) -> list:
    """``(class, mask)`` pairs from a panoptic id map and its segment records."""
    return [(s["class"], panoptic_map == s["id"]) for s in segments]
