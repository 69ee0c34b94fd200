"""Evaluation: detection harmonic mean, accuracies, end-to-end F-score."""

from __future__ import annotations

from dataclasses import dataclass, field

from .detdb import quad_iou


@dataclass
class MatchReport:
    precision: float
    recall: float
    hmean: float
    matches: list = field(default_factory=list)  # (gt idx, pred idx, IoU)


def _hmean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _greedy_match(gts, preds, iou_thresh: float):
    """One-to-one matches in descending IoU order."""
    candidates = []
    for gi, gt in enumerate(gts):
        for pi, pred in enumerate(preds):
            iou = quad_iou(gt, pred)
            if iou >= iou_thresh:
                candidates.append((iou, gi, pi))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_gt, used_pred = set(), set()
    matches = []
    for iou, gi, pi in candidates:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        matches.append((gi, pi, iou))
    return matches


def det_hmean(gts, preds, iou_thresh: float = 0.5) -> MatchReport:
    """Detection precision/recall/harmonic-mean under IoU matching.

    With no predictions, precision is defined as 0.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    matches = _greedy_match(gts, preds, iou_thresh)
    n = len(matches)
    precision = n / len(preds) if preds else 0.0
    recall = n / len(gts) if gts else 0.0
    return MatchReport(precision, recall, _hmean(precision, recall), matches)


def rec_accuracy(pairs) -> float:
    """Exact full-string match rate (case-sensitive, no trimming)."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return sum(1 for gt, pred in pairs if gt == pred) / len(pairs)


def cls_accuracy(pairs) -> float:
    """Exact label match rate."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return sum(1 for gt, pred in pairs if gt == pred) / len(pairs)


def system_fscore(gts, preds, iou_thresh: float = 0.5) -> float:
    """End-to-end F-score: a prediction counts iff its box matches a ground
    truth at the IoU threshold AND the transcript is exactly equal.

    Both arguments are lists of TextInstance (quad + text).
    """
    matches = _greedy_match([g.quad for g in gts], [p.quad for p in preds],
                            iou_thresh)
    correct = sum(1 for gi, pi, _ in matches if gts[gi].text == preds[pi].text)
    precision = correct / len(preds) if preds else 0.0
    recall = correct / len(gts) if gts else 0.0
    return _hmean(precision, recall)
