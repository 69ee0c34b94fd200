"""End-to-end OCR: detect boxes, rectify patches, classify direction, read text.

The three stages are independent models wired together here.  Each stage can
be disabled or swapped; the result carries per-line confidences from every
stage so callers can filter or audit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .detdb import QuadBox, db_postprocess
from .numcore import Tensor
from .rectify import (classify_direction, maybe_rotate_vertical, order_points,
                      perspective_crop, rotate180)
from .reccrnn import (REC_INPUT_H, REC_INPUT_W, LabelCodec, greedy_decode,
                      prepare_line, resize_bilinear)

REC_CROP_H = 48


@dataclass
class OcrLine:
    """One recognized text line with per-stage confidences."""

    quad: QuadBox
    text: str
    rec_confidence: float
    direction: int = 0
    direction_confidence: float = 1.0

    def to_dict(self) -> dict:
        return {
            "quad": [float(v) for v in self.quad.points.reshape(-1)],
            "text": self.text,
            "det_score": float(self.quad.score),
            "cls_conf": self.direction_confidence,
            "rec_conf": self.rec_confidence,
            "direction": self.direction,
        }


@dataclass
class PipelineResult:
    lines: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lines": [line.to_dict() for line in self.lines]}


def _reading_order(quads) -> list:
    """Stable top-to-bottom then left-to-right ordering of detected quads."""
    keyed = []
    for i, q in enumerate(quads):
        cx, cy = q.points.mean(axis=0)
        keyed.append((round(float(cy), 3), round(float(cx), 3), i))
    return [i for _, _, i in sorted(keyed)]


def _rec_width(image: np.ndarray) -> int:
    _, h, w = image.shape
    pw = min(REC_INPUT_W, max(1, round(w * REC_INPUT_H / h)))
    return min(REC_INPUT_W, int(np.ceil(max(pw, 8) / 8)) * 8)


def recognize_patch(patch: np.ndarray, rec_model, codec: LabelCodec):
    """Rectified patch [3,h,w] in [0,1] -> (text, confidence)."""
    resized = resize_bilinear(patch, REC_INPUT_H,
                              max(8, round(patch.shape[2] * REC_INPUT_H
                                           / patch.shape[1])))
    prepped = prepare_line(resized, _rec_width(resized))
    with nc.no_grad():
        out = rec_model.forward(Tensor(prepped[None]))
    return greedy_decode(Tensor(out.data[:, 0, :]), codec)


def infer(image: np.ndarray, det_model, rec_model, codec: LabelCodec,
          cls_model=None, bin_thresh: float = 0.3, box_thresh: float = 0.6,
          unclip_ratio: float = 1.5) -> PipelineResult:
    """Full-page OCR on an image [3,H,W] with values in [0,1].

    cls_model is optional; without it patches are assumed upright.
    """
    _, h, w = image.shape
    ph = int(np.ceil(h / 32)) * 32
    pw = int(np.ceil(w / 32)) * 32
    padded = image
    if (ph, pw) != (h, w):
        padded = np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)),
                        mode="edge")
    with nc.no_grad():
        maps = det_model.forward(Tensor(padded[None]))
    prob = maps.prob.data[0, 0, :h, :w]
    quads = db_postprocess(prob, bin_thresh, box_thresh, unclip_ratio)
    result = PipelineResult()
    for i in _reading_order(quads):
        quad = quads[i]
        ordered = order_points(quad.points)
        patch = perspective_crop(image, ordered.points, REC_CROP_H)
        patch = maybe_rotate_vertical(patch)
        direction, dir_conf = 0, 1.0
        if cls_model is not None:
            decision = classify_direction(patch, cls_model)
            direction, dir_conf = decision.label, decision.confidence
            if decision.flipped:
                patch = rotate180(patch)
        text, rec_conf = recognize_patch(patch, rec_model, codec)
        result.lines.append(OcrLine(QuadBox(ordered.points, quad.score),
                                    text, rec_conf, direction, dir_conf))
    return result
