"""Box rectification and 0/180-degree direction classification.

Detected quads are warped to horizontal rectangles by a four-point
homography; a small classifier decides whether a rectified patch is upside
down and flips it when confident enough.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numcore as nc
from .detdb import QuadBox
from .nnblocks import Backbone, BackboneConfig, Linear, Module, StridePlan
from .numcore import Tensor

CLS_INPUT_HW = (48, 192)  # classifier input: 3 x 48 x 192
FLIP_THRESHOLD = 0.9
VERTICAL_ASPECT = 1.5


@dataclass
class DirectionDecision:
    label: int  # 0 or 180
    confidence: float
    flipped: bool


def order_points(quad) -> QuadBox:
    """Canonical clockwise order starting at min(x+y); rejects collinear input."""
    pts = quad.points if isinstance(quad, QuadBox) else np.asarray(quad, dtype=np.float64)
    score = quad.score if isinstance(quad, QuadBox) else 1.0
    return QuadBox(geo.order_quad(pts), score)


def perspective_crop(image: np.ndarray, quad, out_h: int) -> np.ndarray:
    """Warp the quad region to a horizontal out_h-tall rectangle.

    Output width preserves the quad's mean aspect ratio. Pixels sampled
    bilinearly; outside the image they read as 0.
    """
    pts = quad.points if isinstance(quad, QuadBox) else np.asarray(quad, dtype=np.float64)
    c, h, w = image.shape
    clipped = pts.copy()
    clipped[:, 0] = np.clip(clipped[:, 0], 0, w)
    clipped[:, 1] = np.clip(clipped[:, 1], 0, h)
    top = np.linalg.norm(clipped[1] - clipped[0])
    bottom = np.linalg.norm(clipped[2] - clipped[3])
    left = np.linalg.norm(clipped[3] - clipped[0])
    right = np.linalg.norm(clipped[2] - clipped[1])
    vert = (left + right) / 2
    if vert < 1e-9:
        raise ValueError("degenerate quad: zero height")
    out_w = max(1, round(out_h * ((top + bottom) / 2) / vert))
    dst = np.array([[0, 0], [out_w, 0], [out_w, out_h], [0, out_h]], dtype=np.float64)
    dst_to_src = geo.homography_from_points(dst, clipped)
    return geo.warp_perspective(image, dst_to_src, out_h, out_w)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = image.shape
    dst = np.array([[0, 0], [out_w, 0], [out_w, out_h], [0, out_h]], dtype=np.float64)
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    return geo.warp_perspective(image, geo.homography_from_points(dst, src),
                                out_h, out_w)


def prepare_patch(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Aspect-preserving resize to out_h, right-pad to out_w, map [0,1] -> [-1,1]."""
    c, h, w = patch.shape
    new_w = min(out_w, max(1, round(w * out_h / h)))
    resized = resize_bilinear(patch, out_h, new_w)
    canvas = np.zeros((c, out_h, out_w))
    canvas[:, :, :new_w] = resized
    return canvas * 2.0 - 1.0


def rotate180(patch: np.ndarray) -> np.ndarray:
    return patch[:, ::-1, ::-1].copy()


def rotate90_cw(patch: np.ndarray) -> np.ndarray:
    return np.rot90(patch, k=-1, axes=(1, 2)).copy()


def maybe_rotate_vertical(patch: np.ndarray) -> np.ndarray:
    """Rotate 90 degrees clockwise when height/width > 1.5 (vertical text)."""
    c, h, w = patch.shape
    if h / w > VERTICAL_ASPECT:
        return rotate90_cw(patch)
    return patch


class ClsModel(Module):
    """Direction classifier: backbone -> GAP -> FC -> 2 logits."""

    def __init__(self, backbone_config: BackboneConfig = None, rng=None):
        rng = rng or np.random.default_rng(0)
        if backbone_config is None:
            backbone_config = BackboneConfig(
                width_multiplier=0.35, stride_plan=StridePlan.classification())
        self.backbone_config = backbone_config
        self.backbone = Backbone(backbone_config, rng=rng)
        self.fc = Linear(backbone_config.out_channels, 2, rng=rng)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        feat = self.backbone.forward(x, train)[-1]
        n, c = feat.shape[0], feat.shape[1]
        pooled = nc.reshape(nc.global_avg_pool(feat), (n, c))
        return self.fc.forward(pooled)


def classify_direction(patch: np.ndarray, model: ClsModel,
                       flip_threshold: float = FLIP_THRESHOLD) -> DirectionDecision:
    """Decide 0 vs 180 degrees for a rectified patch; flip only when confident."""
    prepped = prepare_patch(patch, *CLS_INPUT_HW)
    with nc.no_grad():
        logits = model.forward(Tensor(prepped[None]))
        probs = nc.softmax(logits, axis=1).data[0]
    label = 0 if probs[0] >= probs[1] else 180
    confidence = float(probs.max())
    flipped = label == 180 and confidence >= flip_threshold
    return DirectionDecision(label, confidence, flipped)
