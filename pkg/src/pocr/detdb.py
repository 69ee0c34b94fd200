"""Differentiable-binarization text detection: head, loss, post-processing.

The head fuses the backbone pyramid FPN-style and emits probability and
threshold maps at input resolution; training combines them through a steep
sigmoid into an approximate binary map. Post-processing turns a probability
map into scored quadrilateral boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry as geo
from . import numcore as nc
from .nnblocks import Backbone, BackboneConfig, ConvBNAct, Conv2d, Module
from .numcore import Tensor

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class DetHeadConfig:
    inner_channels: int = 16
    k_amplify: float = 50.0
    # per-layer widths; default to inner_channels, overridden by pruning
    smooth_channels: list = None
    prob_tower_channels: int = None
    thresh_tower_channels: int = None

    def __post_init__(self):
        if self.inner_channels < 8:
            raise ValueError(f"inner_channels must be >= 8, got {self.inner_channels}")
        if self.smooth_channels is None:
            self.smooth_channels = [self.inner_channels] * 4
        if self.prob_tower_channels is None:
            self.prob_tower_channels = self.inner_channels
        if self.thresh_tower_channels is None:
            self.thresh_tower_channels = self.inner_channels

    def to_dict(self) -> dict:
        return {
            "inner_channels": self.inner_channels,
            "k_amplify": self.k_amplify,
            "smooth_channels": list(self.smooth_channels),
            "prob_tower_channels": self.prob_tower_channels,
            "thresh_tower_channels": self.thresh_tower_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetHeadConfig":
        return DetHeadConfig(d["inner_channels"], d["k_amplify"],
                             list(d["smooth_channels"]),
                             d["prob_tower_channels"],
                             d["thresh_tower_channels"])


@dataclass
class QuadBox:
    """Four-point text region, clockwise from top-left, with a score."""

    points: np.ndarray  # [4, 2] float
    score: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (4, 2):
            raise ValueError(f"QuadBox needs 4 points, got {self.points.shape}")


class ProbMaps:
    """prob/thresh maps plus the derived approximate binary map."""

    def __init__(self, prob: Tensor, thresh: Tensor, k_amplify: float = 50.0):
        self.prob = prob
        self.thresh = thresh
        self.approx_binary = nc.sigmoid((prob - thresh) * k_amplify)


class DBHead(Module):
    """FPN-style fusion head emitting prob and thresh maps at input resolution."""

    def __init__(self, pyramid_channels, config: DetHeadConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        inner = config.inner_channels
        if len(config.smooth_channels) != len(pyramid_channels):
            raise ValueError(
                f"{len(config.smooth_channels)} smooth widths for "
                f"{len(pyramid_channels)} pyramid levels")
        self.laterals = [Conv2d(c, inner, 1, rng=rng) for c in pyramid_channels]
        self.smooths = [ConvBNAct(inner, sc, 3, act="relu", rng=rng)
                        for sc in config.smooth_channels]
        fused = sum(config.smooth_channels)
        self.prob_tower = [ConvBNAct(fused, config.prob_tower_channels, 3,
                                     act="relu", rng=rng),
                           Conv2d(config.prob_tower_channels, 1, 3, bias=True, rng=rng)]
        self.thresh_tower = [ConvBNAct(fused, config.thresh_tower_channels, 3,
                                       act="relu", rng=rng),
                             Conv2d(config.thresh_tower_channels, 1, 3, bias=True, rng=rng)]

    def _tower(self, layers, fused, train, out_hw):
        # upsample in two x2 hops so the 1-channel conv runs at half
        # resolution rather than full input resolution
        h = layers[0].forward(fused, train)
        h = nc.upsample_nearest(h, 2)
        h = layers[1].forward(h)
        h = nc.upsample_nearest(h, 2)
        h = nc.getitem(h, np.s_[:, :, :out_hw[0], :out_hw[1]])
        return nc.sigmoid(h)

    def forward(self, pyramid, input_hw, train: bool = False) -> ProbMaps:
        if len(pyramid) != len(self.laterals):
            raise ValueError(
                f"head built for {len(self.laterals)} pyramid levels, got {len(pyramid)}")
        lats = [lat.forward(p) for lat, p in zip(self.laterals, pyramid)]
        # top-down pathway: upsample coarser level and add
        for i in range(len(lats) - 2, -1, -1):
            up = nc.upsample_nearest(lats[i + 1], 2)
            th, tw = lats[i].shape[2], lats[i].shape[3]
            up = nc.getitem(up, np.s_[:, :, :th, :tw])
            lats[i] = lats[i] + up
        smoothed = [s.forward(l, train) for s, l in zip(self.smooths, lats)]
        base_hw = smoothed[0].shape[2:]
        fused = [smoothed[0]]
        for lvl, sm in enumerate(smoothed[1:], start=1):
            up = nc.upsample_nearest(sm, 2 ** lvl)
            fused.append(nc.getitem(up, np.s_[:, :, :base_hw[0], :base_hw[1]]))
        fused = nc.concat(fused, axis=1)
        prob = self._tower(self.prob_tower, fused, train, input_hw)
        thresh = self._tower(self.thresh_tower, fused, train, input_hw)
        return ProbMaps(prob, thresh, self.config.k_amplify)


class DetModel(Module):
    """Backbone + DB head; forward maps an image batch to ProbMaps."""

    def __init__(self, backbone_config: BackboneConfig,
                 head_config: DetHeadConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.backbone_config = backbone_config
        self.head_config = head_config
        self.backbone = Backbone(backbone_config, rng=rng)
        self.head = DBHead(backbone_config.pyramid_channels(), head_config, rng=rng)

    def forward(self, x: Tensor, train: bool = False) -> ProbMaps:
        pyramid = self.backbone.forward(x, train)
        return self.head.forward(pyramid, x.shape[2:], train)


# ---------------------------------------------------------------------------
# loss


def _bce(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    t = Tensor(target)
    return -(t * nc.log(pred + eps) + (1.0 - t) * nc.log(1.0 - pred + eps)).mean()


def _balanced_bce(pred: Tensor, target: np.ndarray, neg_ratio: float = 3.0,
                  eps: float = 1e-7) -> Tensor:
    """BCE with hard-negative mining: all positives plus the neg_ratio-times
    hardest negatives, so the ~96% background pixels cannot swamp the loss.
    Falls back to the 256 hardest negatives when a batch has no positives.
    """
    t = Tensor(target)
    per = -(t * nc.log(pred + eps) + (1.0 - t) * nc.log(1.0 - pred + eps))
    pos = target > 0.5
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    k_neg = min(n_neg, max(int(neg_ratio * n_pos), 256))
    neg_losses = per.data[~pos]
    if k_neg < n_neg:
        cutoff = np.partition(neg_losses, -k_neg)[-k_neg]
        keep = pos | ((~pos) & (per.data >= cutoff))
        # ties at the cutoff can push the count past k_neg; renormalize by
        # the actual number kept
        denom = int(keep.sum())
    else:
        keep = np.ones_like(pos)
        denom = pos.size
    return nc.tsum(per * keep.astype(np.float64)) * (1.0 / max(denom, 1))


def db_loss(maps: ProbMaps, gt_shrunk_mask: np.ndarray, gt_thresh_map: np.ndarray,
            gt_border_mask: np.ndarray, beta: float = 10.0) -> Tensor:
    """mined BCE(prob) + beta * masked L1(thresh) + mined BCE(approx_binary)."""
    if maps.prob.shape[2:] != gt_shrunk_mask.shape[-2:]:
        raise ValueError(
            f"resolution mismatch: maps {maps.prob.shape[2:]} vs "
            f"targets {gt_shrunk_mask.shape[-2:]}")
    loss = _balanced_bce(maps.prob, gt_shrunk_mask)
    mask_sum = gt_border_mask.sum()
    if mask_sum > 0:
        diff = (maps.thresh - Tensor(gt_thresh_map)) * Tensor(gt_border_mask)
        l1 = nc.absolute(diff).sum() * (1.0 / mask_sum)
        loss = loss + beta * l1
    loss = loss + _balanced_bce(maps.approx_binary, gt_shrunk_mask)
    return loss


def render_targets(quads, h: int, w: int, shrink_ratio: float = 0.4):
    """Ground-truth maps for db_loss from text quads.

    Returns (shrunk_mask, thresh_map, border_mask), each [h, w] float64.
    """
    shrunk_mask = np.zeros((h, w))
    thresh_map = np.zeros((h, w))
    border_mask = np.zeros((h, w))
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([jj, ii], axis=-1)  # [h, w, 2] pixel centers
    for quad in quads:
        pts = quad.points if isinstance(quad, QuadBox) else np.asarray(quad)
        area = geo.polygon_area(pts)
        perim = geo.polygon_perimeter(pts)
        if perim < 1e-9:
            continue
        d = area * shrink_ratio / perim
        try:
            inner = geo.offset_quad(pts, -d)
        except ValueError:
            continue
        shrunk_mask = np.maximum(shrunk_mask, _fill_quad(inner, pix))
        outer = geo.offset_quad(pts, d)
        band = _fill_quad(outer, pix)
        dist = _dist_to_quad_edges(pts, pix)
        tmap = np.clip(1.0 - dist / max(d, 1e-9), 0.0, 1.0) * band
        thresh_map = np.maximum(thresh_map, tmap)
        border_mask = np.maximum(border_mask, band)
    return shrunk_mask, thresh_map, border_mask


def _fill_quad(quad: np.ndarray, pix: np.ndarray) -> np.ndarray:
    """Indicator of pixel centers inside a convex quad (any orientation)."""
    quad = np.asarray(quad)
    sign = 1.0 if geo.signed_area(quad) >= 0 else -1.0
    inside = np.ones(pix.shape[:2], dtype=bool)
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        cross = ((b[0] - a[0]) * (pix[..., 1] - a[1])
                 - (b[1] - a[1]) * (pix[..., 0] - a[0])) * sign
        inside &= cross >= 0
    return inside.astype(np.float64)


def _dist_to_quad_edges(quad: np.ndarray, pix: np.ndarray) -> np.ndarray:
    dmin = np.full(pix.shape[:2], np.inf)
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        ab = b - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip(((pix[..., 0] - a[0]) * ab[0]
                     + (pix[..., 1] - a[1]) * ab[1]) / denom, 0.0, 1.0)
        px = a[0] + t * ab[0]
        py = a[1] + t * ab[1]
        d = np.hypot(pix[..., 0] - px, pix[..., 1] - py)
        dmin = np.minimum(dmin, d)
    return dmin


# ---------------------------------------------------------------------------
# post-processing


def db_postprocess(prob: np.ndarray, bin_thresh: float = 0.3,
                   box_thresh: float = 0.6, unclip_ratio: float = 1.5):
    """Probability map -> scored, unclipped QuadBoxes.

    4-connected components of prob > bin_thresh; each becomes the minimum-area
    rectangle of its pixel extent, scored by mean prob inside the component.
    """
    if not (0 < bin_thresh < 1 and 0 < box_thresh < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    prob = np.asarray(prob)
    if prob.ndim > 2:
        prob = prob.reshape(prob.shape[-2:])
    h, w = prob.shape
    binary = prob > bin_thresh
    labels, count = ndimage.label(binary, structure=_FOUR_CONN)
    boxes = []
    for comp in range(1, count + 1):
        rows, cols = np.nonzero(labels == comp)
        if len(rows) <= 1:
            continue  # degenerate single-pixel component
        score = float(prob[rows, cols].mean())
        if score < box_thresh:
            continue
        corners = np.concatenate([
            np.stack([cols, rows], axis=1),
            np.stack([cols + 1, rows], axis=1),
            np.stack([cols, rows + 1], axis=1),
            np.stack([cols + 1, rows + 1], axis=1),
        ]).astype(np.float64)
        rect = geo.min_area_rect(corners)
        area = geo.polygon_area(rect)
        perim = geo.polygon_perimeter(rect)
        if perim < 1e-9 or area < 1e-9:
            continue
        d = area * unclip_ratio / perim
        expanded = geo.offset_quad(rect, d)
        expanded[:, 0] = np.clip(expanded[:, 0], 0, w)
        expanded[:, 1] = np.clip(expanded[:, 1], 0, h)
        boxes.append(QuadBox(geo.order_quad(expanded), score))
    return boxes


def quad_iou(a: QuadBox, b: QuadBox) -> float:
    """Polygon IoU via Sutherland-Hodgman clipping; 0 for degenerate quads."""
    pa = a.points if isinstance(a, QuadBox) else np.asarray(a)
    pb = b.points if isinstance(b, QuadBox) else np.asarray(b)
    area_a = geo.polygon_area(pa)
    area_b = geo.polygon_area(pb)
    if area_a < 1e-12 or area_b < 1e-12:
        return 0.0
    inter = geo.quad_intersection_area(pa, pb)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0
