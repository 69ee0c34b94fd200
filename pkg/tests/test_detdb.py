import numpy as np
import pytest

from pocr import detdb as db
from pocr import geometry as ge
from pocr.nnblocks import BackboneConfig, StridePlan
from pocr.numcore import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rect(x, y, w, h):
    return np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]],
                    dtype=float)


class TestPostprocess:
    def test_single_blob_bounding_rect(self):
        """A 6x3 blob yields exactly one box whose pre-unclip rectangle is
        the blob's bounding rectangle (recovered by shrinking the output
        back by the known offset)."""
        prob = np.zeros((40, 40))
        prob[10:13, 5:11] = 0.9  # rows 10..12, cols 5..10
        boxes = db.db_postprocess(prob, 0.3, 0.6, 1.5)
        assert len(boxes) == 1
        box = boxes[0]
        assert box.score == pytest.approx(0.9)
        expected_rect = rect(5, 10, 6, 3)
        area = ge.polygon_area(expected_rect)
        perim = ge.polygon_perimeter(expected_rect)
        d = area * 1.5 / perim
        recovered = ge.offset_quad(box.points, -d)
        assert np.allclose(np.sort(recovered, axis=0),
                           np.sort(expected_rect, axis=0), atol=1e-9)

    def test_unclip_contains_blob(self):
        prob = np.zeros((40, 40))
        prob[10:13, 5:11] = 0.9
        box = db.db_postprocess(prob)[0]
        blob = rect(5, 10, 6, 3)
        inter = ge.quad_intersection_area(blob, box.points)
        assert inter == pytest.approx(ge.polygon_area(blob))

    def test_low_score_component_dropped(self):
        prob = np.zeros((20, 20))
        prob[5:8, 5:8] = 0.4  # above bin_thresh, below box_thresh
        assert db.db_postprocess(prob, 0.3, 0.6, 1.5) == []

    def test_two_components_two_boxes(self):
        prob = np.zeros((30, 30))
        prob[2:5, 2:8] = 0.9
        prob[20:23, 10:16] = 0.9
        assert len(db.db_postprocess(prob)) == 2

    def test_diagonal_pixels_not_connected(self):
        # 4-connectivity: two diagonal 2x2 blobs stay separate
        prob = np.zeros((20, 20))
        prob[2:4, 2:4] = 0.9
        prob[4:6, 4:6] = 0.9
        assert len(db.db_postprocess(prob)) == 2

    def test_empty_map(self):
        assert db.db_postprocess(np.zeros((10, 10))) == []

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            db.db_postprocess(np.zeros((5, 5)), bin_thresh=0.0)


class TestQuadIoU:
    def test_identical(self):
        a = db.QuadBox(rect(0, 0, 4, 2))
        assert db.quad_iou(a, a) == pytest.approx(1.0)

    def test_known_third(self):
        # 1x2 and 2x1 rectangles sharing a 1x1 corner: inter 1, union 3
        a = db.QuadBox(rect(0, 0, 1, 2))
        b = db.QuadBox(rect(0, 0, 2, 1))
        assert db.quad_iou(a, b) == pytest.approx(1 / 3)

    def test_disjoint(self):
        a = db.QuadBox(rect(0, 0, 1, 1))
        b = db.QuadBox(rect(5, 5, 1, 1))
        assert db.quad_iou(a, b) == 0.0


class TestRenderTargets:
    def test_shrunk_inside_band_inside_quad_band(self):
        quad = rect(6, 6, 20, 10)
        shrunk, thresh, border = db.render_targets([quad], 40, 40)
        assert shrunk.sum() > 0
        assert border.sum() > shrunk.sum()  # band is wider than the core
        # the shrunk mask lies strictly inside the original quad
        jj, ii = np.nonzero(shrunk)
        assert jj.min() > 6 and ii.min() > 6

    def test_thresh_peaks_at_edges(self):
        quad = rect(6, 6, 20, 10)
        _, thresh, border = db.render_targets([quad], 40, 40)
        assert thresh.max() <= 1.0
        # values near the quad edge exceed values well inside
        edge_val = thresh[11, 6]
        center_val = thresh[11, 16]
        assert edge_val > center_val

    def test_empty_quads(self):
        shrunk, thresh, border = db.render_targets([], 10, 10)
        assert shrunk.sum() == thresh.sum() == border.sum() == 0


class TestHeadAndLoss:
    def _model(self, rng):
        cfg = BackboneConfig(0.35, StridePlan.detection(),
                             use_se_globally=False)
        return db.DetModel(cfg, db.DetHeadConfig(inner_channels=16), rng=rng)

    def test_maps_at_input_resolution(self, rng):
        model = self._model(rng)
        x = Tensor(rng.random((1, 3, 32, 32)))
        maps = model.forward(x)
        assert maps.prob.shape == (1, 1, 32, 32)
        assert maps.thresh.shape == (1, 1, 32, 32)
        assert (maps.prob.data >= 0).all() and (maps.prob.data <= 1).all()

    def test_loss_positive_and_finite(self, rng):
        model = self._model(rng)
        x = Tensor(rng.random((1, 3, 32, 32)))
        maps = model.forward(x, train=True)
        quad = rect(4, 4, 20, 12)
        shrunk, thresh, border = db.render_targets([quad], 32, 32)
        loss = db.db_loss(maps, shrunk[None, None], thresh[None, None],
                          border[None, None])
        assert np.isfinite(loss.data)
        assert float(loss.data) > 0

    def test_loss_resolution_mismatch(self, rng):
        model = self._model(rng)
        maps = model.forward(Tensor(rng.random((1, 3, 32, 32))))
        with pytest.raises(ValueError):
            db.db_loss(maps, np.zeros((1, 1, 16, 16)),
                       np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 16, 16)))

    def test_head_config_round_trip(self):
        cfg = db.DetHeadConfig(inner_channels=16)
        cfg.smooth_channels = [16, 12, 16, 8]
        back = db.DetHeadConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
