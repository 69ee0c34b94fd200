"""Full-pipeline wiring: reading order, output schema, determinism, and the
optional direction-classifier stage."""

import numpy as np
import pytest

from pocr import pipeline as pl
from pocr import synthgen as sg
from pocr.detdb import DetHeadConfig, DetModel, QuadBox
from pocr.nnblocks import BackboneConfig, StridePlan
from pocr.rectify import ClsModel
from pocr.reccrnn import LabelCodec, RecHeadConfig, RecModel


@pytest.fixture(scope="module")
def models():
    det = DetModel(BackboneConfig(width_multiplier=0.35,
                                  use_se_globally=False),
                   DetHeadConfig(inner_channels=16))
    rec = RecModel(RecHeadConfig(24, 16, 17),
                   BackboneConfig(width_multiplier=0.35,
                                  stride_plan=StridePlan.recognition((1, 1)),
                                  use_se_globally=False))
    cls = ClsModel(BackboneConfig(width_multiplier=0.35,
                                  use_se_globally=False))
    return det, rec, cls


@pytest.fixture
def codec():
    return LabelCodec("0123456789ABCDEF")


def _quad(cx, cy, w=20.0, h=8.0, score=0.9):
    pts = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2],
                    [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])
    return QuadBox(pts, score)


class TestReadingOrder:
    def test_rows_top_to_bottom_then_left_to_right(self):
        quads = [_quad(80, 50), _quad(20, 10), _quad(80, 10), _quad(20, 50)]
        order = pl._reading_order(quads)
        assert order == [1, 2, 3, 0]

    def test_ties_keep_input_order(self):
        quads = [_quad(30, 10), _quad(30, 10), _quad(30, 10)]
        assert pl._reading_order(quads) == [0, 1, 2]

    def test_single_quad(self):
        assert pl._reading_order([_quad(5, 5)]) == [0]

    def test_empty(self):
        assert pl._reading_order([]) == []


class TestRecWidth:
    def test_multiple_of_eight(self):
        for w in (9, 17, 40, 100, 333):
            img = np.zeros((3, 32, w))
            rw = pl._rec_width(img)
            assert rw % 8 == 0
            assert 8 <= rw <= pl.REC_INPUT_W

    def test_wide_patch_capped(self):
        img = np.zeros((3, 32, 5000))
        assert pl._rec_width(img) == pl.REC_INPUT_W


class TestRecognizePatch:
    def test_returns_text_and_confidence(self, models, codec):
        _, rec, _ = models
        rng = np.random.default_rng(0)
        patch = rng.random((3, 48, 96))
        text, conf = pl.recognize_patch(patch, rec, codec)
        assert isinstance(text, str)
        assert all(ch in codec.alphabet for ch in text)
        assert 0.0 <= conf <= 1.0

    def test_deterministic(self, models, codec):
        _, rec, _ = models
        patch = np.random.default_rng(1).random((3, 48, 80))
        a = pl.recognize_patch(patch.copy(), rec, codec)
        b = pl.recognize_patch(patch.copy(), rec, codec)
        assert a == b


class TestOcrLineSchema:
    def test_to_dict_keys_and_types(self):
        line = pl.OcrLine(_quad(10, 10, score=0.8), "AB", 0.7, 180, 0.9)
        d = line.to_dict()
        assert set(d) == {"quad", "text", "det_score", "cls_conf",
                          "rec_conf", "direction"}
        assert len(d["quad"]) == 8
        assert d["text"] == "AB"
        assert d["det_score"] == pytest.approx(0.8)
        assert d["cls_conf"] == pytest.approx(0.9)
        assert d["rec_conf"] == pytest.approx(0.7)
        assert d["direction"] == 180


class TestInfer:
    def test_runs_on_synthetic_page_and_is_deterministic(self, models,
                                                         codec):
        det, rec, _ = models
        page = sg.render_page(2, np.random.default_rng(3), canvas=160,
                              alphabet=codec.alphabet)
        a = pl.infer(page.image, det, rec, codec)
        b = pl.infer(page.image.copy(), det, rec, codec)
        assert a.to_dict() == b.to_dict()
        for line in a.lines:
            d = line.to_dict()
            assert 0.0 <= d["rec_conf"] <= 1.0
            assert 0.0 <= d["det_score"] <= 1.0

    def test_classifier_stage_sets_direction_fields(self, models, codec):
        det, rec, cls = models
        page = sg.render_page(2, np.random.default_rng(5), canvas=160,
                              alphabet=codec.alphabet)
        out = pl.infer(page.image, det, rec, codec, cls_model=cls)
        for line in out.lines:
            assert line.direction in (0, 180)
            assert 0.0 <= line.direction_confidence <= 1.0

    def test_without_classifier_direction_defaults_upright(self, models,
                                                           codec):
        det, rec, _ = models
        page = sg.render_page(1, np.random.default_rng(7), canvas=140,
                              alphabet=codec.alphabet)
        out = pl.infer(page.image, det, rec, codec)
        for line in out.lines:
            assert line.direction == 0
            assert line.direction_confidence == 1.0

    def test_lines_emerge_in_reading_order(self, models, codec):
        det, rec, _ = models
        page = sg.render_page(3, np.random.default_rng(11), canvas=200,
                              alphabet=codec.alphabet)
        out = pl.infer(page.image, det, rec, codec)
        keys = [(round(float(l.quad.points[:, 1].mean()), 3),
                 round(float(l.quad.points[:, 0].mean()), 3))
                for l in out.lines]
        assert keys == sorted(keys)
