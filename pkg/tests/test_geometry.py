import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pocr import geometry as ge

UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class TestAreas:
    def test_unit_square(self):
        assert ge.polygon_area(UNIT) == 1.0

    def test_signed_area_orientation(self):
        assert ge.signed_area(UNIT) != ge.signed_area(UNIT[::-1])
        assert abs(ge.signed_area(UNIT)) == 1.0

    def test_perimeter(self):
        assert ge.polygon_perimeter(UNIT) == pytest.approx(4.0)

    def test_triangle(self):
        tri = np.array([[0, 0], [2, 0], [0, 2]], dtype=float)
        assert ge.polygon_area(tri) == pytest.approx(2.0)


class TestOrderQuad:
    def test_orders_clockwise_from_top_left(self):
        shuffled = UNIT[[2, 0, 3, 1]] * 10
        ordered = ge.order_quad(shuffled)
        assert np.allclose(ordered, UNIT * 10)

    @given(st.integers(0, 23), st.floats(1.0, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant(self, perm_idx, scale):
        import itertools
        perm = list(itertools.permutations(range(4)))[perm_idx]
        quad = UNIT * scale + 3.0
        a = ge.order_quad(quad)
        b = ge.order_quad(quad[list(perm)])
        assert np.allclose(a, b)


class TestConvexHullMinRect:
    def test_hull_of_square_plus_interior(self):
        pts = np.vstack([UNIT, [[0.5, 0.5]]])
        hull = ge.convex_hull(pts)
        assert len(hull) == 4
        assert ge.polygon_area(hull) == pytest.approx(1.0)

    def test_min_area_rect_axis_aligned(self):
        pts = np.array([[1, 2], [5, 2], [5, 4], [1, 4]], dtype=float)
        rect = ge.min_area_rect(pts)
        assert ge.polygon_area(rect) == pytest.approx(8.0)

    def test_min_area_rect_rotated(self):
        theta = 0.3
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        pts = (UNIT * [4.0, 1.0]) @ rot.T
        rect = ge.min_area_rect(pts)
        assert ge.polygon_area(rect) == pytest.approx(4.0, rel=1e-6)


class TestOffsetAndClip:
    def test_offset_grows_area(self):
        out = ge.offset_quad(UNIT * 4, 1.0)
        assert ge.polygon_area(out) > ge.polygon_area(UNIT * 4)

    def test_offset_contains_original(self):
        quad = UNIT * 6 + 2
        out = ge.offset_quad(quad, 0.5)
        inter = ge.quad_intersection_area(quad, out)
        assert inter == pytest.approx(ge.polygon_area(quad), rel=1e-9)

    def test_clip_disjoint(self):
        b = UNIT + 5.0
        assert ge.quad_intersection_area(UNIT, b) == 0.0

    def test_clip_half_overlap(self):
        b = UNIT + [0.5, 0.0]
        assert ge.quad_intersection_area(UNIT, b) == pytest.approx(0.5)

    def test_clip_identity(self):
        assert ge.quad_intersection_area(UNIT, UNIT) == pytest.approx(1.0)


class TestHomography:
    def test_identity_from_same_points(self):
        mat = ge.homography_from_points(UNIT, UNIT)
        assert np.allclose(mat / mat[2, 2], np.eye(3), atol=1e-9)

    def test_maps_corners_exactly(self):
        dst = np.array([[1, 1], [7, 2], [8, 6], [0, 5]], dtype=float)
        mat = ge.homography_from_points(UNIT, dst)
        assert np.allclose(ge.apply_homography(mat, UNIT), dst, atol=1e-8)

    def test_inverse_round_trip(self):
        dst = np.array([[1, 1], [7, 2], [8, 6], [0, 5]], dtype=float)
        fwd = ge.homography_from_points(UNIT, dst)
        back = ge.homography_from_points(dst, UNIT)
        pts = np.array([[0.3, 0.4], [0.9, 0.1]])
        assert np.allclose(
            ge.apply_homography(back, ge.apply_homography(fwd, pts)),
            pts, atol=1e-8)


class TestSampling:
    def test_bilinear_at_pixel_centers(self):
        image = np.arange(12, dtype=float).reshape(1, 3, 4)
        xs = np.array([1.5])  # center of pixel column 1
        ys = np.array([0.5])
        assert ge.bilinear_sample(image, xs, ys)[0, 0] == pytest.approx(1.0)

    def test_bilinear_outside_is_zero(self):
        image = np.ones((1, 3, 4))
        assert ge.bilinear_sample(image, np.array([-5.0]),
                                  np.array([1.0]))[0, 0] == 0.0

    def test_warp_identity(self):
        rng = np.random.default_rng(0)
        image = rng.random((3, 8, 10))
        out = ge.warp_perspective(image, np.eye(3), 8, 10)
        assert np.allclose(out, image, atol=1e-12)
