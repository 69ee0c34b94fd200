"""Polygon and homography utilities shared by detection and rectification.

Coordinates are (x, y) in pixel-edge space: pixel (row r, col c) spans
x in [c, c+1), y in [r, r+1), with its center at (c+0.5, r+0.5).
"""

from __future__ import annotations

import numpy as np


def polygon_area(pts: np.ndarray) -> float:
    """Unsigned shoelace area."""
    return abs(signed_area(pts))


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_perimeter(pts: np.ndarray) -> float:
    return float(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).sum())


def order_quad(pts: np.ndarray) -> np.ndarray:
    """Canonical quad order: clockwise (image coords, y down), starting at the
    vertex with minimal x+y; ties broken by smaller y.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape != (4, 2):
        raise ValueError(f"expected 4 points, got shape {pts.shape}")
    centroid = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0])
    order = np.argsort(ang, kind="stable")  # increasing angle = clockwise when y is down
    ring = pts[order]
    if abs(signed_area(ring)) < 1e-12:
        raise ValueError("collinear points do not form a quad")
    s = ring[:, 0] + ring[:, 1]
    best = np.lexsort((ring[:, 1], s))[0]
    return np.roll(ring, -best, axis=0)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull counter-clockwise in math coords."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(points: np.ndarray) -> np.ndarray:
    """Minimum-area enclosing rectangle via rotating calipers on the hull.

    Returns the 4 rectangle corners (unordered orientation, convex ring).
    """
    hull = convex_hull(points)
    if len(hull) == 1:
        return np.repeat(hull, 4, axis=0)
    if len(hull) == 2:
        return np.array([hull[0], hull[1], hull[1], hull[0]])
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best = None
    for theta in angles:
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, s], [-s, c]])
        proj = hull @ rot.T
        mn, mx = proj.min(axis=0), proj.max(axis=0)
        area = (mx[0] - mn[0]) * (mx[1] - mn[1])
        if best is None or area < best[0] - 1e-12:
            corners = np.array([[mn[0], mn[1]], [mx[0], mn[1]],
                                [mx[0], mx[1]], [mn[0], mx[1]]])
            best = (area, corners @ rot)
    return best[1]


def offset_quad(quad: np.ndarray, dist: float) -> np.ndarray:
    """Offset a convex quad's edges by dist (positive = outward)."""
    quad = np.asarray(quad, dtype=np.float64)
    centroid = quad.mean(axis=0)
    lines = []
    for i in range(4):
        p, q = quad[i], quad[(i + 1) % 4]
        d = q - p
        nrm = np.array([-d[1], d[0]])
        ln = np.linalg.norm(nrm)
        if ln < 1e-12:
            raise ValueError("degenerate quad edge")
        nrm = nrm / ln
        if np.dot(nrm, centroid - p) > 0:
            nrm = -nrm  # make it point outward
        shifted = p + nrm * dist
        lines.append((shifted, d))
    out = []
    for i in range(4):
        (p1, d1) = lines[i - 1]
        (p2, d2) = lines[i]
        a = np.array([[d1[0], -d2[0]], [d1[1], -d2[1]]])
        det = np.linalg.det(a)
        if abs(det) < 1e-12:
            raise ValueError("parallel adjacent edges in quad offset")
        t = np.linalg.solve(a, p2 - p1)
        out.append(p1 + t[0] * d1)
    return np.array(out)


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` by convex polygon `clip`."""
    clip = np.asarray(clip, dtype=np.float64)
    if signed_area(clip) < 0:
        clip = clip[::-1]
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        if not output:
            break
        input_pts = output
        output = []

        def inside(p):
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12

        def intersect(p, q):
            dc = (a[0] - b[0], a[1] - b[1])
            dp = (p[0] - q[0], p[1] - q[1])
            n1 = a[0] * b[1] - a[1] * b[0]
            n2 = p[0] * q[1] - p[1] * q[0]
            denom = dc[0] * dp[1] - dc[1] * dp[0]
            return ((n1 * dp[0] - n2 * dc[0]) / denom,
                    (n1 * dp[1] - n2 * dc[1]) / denom)

        s = input_pts[-1]
        for e in input_pts:
            if inside(e):
                if not inside(s):
                    output.append(intersect(s, e))
                output.append(e)
            elif inside(s):
                output.append(intersect(s, e))
            s = e
    return np.array(output) if output else np.zeros((0, 2))


def quad_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    inter = clip_polygon(a, b)
    if len(inter) < 3:
        return 0.0
    return polygon_area(inter)


# ---------------------------------------------------------------------------
# homographies and warping


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography H with dst ~ H @ src (homogeneous), h33 = 1.

    Built from 4 correspondences via the standard 8x8 linear system.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate point correspondence") from exc
    mat = np.append(h, 1.0).reshape(3, 3)
    if abs(np.linalg.det(mat)) < 1e-12:
        raise ValueError("singular homography")
    return mat


def apply_homography(mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    homo = np.hstack([pts, np.ones((len(pts), 1))]) @ mat.T
    return homo[:, :2] / homo[:, 2:3]


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] image at (x, y) edge coords; zero outside bounds."""
    c, h, w = image.shape
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    out = np.zeros((c,) + xs.shape)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            vals = image[:, yi_c, xi_c] * (wgt * valid)
            out += vals
    return out


def warp_perspective(image: np.ndarray, dst_to_src: np.ndarray,
                     out_h: int, out_w: int) -> np.ndarray:
    """Inverse-map warp: output pixel centers pulled through dst_to_src."""
    jj, ii = np.meshgrid(np.arange(out_w), np.arange(out_h))
    centers = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    src = apply_homography(dst_to_src, centers)
    xs = src[:, 0].reshape(out_h, out_w)
    ys = src[:, 1].reshape(out_h, out_w)
    return bilinear_sample(image, xs, ys)
