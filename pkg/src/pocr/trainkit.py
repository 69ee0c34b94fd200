"""Optimization and data augmentation.

Adam with decoupled-by-addition L2 regularization, a linear-warmup /
cosine-decay schedule, and the augmentation recipes used by the three
pipeline stages: base distortions (rotation, perspective, motion blur,
noise) for everything, RandAugment and random erasing for the direction
classifier, and a fiducial-grid warp for the recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .numcore import Tensor

_RECIPES = ("detector", "classifier", "recognizer")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    warmup_steps: int = 0
    total_steps: int = 1000
    batch_size: int = 8
    l2_decay: float = 1e-5
    seed: int = 0
    aug_recipe: str = "detector"

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}")
        if self.aug_recipe not in _RECIPES:
            raise ValueError(f"unknown aug recipe {self.aug_recipe!r}")


def default_warmup(total_steps: int) -> int:
    """Default warmup length: 5% of the run, always shorter than the run."""
    return min(max(1, int(round(0.05 * total_steps))),
               max(0, total_steps - 1))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp to lr0 over the warmup, then cosine decay to zero."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step < config.warmup_steps:
        return config.lr0 * (step + 1) / config.warmup_steps
    span = config.total_steps - config.warmup_steps - 1
    if span <= 0:
        return 0.0
    frac = (step - config.warmup_steps) / span
    return config.lr0 * 0.5 * (1.0 + np.cos(np.pi * frac))


class Adam:
    """Bias-corrected Adam; L2 decay is added to the gradient pre-moment."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, l2_decay: float = 0.0):
        self.params = list(params)
        self.l2_decay = l2_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != param shape {p.data.shape}")
            if self.l2_decay:
                g = g + self.l2_decay * p.data
            self.m[i] = self.BETA1 * self.m[i] + (1 - self.BETA1) * g
            self.v[i] = self.BETA2 * self.v[i] + (1 - self.BETA2) * g * g
            m_hat = self.m[i] / (1 - self.BETA1 ** self.t)
            v_hat = self.v[i] / (1 - self.BETA2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.EPS)


def adam_step(params, grads, state: dict, lr: float, l2_decay: float = 0.0):
    """Functional single Adam update over parallel arrays.

    ``state`` holds "m", "v" (lists) and "t"; pass {} for the first call.
    Returns the updated parameter arrays.
    """
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
        if l2_decay:
            g = g + l2_decay * p
        state["m"][i] = Adam.BETA1 * state["m"][i] + (1 - Adam.BETA1) * g
        state["v"][i] = Adam.BETA2 * state["v"][i] + (1 - Adam.BETA2) * g * g
        m_hat = state["m"][i] / (1 - Adam.BETA1 ** t)
        v_hat = state["v"][i] / (1 - Adam.BETA2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + Adam.EPS))
    return out


# ---------------------------------------------------------------------------
# augmentations (all operate on [C, H, W] float images in [0, 1])
# ---------------------------------------------------------------------------


def _warp_same_shape(image: np.ndarray, src_to_dst: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    return geo.warp_perspective(image, np.linalg.inv(src_to_dst), h, w)


def _rotation_homography(h: int, w: int, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    cx, cy = w / 2.0, h / 2.0
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return back @ rot @ to_center


def bda(image: np.ndarray, rng: np.random.Generator,
        geometric: bool = True) -> np.ndarray:
    """Base distortions, each applied with independent probability 0.4.

    geometric=False keeps only the photometric parts (blur, noise) — used
    where the supervision is spatial (detector maps) and would need to be
    warped alongside the image.
    """
    out = image
    _, h, w = image.shape
    if geometric and rng.random() < 0.4:  # rotation
        deg = rng.uniform(-10.0, 10.0)
        out = _warp_same_shape(out, _rotation_homography(h, w, deg))
    if geometric and rng.random() < 0.4:  # perspective jitter, <=5% per side
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        jitter = np.stack([rng.uniform(-0.05 * w, 0.05 * w, 4),
                           rng.uniform(-0.05 * h, 0.05 * h, 4)], axis=1)
        mat = geo.homography_from_points(corners, corners + jitter)
        out = _warp_same_shape(out, mat)
    if rng.random() < 0.4:  # linear motion blur
        length = int(rng.choice([3, 5]))
        axis = int(rng.integers(0, 2))  # 0: vertical streak, 1: horizontal
        kernel = np.full(length, 1.0 / length)
        out = ndimage.convolve1d(out, kernel, axis=1 + axis, mode="nearest")
    if rng.random() < 0.4:  # additive Gaussian noise
        sigma = rng.uniform(0.0, 0.05)
        out = out + rng.standard_normal(out.shape) * sigma
    return np.clip(out, 0.0, 1.0)


def _affine(image, mat):
    return _warp_same_shape(image, mat)


def _ra_rotate(image, mag, rng):
    _, h, w = image.shape
    deg = 30.0 * mag * (1 if rng.random() < 0.5 else -1)
    return _affine(image, _rotation_homography(h, w, deg))


def _ra_shear_x(image, mag, rng):
    s = 0.3 * mag * (1 if rng.random() < 0.5 else -1)
    return _affine(image, np.array([[1, s, 0], [0, 1, 0], [0, 0, 1.0]]))


def _ra_shear_y(image, mag, rng):
    s = 0.3 * mag * (1 if rng.random() < 0.5 else -1)
    return _affine(image, np.array([[1, 0, 0], [s, 1, 0], [0, 0, 1.0]]))


def _ra_translate_x(image, mag, rng):
    _, _, w = image.shape
    t = 0.3 * mag * w * (1 if rng.random() < 0.5 else -1)
    return _affine(image, np.array([[1, 0, t], [0, 1, 0], [0, 0, 1.0]]))


def _ra_translate_y(image, mag, rng):
    _, h, _ = image.shape
    t = 0.3 * mag * h * (1 if rng.random() < 0.5 else -1)
    return _affine(image, np.array([[1, 0, 0], [0, 1, t], [0, 0, 1.0]]))


def _ra_contrast(image, mag, rng):
    f = 1.0 + 0.9 * mag * (1 if rng.random() < 0.5 else -1)
    mean = image.mean()
    return (image - mean) * f + mean


def _ra_brightness(image, mag, rng):
    f = 1.0 + 0.9 * mag * (1 if rng.random() < 0.5 else -1)
    return image * f


def _ra_sharpness(image, mag, rng):
    blurred = ndimage.uniform_filter(image, size=(1, 3, 3), mode="nearest")
    s = mag * (1 if rng.random() < 0.5 else -1)
    return image + s * (image - blurred)


_RA_OPS = [_ra_rotate, _ra_shear_x, _ra_shear_y, _ra_translate_x,
           _ra_translate_y, _ra_contrast, _ra_brightness, _ra_sharpness]


def rand_augment(image: np.ndarray, rng: np.random.Generator,
                 n: int = 2, m: int = 5) -> np.ndarray:
    """Apply n uniformly chosen ops at magnitude m/10 of each op's range."""
    mag = m / 10.0
    out = image
    for _ in range(n):
        op = _RA_OPS[int(rng.integers(0, len(_RA_OPS)))]
        out = op(out, mag, rng)
    return np.clip(out, 0.0, 1.0)


def random_erasing(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero one rectangle covering 2-20% of the area, with probability 0.5."""
    if rng.random() >= 0.5:
        return image
    _, h, w = image.shape
    area = rng.uniform(0.02, 0.2) * h * w
    aspect = rng.uniform(0.3, 3.0)
    eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = image.copy()
    out[:, top:top + eh, left:left + ew] = 0.0
    return out


@dataclass
class FiducialGrid:
    """Control points on the top and bottom borders plus their displacements."""

    points: np.ndarray        # [2 * n_cols, 2] source (x, y)
    displacements: np.ndarray  # [2 * n_cols, 2] bounded by amplitude

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.points.shape != self.displacements.shape:
            raise ValueError("points and displacements must align")


def make_fiducial_grid(h: int, w: int, grid_n: int, amplitude: float,
                       rng: np.random.Generator) -> FiducialGrid:
    if grid_n < 3:
        raise ValueError(f"grid_n must be >= 3, got {grid_n}")
    xs = np.linspace(0.0, float(w), grid_n)
    top = np.stack([xs, np.zeros(grid_n)], axis=1)
    bottom = np.stack([xs, np.full(grid_n, float(h))], axis=1)
    points = np.vstack([top, bottom])
    disp = rng.uniform(-amplitude, amplitude, points.shape)
    return FiducialGrid(points, disp)


def _affine_from_triangle(dst_tri: np.ndarray, src_tri: np.ndarray) -> np.ndarray:
    a = np.hstack([dst_tri, np.ones((3, 1))])
    try:
        coef = np.linalg.solve(a, src_tri)  # [3, 2]
    except np.linalg.LinAlgError:
        return None
    return coef


def tia(image: np.ndarray, grid_n: int, amplitude: float,
        rng: np.random.Generator) -> np.ndarray:
    """Fiducial-grid warp: displace border control points, interpolate
    piecewise-affinely over the triangulated mesh between them."""
    _, h, w = image.shape
    grid = make_fiducial_grid(h, w, grid_n, amplitude, rng)
    src = grid.points
    dst = src + grid.displacements
    out = np.zeros_like(image)
    filled = np.zeros((h, w), dtype=bool)
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    # two triangles per cell between adjacent control columns
    for col in range(grid_n - 1):
        t0, t1 = col, col + 1
        b0, b1 = grid_n + col, grid_n + col + 1
        for tri in ((t0, t1, b0), (t1, b1, b0)):
            idx = list(tri)
            coef = _affine_from_triangle(dst[idx], src[idx])
            if coef is None:
                continue
            # barycentric inside test against the destination triangle
            p0, p1, p2 = dst[idx]
            det = ((p1[1] - p2[1]) * (p0[0] - p2[0])
                   + (p2[0] - p1[0]) * (p0[1] - p2[1]))
            if abs(det) < 1e-12:
                continue
            l0 = ((p1[1] - p2[1]) * (jj - p2[0])
                  + (p2[0] - p1[0]) * (ii - p2[1])) / det
            l1 = ((p2[1] - p0[1]) * (jj - p2[0])
                  + (p0[0] - p2[0]) * (ii - p2[1])) / det
            l2 = 1.0 - l0 - l1
            eps = 1e-9
            inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps) & ~filled
            if not inside.any():
                continue
            sx = coef[0, 0] * jj[inside] + coef[1, 0] * ii[inside] + coef[2, 0]
            sy = coef[0, 1] * jj[inside] + coef[1, 1] * ii[inside] + coef[2, 1]
            out[:, inside] = geo.bilinear_sample(image, sx, sy)
            filled |= inside
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, recipe: str, rng: np.random.Generator,
            use_erasing: bool = False) -> np.ndarray:
    """The per-stage augmentation recipe applied to one training image."""
    if recipe not in _RECIPES:
        raise ValueError(f"unknown aug recipe {recipe!r}")
    out = bda(image, rng)
    if recipe == "classifier":
        out = rand_augment(out, rng)
        if use_erasing:
            out = random_erasing(out, rng)
    elif recipe == "recognizer":
        _, h, _ = image.shape
        out = tia(out, grid_n=4, amplitude=0.08 * h, rng=rng)
    return out
