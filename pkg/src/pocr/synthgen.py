"""Deterministic synthetic data: text lines and multi-line pages.

A built-in 5x7 bitmap font covers digits and uppercase letters.  Lines are
rendered at integer scales with guaranteed foreground/background contrast;
pages place several rotated lines on a fixed canvas with non-overlapping
quad ground truth.  Datasets are written as binary PPM images plus JSONL
label files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .detdb import QuadBox

ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"

GLYPH_H, GLYPH_W = 7, 5
PAGE_CANVAS = 256
LINE_SCALES = (2, 3, 4)  # heights 14, 21, 28
MIN_CONTRAST = 0.3

_GLYPH_ROWS = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
}


class GlyphSet:
    """Built-in binary bitmaps, one per alphabet character."""

    def __init__(self):
        self.bitmaps = {
            ch: np.array([[cell == "#" for cell in row] for row in rows],
                         dtype=np.float64)
            for ch, rows in _GLYPH_ROWS.items()
        }
        missing = set(ALPHABET) - set(self.bitmaps)
        if missing:
            raise ValueError(f"glyphs missing for {sorted(missing)}")

    def bitmap(self, ch: str, scale: int = 1) -> np.ndarray:
        if ch not in self.bitmaps:
            raise ValueError(f"character {ch!r} outside alphabet")
        return np.kron(self.bitmaps[ch], np.ones((scale, scale)))


_GLYPHS = GlyphSet()


@dataclass
class TextInstance:
    quad: QuadBox
    text: str


@dataclass
class PageSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    instances: list = field(default_factory=list)


def _pick_colors(rng: np.random.Generator, bg: float = None):
    """Foreground/background gray levels at least MIN_CONTRAST apart."""
    if bg is None:
        contrast = rng.uniform(MIN_CONTRAST, 0.9)
        bg = rng.uniform(0.0, 1.0 - contrast)
        fg = bg + contrast
        if rng.random() < 0.5:
            fg, bg = bg, fg
        return fg, bg
    side = rng.random() < 0.5
    lo_room = bg - MIN_CONTRAST >= 0.0
    hi_room = bg + MIN_CONTRAST <= 1.0
    if (side and hi_room) or not lo_room:
        fg = rng.uniform(bg + MIN_CONTRAST, 1.0)
    else:
        fg = rng.uniform(0.0, bg - MIN_CONTRAST)
    return fg, bg


def render_line(text: str, scale: int, fg: float, bg: float,
                rng: np.random.Generator = None) -> tuple:
    """Render text to a tight [3, H, W] image plus its bounding quad.

    Glyphs sit side by side with one glyph pixel (``scale`` image pixels)
    of spacing.
    """
    if not text:
        raise ValueError("text must be non-empty")
    if len(text) > 12:
        raise ValueError(f"text too long ({len(text)} > 12)")
    if abs(fg - bg) < MIN_CONTRAST:
        raise ValueError(
            f"contrast {abs(fg - bg):.3f} below the minimum {MIN_CONTRAST}")
    h = GLYPH_H * scale
    w = (len(text) * GLYPH_W + (len(text) - 1)) * scale
    canvas = np.full((h, w), bg, dtype=np.float64)
    x = 0
    for ch in text:
        bm = _GLYPHS.bitmap(ch, scale)
        canvas[:, x:x + GLYPH_W * scale] = np.where(bm > 0, fg, bg)
        x += (GLYPH_W + 1) * scale
    image = np.repeat(canvas[None], 3, axis=0)
    quad = QuadBox(np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64))
    return image, quad


def random_text(rng: np.random.Generator, alphabet: str = ALPHABET,
                min_len: int = 1, max_len: int = 8) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n))


def _rotate_patch(image: np.ndarray, quad: QuadBox, degrees: float):
    """Rotate a line patch (plus an alpha mask) inside its padded bbox."""
    _, h, w = image.shape
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    corners = quad.points
    center = corners.mean(axis=0)
    rot = np.array([[c, -s], [s, c]])
    rotated = (corners - center) @ rot.T
    lo = rotated.min(axis=0)
    hi = rotated.max(axis=0)
    out_w = int(np.ceil(hi[0] - lo[0]))
    out_h = int(np.ceil(hi[1] - lo[1]))
    # homography mapping source patch coords -> rotated patch coords
    dst_pts = rotated - lo
    mat = geo.homography_from_points(corners, dst_pts)
    inv = np.linalg.inv(mat)
    patch = geo.warp_perspective(image, inv, out_h, out_w)
    mask = geo.warp_perspective(np.ones((1, h, w)), inv, out_h, out_w)
    return patch, np.clip(mask, 0.0, 1.0), QuadBox(dst_pts)


def render_page(n_lines: int, rng: np.random.Generator,
                canvas: int = PAGE_CANVAS, alphabet: str = ALPHABET,
                max_rotation: float = 5.0) -> PageSample:
    """Place rotated text lines on a page without overlap.

    Lines that cannot be placed after 100 attempts are dropped, so pages
    may carry fewer instances than requested.
    """
    bg = rng.uniform(0.0, 1.0)
    page = np.full((3, canvas, canvas), bg, dtype=np.float64)
    occupied = []  # (top, left, bottom, right) with margin
    instances = []
    for _ in range(n_lines):
        text = random_text(rng, alphabet)
        scale = int(rng.choice(LINE_SCALES))
        fg, _ = _pick_colors(rng, bg=bg)
        line, quad = render_line(text, scale, fg, bg)
        degrees = rng.uniform(-max_rotation, max_rotation)
        patch, mask, pquad = _rotate_patch(line, quad, degrees)
        _, ph, pw = patch.shape
        if ph >= canvas or pw >= canvas:
            continue
        placed = False
        for _attempt in range(100):
            top = int(rng.integers(0, canvas - ph))
            left = int(rng.integers(0, canvas - pw))
            box = (top - 2, left - 2, top + ph + 2, left + pw + 2)
            clash = any(not (box[2] <= o[0] or o[2] <= box[0]
                             or box[3] <= o[1] or o[3] <= box[1])
                        for o in occupied)
            if not clash:
                placed = True
                break
        if not placed:
            continue
        region = page[:, top:top + ph, left:left + pw]
        page[:, top:top + ph, left:left + pw] = (region * (1 - mask)
                                                 + patch * mask)
        occupied.append(box)
        pts = pquad.points + np.array([left, top], dtype=np.float64)
        instances.append(TextInstance(QuadBox(pts), text))
    return PageSample(page, instances)


def make_cls_sample(rng: np.random.Generator,
                    alphabet: str = ALPHABET) -> tuple:
    """(line image, label) where label 180 means upside-down."""
    text = random_text(rng, alphabet, min_len=2)
    scale = int(rng.choice(LINE_SCALES))
    fg, bg = _pick_colors(rng)
    image, _ = render_line(text, scale, fg, bg)
    label = 180 if rng.random() < 0.5 else 0
    if label == 180:
        image = image[:, ::-1, ::-1].copy()
    return image, label


def make_rec_sample(rng: np.random.Generator, alphabet: str = ALPHABET,
                    min_len: int = 1, max_len: int = 8,
                    plain: bool = False) -> tuple:
    """(clean line image, transcript); augmentation happens at train time.

    plain renders black-on-white at a single scale, for experiments where
    all variation should come from train-time augmentation rather than the
    renderer.
    """
    text = random_text(rng, alphabet, min_len, max_len)
    if plain:
        scale, fg, bg = max(LINE_SCALES), 0.0, 1.0
    else:
        scale = int(rng.choice(LINE_SCALES))
        fg, bg = _pick_colors(rng)
    image, _ = render_line(text, scale, fg, bg)
    return image, text


# ---------------------------------------------------------------------------
# dataset IO: binary PPM images + JSONL labels
# ---------------------------------------------------------------------------


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as binary PPM (P6)."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a [3, H, W] float image in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace after the header
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_det_dataset(out_dir: str, n_pages: int, lines_per_page: int,
                      seed: int, alphabet: str = ALPHABET) -> str:
    os.makedirs(out_dir, exist_ok=True)
    label_path = os.path.join(out_dir, "labels.jsonl")
    with open(label_path, "w") as fh:
        for i in range(n_pages):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            page = render_page(lines_per_page, rng, alphabet=alphabet)
            name = f"page_{i:05d}.ppm"
            write_ppm(os.path.join(out_dir, name), page.image)
            fh.write(json.dumps({
                "image": name,
                "instances": [{"quad": [float(v) for v in
                                        inst.quad.points.ravel()],
                               "text": inst.text}
                              for inst in page.instances],
            }, sort_keys=True) + "\n")
    return label_path


def write_rec_dataset(out_dir: str, n_lines: int, seed: int,
                      alphabet: str = ALPHABET, min_len: int = 1,
                      max_len: int = 8, plain: bool = False) -> str:
    os.makedirs(out_dir, exist_ok=True)
    label_path = os.path.join(out_dir, "labels.jsonl")
    with open(label_path, "w") as fh:
        for i in range(n_lines):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            image, text = make_rec_sample(rng, alphabet, min_len, max_len,
                                          plain=plain)
            name = f"line_{i:05d}.ppm"
            write_ppm(os.path.join(out_dir, name), image)
            fh.write(json.dumps({"image": name, "text": text},
                                sort_keys=True) + "\n")
    return label_path


def write_cls_dataset(out_dir: str, n_lines: int, seed: int,
                      alphabet: str = ALPHABET) -> str:
    os.makedirs(out_dir, exist_ok=True)
    label_path = os.path.join(out_dir, "labels.jsonl")
    with open(label_path, "w") as fh:
        for i in range(n_lines):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            image, label = make_cls_sample(rng, alphabet)
            name = f"line_{i:05d}.ppm"
            write_ppm(os.path.join(out_dir, name), image)
            fh.write(json.dumps({"image": name, "label": label},
                                sort_keys=True) + "\n")
    return label_path


def read_jsonl(path: str) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _labels_path(data_dir: str) -> str:
    path = os.path.join(data_dir, "labels.jsonl")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no labels.jsonl in {data_dir}")
    return path


def read_det_dataset(data_dir: str) -> list:
    """Load a detection dataset directory back into PageSample objects."""
    pages = []
    for row in read_jsonl(_labels_path(data_dir)):
        image = read_ppm(os.path.join(data_dir, row["image"]))
        insts = [TextInstance(QuadBox(np.asarray(inst["quad"]).reshape(4, 2)),
                              inst["text"]) for inst in row["instances"]]
        pages.append(PageSample(image, insts))
    return pages


def read_rec_dataset(data_dir: str) -> list:
    """Load a recognition dataset directory as (image, text) pairs."""
    return [(read_ppm(os.path.join(data_dir, row["image"])), row["text"])
            for row in read_jsonl(_labels_path(data_dir))]


def read_cls_dataset(data_dir: str) -> list:
    """Load a direction dataset directory as (image, label) pairs."""
    return [(read_ppm(os.path.join(data_dir, row["image"])), row["label"])
            for row in read_jsonl(_labels_path(data_dir))]
