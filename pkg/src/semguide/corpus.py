"""Procedurally rendered, captioned shape images.

Each image holds one anti-aliased shape (square, circle or triangle) with a
colour and size on a dark or light background. Captions come from a fixed
template, so the attribute record is recoverable from the caption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
BACKGROUNDS = ("dark", "light")

COLOR_RGB = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.15),
}
BACKGROUND_LEVEL = {"dark": 0.12, "light": 0.85}
SIZE_RADIUS = {"small": 5.0, "large": 9.0}  # at 32 px; scales with image size


@dataclass(frozen=True)
class Attributes:
    shape: str
    color: str
    size: str
    background: str

    def caption(self) -> str:
        return f"a {self.size} {self.color} {self.shape} on a {self.background} background"

    def as_text(self) -> str:
        return f"shape={self.shape} color={self.color} size={self.size} background={self.background}"

    @classmethod
    def from_text(cls, text: str) -> "Attributes":
        kv = dict(item.split("=", 1) for item in text.split())
        return cls(kv["shape"], kv["color"], kv["size"], kv["background"])


def parse_caption(caption: str) -> Attributes:
    words = caption.split()
    if len(words) != 8 or words[0] != "a" or words[4:6] != ["on", "a"] or words[7] != "background":
        raise ValueError(f"caption does not follow the corpus template: {caption!r}")
    size, color, shape, background = words[1], words[2], words[3], words[6]
    for value, allowed in ((size, SIZES), (color, COLORS), (shape, SHAPES), (background, BACKGROUNDS)):
        if value not in allowed:
            raise ValueError(f"unknown attribute {value!r} in caption {caption!r}")
    return Attributes(shape, color, size, background)


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 32
    count: int = 4000
    seed: int = 0
    position_jitter: float = 1.0   # fraction of the free placement range used
    rotation_jitter: float = 180.0  # degrees, uniform in [-r, r]
    supersample: int = 4


@dataclass
class CaptionedCorpus:
    images: np.ndarray                 # [M, 3, S, S] in [-1, 1]
    attributes: list[Attributes]
    centers: np.ndarray = field(default=None)  # [M, 2] (x, y) pixel centres of the shapes

    def __len__(self):
        return len(self.attributes)

    @property
    def captions(self) -> list[str]:
        return [a.caption() for a in self.attributes]

    def subset(self, idx: Sequence[int]) -> "CaptionedCorpus":
        idx = np.asarray(idx, dtype=int)
        centers = None if self.centers is None else self.centers[idx]
        return CaptionedCorpus(self.images[idx], [self.attributes[i] for i in idx], centers)


def _coverage(shape: str, cx: float, cy: float, r: float, theta: float, size: int, ss: int) -> np.ndarray:
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    else:
        c, s = math.cos(theta), math.sin(theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        if shape == "square":
            half = 0.8 * r
            inside = (np.abs(u) <= half) & (np.abs(v) <= half)
        elif shape == "triangle":
            # equilateral triangle with circumradius r: inside all three edge half-planes
            inside = np.ones_like(u, dtype=bool)
            for k in range(3):
                a = -math.pi / 2 + k * 2 * math.pi / 3
                inside &= (u * math.cos(a) + v * math.sin(a)) <= r / 2
        else:
            raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render(attrs: Attributes, cx: float, cy: float, theta: float, size: int = 32, ss: int = 4) -> np.ndarray:
    r = SIZE_RADIUS[attrs.size] * size / 32.0
    cov = _coverage(attrs.shape, cx, cy, r, theta, size, ss)
    bg = BACKGROUND_LEVEL[attrs.background]
    rgb = np.asarray(COLOR_RGB[attrs.color])
    img = bg * (1.0 - cov)[None] + rgb[:, None, None] * cov[None]
    return img * 2.0 - 1.0


def _draw_one(spec: CorpusSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    attrs = Attributes(SHAPES[rng.integers(3)], COLORS[rng.integers(4)],
                       SIZES[rng.integers(2)], BACKGROUNDS[rng.integers(2)])
    r = SIZE_RADIUS[attrs.size] * spec.size / 32.0
    lo, hi = r + 1.0, spec.size - r - 1.0
    mid = spec.size / 2.0
    jit = spec.position_jitter
    cx = mid + jit * (rng.uniform(lo, hi) - mid)
    cy = mid + jit * (rng.uniform(lo, hi) - mid)
    theta = math.radians(rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
    return attrs, cx, cy, theta


def generate_corpus(spec: CorpusSpec = CorpusSpec()) -> CaptionedCorpus:
    """Render ``spec.count`` images; item ``i`` depends only on ``(seed, i)``."""
    if spec.count < 1:
        raise ValueError(f"corpus count must be >= 1, got {spec.count}")
    images = np.empty((spec.count, 3, spec.size, spec.size))
    attributes, centers = [], np.empty((spec.count, 2))
    for i in range(spec.count):
        attrs, cx, cy, theta = _draw_one(spec, i)
        images[i] = render(attrs, cx, cy, theta, spec.size, spec.supersample)
        attributes.append(attrs)
        centers[i] = (cx, cy)
    return CaptionedCorpus(images, attributes, centers)


def holdout_split(corpus: CaptionedCorpus, fraction: float, seed: int = 0):
    """Split into ``(train, test)`` with ``round(fraction * len)`` test items."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(corpus)
    n_test = int(round(fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError(f"holdout fraction {fraction} gives a degenerate split of {n} items")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return corpus.subset(train_idx), corpus.subset(test_idx)


def _foreground_weights(img: np.ndarray, threshold: float) -> np.ndarray:
    # background level is the median of the border pixels
    border = np.concatenate([img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]], axis=1)
    bg = np.median(border, axis=1)
    dist = np.sqrt(((img - bg[:, None, None]) ** 2).sum(axis=0))
    return np.clip(dist - threshold, 0.0, None)


def foreground_centroid(image: np.ndarray, threshold: float = 0.25) -> tuple[float, float]:
    """Centroid (x, y) of pixels that differ from the estimated background.

    The background level is the median of the border pixels. Returns the
    image centre when no pixel passes the threshold.
    """
    img = np.asarray(image)
    w = _foreground_weights(img, threshold)
    H, W = w.shape
    if w.sum() <= 0:
        return (W - 1) / 2.0, (H - 1) / 2.0
    ys, xs = np.mgrid[0:H, 0:W]
    return float((w * xs).sum() / w.sum()) + 0.5, float((w * ys).sum() / w.sum()) + 0.5


def dominant_color(image: np.ndarray, threshold: float = 0.25):
    """Corpus colour nearest to the mean foreground pixel, or None if the
    image has no foreground."""
    img = np.asarray(image)
    w = _foreground_weights(img, threshold)
    if w.sum() <= 0:
        return None
    rgb = ((img * w).sum(axis=(1, 2)) / w.sum() + 1.0) / 2.0
    return min(COLORS, key=lambda c: float(((rgb - np.array(COLOR_RGB[c])) ** 2).sum()))


def save_corpus(corpus: CaptionedCorpus, directory) -> None:
    from .io import write_ppm

    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, attrs) in enumerate(zip(corpus.images, corpus.attributes)):
        write_ppm(d / "images" / f"{i:06d}.ppm", img)
        lines.append(f"{i}\t{attrs.as_text()}\t{attrs.caption()}")
    (d / "metadata.txt").write_text("\n".join(lines) + "\n")


def load_corpus(directory) -> CaptionedCorpus:
    from .io import read_ppm

    d = Path(directory)
    meta = d / "metadata.txt"
    if not meta.exists():
        raise FileNotFoundError(f"no corpus metadata at {meta}")
    images, attributes = [], []
    for line in meta.read_text().splitlines():
        if not line.strip():
            continue
        idx, attr_text, caption = line.split("\t")
        attrs = Attributes.from_text(attr_text)
        if attrs.caption() != caption:
            raise ValueError(f"metadata line {idx}: caption does not match attributes")
        images.append(read_ppm(d / "images" / f"{int(idx):06d}.ppm"))
        attributes.append(attrs)
    if not images:
        raise ValueError(f"corpus at {d} is empty")
    return CaptionedCorpus(np.stack(images), attributes)
