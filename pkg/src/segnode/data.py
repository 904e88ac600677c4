"""Synthetic shape-segmentation data.

Each image is a noisy background (class 0) with a few opaque rectangles,
disks and triangles painted on top.  Every foreground class has its own
colour, later shapes occlude earlier ones, and a sample depends only on
``(seed, index)``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetConfig:
    image_size: tuple = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple = (1, 3)
    sample_count: int = 16
    seed: int = 0
    noise: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        object.__setattr__(self, "shapes_per_image", tuple(int(s) for s in self.shapes_per_image))
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (background + one shape class)")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid shapes_per_image range {self.shapes_per_image}")


@dataclass
class SynthSample:
    image: np.ndarray  # (3, H, W) float32
    labels: np.ndarray  # (H, W) int64


def class_colour(c: int, num_classes: int) -> np.ndarray:
    if c == 0:
        return np.array([0.25, 0.25, 0.25])
    hue = (c - 1) / (num_classes - 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 0.95))


def _paint_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    short = min(h, w)
    if kind == "rectangle":
        rh = rng.integers(short // 4, short // 2 + 1)
        rw = rng.integers(short // 4, short // 2 + 1)
        y0 = rng.integers(0, h - rh + 1)
        x0 = rng.integers(0, w - rw + 1)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if kind == "disk":
        r = rng.uniform(short / 8, short / 4)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    # triangle: three vertices around a random centre
    size = rng.uniform(short / 4, short / 2)
    cy = rng.uniform(size / 2, h - size / 2)
    cx = rng.uniform(size / 2, w - size / 2)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    angles = angles + rng.uniform(-0.3, 0.3, size=3)
    vy = cy + size / 2 * np.sin(angles)
    vx = cx + size / 2 * np.cos(angles)
    py, px = yy + 0.5, xx + 0.5
    signs = []
    for a in range(3):
        b = (a + 1) % 3
        signs.append((vx[b] - vx[a]) * (py - vy[a]) - (vy[b] - vy[a]) * (px - vx[a]))
    return (((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0))
            | ((signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)))


SHAPE_KINDS = ("rectangle", "disk", "triangle")


def generate_sample(cfg: DatasetConfig, index: int) -> SynthSample:
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    labels = np.zeros((h, w), dtype=np.int64)
    lo, hi = cfg.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        cls = int(rng.integers(1, cfg.num_classes))
        labels[_paint_mask(kind, rng, h, w)] = cls
    palette = np.stack([class_colour(c, cfg.num_classes) for c in range(cfg.num_classes)])
    image = palette[labels].transpose(2, 0, 1)
    image = image + cfg.noise * rng.standard_normal((3, h, w))
    return SynthSample(image=(image - 0.5).astype(np.float32), labels=labels)


def generate_dataset(cfg: DatasetConfig) -> list[SynthSample]:
    return [generate_sample(cfg, i) for i in range(cfg.sample_count)]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.labels for s in samples]))
