"""Procedural 10-class image dataset and a minimal in-memory loader."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ArrayDataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


SHAPES = ("disk", "square", "triangle", "cross", "ring")


def _shape_mask(kind: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rad = np.sqrt(u**2 + v**2)
    masks = np.stack(
        [
            rad <= 1.0,
            np.maximum(np.abs(u), np.abs(v)) <= 0.8,
            (v >= -0.7) & (np.abs(u) <= 0.55 * (1.0 - v)),
            ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)),
            (rad >= 0.55) & (rad <= 1.0),
        ]
    )
    return np.take_along_axis(masks, kind[None, :, None, None], axis=0)[0]


def render(labels: np.ndarray, rng: np.random.Generator, size: int = 32, noise: float = 0.1) -> np.ndarray:
    """Draw one image per label.

    Class = shape (label % 5) x texture (label // 5: stripes or checker).
    Position, scale, rotation, colours and texture frequency are random;
    a flat-filled distractor shape and pixel noise are added on top.
    """
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = yy[None], xx[None]

    def frame(scale_lo, scale_hi):
        cx = rng.uniform(0.3 * size, 0.7 * size, n)[:, None, None]
        cy = rng.uniform(0.3 * size, 0.7 * size, n)[:, None, None]
        r = rng.uniform(scale_lo * size, scale_hi * size, n)[:, None, None]
        th = rng.uniform(0, np.pi, n)[:, None, None]
        dx, dy = (xx - cx) / r, (yy - cy) / r
        return np.cos(th) * dx + np.sin(th) * dy, -np.sin(th) * dx + np.cos(th) * dy

    shape = labels % 5
    texture = labels // 5
    u, v = frame(0.24, 0.36)
    obj = _shape_mask(shape, u, v)
    freq = rng.uniform(1.5, 2.5, n)[:, None, None] * np.pi
    stripes = np.sin(freq * u)
    checker = np.sin(freq * u) * np.sin(freq * v) * 2.0
    tex = np.where(texture[:, None, None] == 0, stripes, checker)
    tex = 0.5 + 0.5 * np.clip(tex, -1, 1)

    du, dv = frame(0.12, 0.2)
    distract = _shape_mask(rng.integers(0, 5, n), du, dv) & ~obj

    bg = rng.uniform(0, 1, (n, 3, 1, 1))
    fg = rng.uniform(0, 1, (n, 3, 1, 1))
    dc = rng.uniform(0, 1, (n, 3, 1, 1))
    img = bg * np.ones((1, 1, size, size))
    img = np.where(distract[:, None], dc, img)
    img = np.where(obj[:, None], fg * (0.35 + 0.65 * tex[:, None]), img)
    img = img + noise * rng.standard_normal(img.shape)
    return (img - 0.5).astype(np.float32)


@functools.lru_cache(maxsize=8)
def synthetic_dataset(
    n_train: int = 5000,
    n_test: int = 1000,
    size: int = 32,
    num_classes: int = 10,
    noise: float = 0.1,
    seed: int = 1234,
) -> tuple[ArrayDataset, ArrayDataset]:
    """Deterministic (train, test) split of the procedural image set."""
    if num_classes != 10:
        raise ValueError("the synthetic generator defines exactly 10 classes")
    rng = np.random.default_rng(seed)
    out = []
    for n in (n_train, n_test):
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        out.append(ArrayDataset(render(labels, rng, size, noise), labels.astype(np.int64)))
    return tuple(out)
