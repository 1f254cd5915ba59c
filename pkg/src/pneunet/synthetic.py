"""Seeded synthetic image tasks.

Two tasks at desk scale: a three-class shape task (circle / bar / cross on
noise) that stands in for large-scale pretraining, and a two-class blob
task (bright blob in a random quadrant vs. noise only) used for end-to-end
training, imbalance, and localization checks. Blob centers keep a margin
inside their quadrant so the lit region stays attributable to it.
"""

from __future__ import annotations

import numpy as np

SHAPE_CLASSES = ("circle", "bar", "cross")


def _noise(rng: np.random.Generator, size: int, level: float = 30.0) -> np.ndarray:
    base = rng.normal(40.0, level, size=(size, size))
    return base


def _clip_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _draw_circle(img, cy, cx, radius, value):
    h, w = img.shape
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    img[mask] += value


def _draw_bar(img, cy, cx, half_len, half_wid, value, vertical):
    if vertical:
        img[max(cy - half_len, 0):cy + half_len, max(cx - half_wid, 0):cx + half_wid] += value
    else:
        img[max(cy - half_wid, 0):cy + half_wid, max(cx - half_len, 0):cx + half_len] += value


def make_shape_dataset(n: int, size: int = 64, seed: int = 0):
    """Balanced three-class shapes on noise. Returns (images u8 [n,H,W], labels)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % len(SHAPE_CLASSES)
        img = _noise(rng, size)
        cy = int(rng.integers(size // 4, 3 * size // 4))
        cx = int(rng.integers(size // 4, 3 * size // 4))
        value = float(rng.uniform(120, 180))
        if cls == 0:
            _draw_circle(img, cy, cx, int(rng.integers(size // 10, size // 6)), value)
        elif cls == 1:
            _draw_bar(img, cy, cx, size // 5, size // 16, value,
                      vertical=bool(rng.integers(2)))
        else:
            _draw_bar(img, cy, cx, size // 6, size // 20, value, vertical=True)
            _draw_bar(img, cy, cx, size // 6, size // 20, value, vertical=False)
        images[i] = _clip_u8(img)
        labels[i] = cls
    return images, labels


def blob_quadrant(cy: int, cx: int, size: int) -> int:
    """Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return (2 if cy >= size // 2 else 0) + (1 if cx >= size // 2 else 0)


def make_blob_dataset(n: int, size: int = 64, seed: int = 0,
                      positive_fraction: float = 0.5):
    """Two-class task: positives carry a bright Gaussian blob in one quadrant.

    Returns (images u8 [n,H,W], labels, quadrants) where quadrants[i] is the
    blob's quadrant for positives and -1 for negatives.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    quadrants = np.full(n, -1, dtype=np.int64)
    n_pos = int(round(n * positive_fraction))
    pos_set = set(rng.permutation(n)[:n_pos].tolist())
    half = size // 2
    margin = max(2, half // 4)  # keeps the blob attributable to its quadrant
    for i in range(n):
        img = _noise(rng, size)
        if i in pos_set:
            quad = int(rng.integers(4))
            qy, qx = (quad // 2) * half, (quad % 2) * half
            cy = int(rng.integers(qy + margin, qy + half - margin))
            cx = int(rng.integers(qx + margin, qx + half - margin))
            sigma = float(rng.uniform(3.0, 5.0))
            amp = float(rng.uniform(150, 200))
            yy, xx = np.ogrid[:size, :size]
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            labels[i] = 1
            quadrants[i] = quad
        images[i] = _clip_u8(img)
    return images, labels, quadrants
