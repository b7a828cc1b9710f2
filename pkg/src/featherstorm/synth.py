"""Procedural 10-class image set used when no real dataset is at hand.

Each class is a shape or texture motif (disk, square, triangle, ...) drawn
at a random position, scale and colour over a noisy gradient background.
Images are a pure function of ``(seed, index)``.
"""

from __future__ import annotations

import numpy as np

from featherstorm.data import DatasetHandle, ImageTensor, RandomStream

CLASS_NAMES = (
    "disk", "square", "triangle", "ring", "plus",
    "hstripes", "vstripes", "checker", "xcross", "frame",
)


def _mask(kind: str, yy, xx, r: float, period: int, rng: RandomStream) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    box = (ay <= r) & (ax <= r)
    arm = max(1.5, r / 3.0)
    if kind == "disk":
        return yy**2 + xx**2 <= r**2
    if kind == "square":
        return box
    if kind == "triangle":
        return (yy <= r) & (yy >= -r) & (ax <= (yy + r) / 2.0)
    if kind == "ring":
        d = np.sqrt(yy**2 + xx**2)
        return (d <= r) & (d >= r - arm)
    if kind == "plus":
        return box & ((ay <= arm / 1.5) | (ax <= arm / 1.5))
    if kind == "hstripes":
        return box & (np.floor((yy + r) / period) % 2 == 0)
    if kind == "vstripes":
        return box & (np.floor((xx + r) / period) % 2 == 0)
    if kind == "checker":
        return box & ((np.floor((yy + r) / period) + np.floor((xx + r) / period)) % 2 == 0)
    if kind == "xcross":
        return box & ((np.abs(yy - xx) <= arm / 1.5) | (np.abs(yy + xx) <= arm / 1.5))
    if kind == "frame":
        return box & ((ay >= r - arm) | (ax >= r - arm))
    raise ValueError(kind)


def render(label: int, rng: RandomStream, size: int = 32, channels: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.15, 0.85, channels)
    tilt = rng.normal(0.0, 0.15, (2, channels))
    bg = base + (yy[..., None] / size - 0.5) * tilt[0] + (xx[..., None] / size - 0.5) * tilt[1]

    fg = rng.uniform(0.0, 1.0, channels)
    if abs(fg.mean() - base.mean()) < 0.3:
        fg = np.clip(base + np.sign(0.5 - base.mean()) * 0.45, 0.0, 1.0)
    r = rng.uniform(0.22, 0.34) * size
    cy, cx = rng.uniform(r, size - 1 - r, 2)
    period = int(rng.integers(2, 4))
    m = _mask(CLASS_NAMES[label], yy - cy, xx - cx, r, period, rng)

    img = np.where(m[..., None], fg, bg)
    img = img + rng.normal(0.0, 0.06, img.shape)
    # quantised so PNG dumps reload bit-exactly
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_dataset(n_per_class: int, seed: int, size: int = 32, channels: int = 3,
                 num_classes: int = 10, offset: int = 0) -> DatasetHandle:
    """Class-interleaved dataset; ``offset`` shifts the stream keys so splits never share images."""
    images = []
    for k in range(n_per_class * num_classes):
        label = k % num_classes
        rng = RandomStream(seed, offset + k)
        images.append(ImageTensor(render(label, rng, size, channels), label, k))
    return DatasetHandle(images, num_classes)


def make_splits(n_train_per_class: int, n_test_per_class: int, seed: int, **kw):
    train = make_dataset(n_train_per_class, seed, **kw)
    test = make_dataset(n_test_per_class, seed, offset=10**6, **kw)
    return train, test
