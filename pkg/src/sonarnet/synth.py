"""Synthetic sonar-like object crops.

Each crop is a speckled seabed background; every class except ``background``
adds one bright highlight of a class-specific shape under random pose jitter,
optionally trailed by an acoustic shadow (a darker strip down-range, i.e.
toward larger row index). Shapes are defined on the normalized square
[-1, 1]^2 so any output size renders the same scene.
"""
from __future__ import annotations

import numpy as np

from .data import LabeledImageSet
from .rng import Rng


def _disc(x, y, cx, cy, r):
    return (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def _box(x, y, hx, hy, cx=0.0, cy=0.0):
    return (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy)


SHAPES = {
    "background": None,
    "ellipse": lambda x, y: (x / 0.5) ** 2 + (y / 0.28) ** 2 <= 1,
    "rectangle": lambda x, y: _box(x, y, 0.45, 0.25),
    "ring": lambda x, y: (x * x + y * y <= 0.5 ** 2) & (x * x + y * y >= 0.27 ** 2),
    "wedge": lambda x, y: (y >= -0.4) & (y <= 0.4) & (np.abs(x) <= 0.6 * (0.4 - y) / 0.8 + 1e-9),
    "bar": lambda x, y: _box(x, y, 0.62, 0.09),
    "blob": lambda x, y: _disc(x, y, -0.18, 0.0, 0.27) | _disc(x, y, 0.22, 0.12, 0.2),
    "cross": lambda x, y: _box(x, y, 0.5, 0.1) | _box(x, y, 0.1, 0.5),
    "dots": lambda x, y: _disc(x, y, -0.32, 0.0, 0.15) | _disc(x, y, 0.32, 0.0, 0.15),
    "ell": lambda x, y: _box(x, y, 0.1, 0.42, cx=-0.3) | _box(x, y, 0.4, 0.1, cy=0.32),
    "frame": lambda x, y: (np.maximum(np.abs(x), np.abs(y)) <= 0.45)
    & (np.maximum(np.abs(x), np.abs(y)) >= 0.28),
    "pellet": lambda x, y: _disc(x, y, 0.0, 0.0, 0.18),
    "chevron": lambda x, y: (np.abs(y - 0.5 * np.abs(x)) <= 0.1) & (np.abs(x) <= 0.5),
}
SHAPE_FAMILY = tuple(SHAPES)
# index-prefixed so sorted names (the on-disk class order) keep class order
CLASS_NAMES = tuple(f"{k:02d}_{name}" for k, name in enumerate(SHAPE_FAMILY))


def _blur3(img):
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def render(shape: str, s: int, rng: Rng) -> np.ndarray:
    """One s x s crop of class ``shape`` with values in [0, 1]."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    cx, cy = rng.uniform(-0.22, 0.22, 2)
    scale = rng.uniform(0.8, 1.2)
    theta = np.deg2rad(rng.uniform(-20.0, 20.0))
    level = rng.uniform(0.08, 0.2)
    gain = rng.uniform(0.5, 0.85)
    shadow_on = rng.random() < 0.5
    shadow_len = rng.uniform(0.3, 0.6)
    speckle_bg = _blur3(rng.exponential((s, s)))
    speckle_hi = _blur3(rng.exponential((s, s)))

    img = level * speckle_bg
    fn = SHAPES[shape]
    if fn is None:
        return np.clip(img, 0.0, 1.0)

    # 2x2 supersampled coverage of the rotated, scaled, shifted shape
    t = (np.arange(2 * s) + 0.5) / (2 * s) * 2.0 - 1.0
    v, u = np.meshgrid(t, t, indexing="ij")
    du, dv = u - cx, v - cy
    c, sn = np.cos(theta), np.sin(theta)
    x = (c * du + sn * dv) / scale
    y = (-sn * du + c * dv) / scale
    mask = fn(x, y).astype(np.float64).reshape(s, 2, s, 2).mean(axis=(1, 3))

    if shadow_on:
        reach = max(1, int(round(shadow_len * s / 2)))
        trail = np.zeros_like(mask)
        for k in range(1, reach + 1):
            trail[k:] = np.maximum(trail[k:], mask[:-k])
        shade = np.clip(trail - mask, 0.0, 1.0)
        img = img * (1.0 - 0.75 * shade)
    img = img + gain * mask * speckle_hi
    return np.clip(img, 0.0, 1.0)


def synth_sonar_generate(class_count: int, per_class: int, s: int, rng: Rng) -> LabeledImageSet:
    """Balanced synthetic set, ``per_class`` crops per class, class-major order."""
    if class_count < 1:
        raise ValueError(f"class count must be >= 1, got {class_count}")
    if class_count > len(SHAPES):
        raise ValueError(f"class count {class_count} exceeds the {len(SHAPES)} available shapes")
    if per_class < 0:
        raise ValueError(f"per-class count must be >= 0, got {per_class}")
    if s < 1:
        raise ValueError(f"image size must be >= 1, got {s}")
    images = np.zeros((class_count * per_class, s, s))
    labels = np.repeat(np.arange(class_count), per_class)
    for i, k in enumerate(labels):
        images[i] = render(SHAPE_FAMILY[k], s, rng)
    return LabeledImageSet(images, labels, CLASS_NAMES[:class_count])
