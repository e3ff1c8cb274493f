"""Labeled image sets, the PGM/CSV dataset format, resizing and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    """Square grayscale images in [0, 1] with integer labels.

    ``ids`` carries each image's index in the set it was originally loaded or
    generated as, so train/test disjointness survives any number of splits.
    """
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 2 and images.size == 0:
            images = images.reshape(0, 0, 0)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise DatasetError(f"images must be (n, s, s), got {images.shape}")
        if len(images) != len(labels):
            raise DatasetError(f"{len(images)} images but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError(f"labels must lie in [0, {len(self.class_names)})")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DatasetError("ids and labels differ in length")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "LabeledImageSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledImageSet(self.images[index], self.labels[index], self.class_names, self.ids[index])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def concat(self, other: "LabeledImageSet") -> "LabeledImageSet":
        if other.class_names != self.class_names:
            raise DatasetError("cannot concatenate sets with different class tables")
        return LabeledImageSet(np.concatenate([self.images, other.images]),
                               np.concatenate([self.labels, other.labels]),
                               self.class_names, np.concatenate([self.ids, other.ids]))


# ------------------------------------------------------------------------ PGM


def quantize(image) -> np.ndarray:
    """[0, 1] floats to 8-bit codes, ``floor(p * 255 + 0.5)``."""
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    """Write a binary (P5) PGM, maxval 255. ``image`` is uint8 or [0, 1] floats."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = quantize(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte ends the header
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header {tokens!r}") from None
    if maxval != 255:
        raise DatasetError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w < 1 or h < 1:
        raise DatasetError(f"{path}: empty image {w}x{h}")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


MANIFEST = "manifest.csv"


def save_dataset(dataset: LabeledImageSet, directory):
    """Write ``manifest.csv`` plus one PGM per image into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(dataset))))
    with open(directory / MANIFEST, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label_name"])
        for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
            name = f"img_{i:0{width}d}.pgm"
            write_pgm(directory / name, img)
            w.writerow([name, dataset.class_names[lab]])


def load_manifest(directory) -> LabeledImageSet:
    """Load a dataset directory; class names are the sorted distinct labels."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: missing manifest")
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label_name"]:
            raise DatasetError(f"{manifest}: header must be 'path,label_name', got {header}")
        rows = [r for r in reader if r]
    for r in rows:
        if len(r) != 2:
            raise DatasetError(f"{manifest}: malformed row {r}")
    class_names = tuple(sorted({r[1] for r in rows}))
    lookup = {n: i for i, n in enumerate(class_names)}
    images, size = [], None
    for rel, _ in rows:
        path = directory / rel
        if not path.is_file():
            raise DatasetError(f"{path}: missing image file")
        img = read_pgm(path)
        if img.shape[0] != img.shape[1]:
            raise DatasetError(f"{path}: image is not square ({img.shape[1]}x{img.shape[0]})")
        if size is None:
            size = img.shape[0]
        elif img.shape[0] != size:
            raise DatasetError(f"{path}: size {img.shape[0]} differs from {size}")
        images.append(img.astype(np.float64) / 255.0)
    labels = [lookup[r[1]] for r in rows]
    stack = np.stack(images) if images else np.zeros((0, 0, 0))
    return LabeledImageSet(stack, labels, class_names)


# ----------------------------------------------------------------- resampling


def _bilinear_matrix(s, t):
    """(t, s) interpolation weights with half-pixel centre alignment."""
    src = np.clip((np.arange(t) + 0.5) * (s / t) - 0.5, 0, s - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, s - 1)
    frac = src - lo
    m = np.zeros((t, s))
    np.add.at(m, (np.arange(t), lo), 1 - frac)
    np.add.at(m, (np.arange(t), hi), frac)
    return m


def resize_bilinear(image, target: int) -> np.ndarray:
    """Resize one (s, s) image or a stack (n, s, s) to ``target`` pixels."""
    img = np.asarray(image, dtype=np.float64)
    s = img.shape[-1]
    if target < 1 or s < 1:
        raise ValueError(f"sizes must be >= 1, got {s} -> {target}")
    if target == s:
        return img.copy()
    m = _bilinear_matrix(s, target)
    out = np.einsum("ij,...jk,lk->...il", m, img, m)
    return np.clip(out, 0.0, 1.0)


def resize_set(dataset: LabeledImageSet, target: int) -> LabeledImageSet:
    return LabeledImageSet(resize_bilinear(dataset.images, target), dataset.labels,
                           dataset.class_names, dataset.ids)


# --------------------------------------------------------------------- splits


def undersample_per_class(dataset: LabeledImageSet, spc: int, rng: Rng) -> LabeledImageSet:
    """Keep ``min(spc, class size)`` random images per class."""
    if spc < 1:
        raise ValueError(f"samples per class must be >= 1, got {spc}")
    keep = []
    for k in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == k)
        take = min(spc, len(idx))
        keep.append(np.sort(idx[rng.choice(len(idx), take)]))
    return dataset.subset(np.concatenate(keep) if keep else [])


def split_boundary_range(class_count: int) -> tuple:
    """Admissible r, ceil(2c/5) .. floor(3c/5), clipped to [1, c-1]."""
    lo = max(1, -(-2 * class_count // 5))
    hi = min(class_count - 1, 3 * class_count // 5)
    return lo, hi


def _relabel(dataset, classes):
    classes = list(classes)
    mask = np.isin(dataset.labels, classes)
    sub = dataset.subset(np.flatnonzero(mask))
    remap = np.full(dataset.class_count, -1)
    remap[classes] = np.arange(len(classes))
    return LabeledImageSet(sub.images, remap[sub.labels], [dataset.class_names[c] for c in classes],
                           sub.ids)


def class_split_disjoint(dataset: LabeledImageSet, rng: Rng, r: int | None = None):
    """Split by class index: classes < r and classes >= r, each relabeled from 0.

    Returns ``(first, second, r)``; r is drawn uniformly from the admissible
    range unless given.
    """
    c = dataset.class_count
    if c < 2:
        raise ValueError(f"need at least 2 classes to split, got {c}")
    lo, hi = split_boundary_range(c)
    if lo > hi:
        raise ValueError(f"no admissible class boundary for {c} classes")
    if r is None:
        r = int(rng.integers(lo, hi + 1))
    elif not lo <= r <= hi:
        raise ValueError(f"r={r} outside admissible range [{lo}, {hi}]")
    return _relabel(dataset, range(r)), _relabel(dataset, range(r, c)), r


def restrict_classes(dataset: LabeledImageSet, class_names) -> LabeledImageSet:
    """Keep only the named classes, relabeled in the given order."""
    lookup = {n: i for i, n in enumerate(dataset.class_names)}
    missing = [n for n in class_names if n not in lookup]
    if missing:
        raise DatasetError(f"unknown classes {missing}")
    return _relabel(dataset, [lookup[n] for n in class_names])


def _half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def split_fraction(dataset: LabeledImageSet, fraction: float, rng: Rng, stratified=True):
    """Random split into ``(a, b)`` with ``a`` holding ``fraction`` of the data.

    Stratified mode rounds each class's share half-up independently.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    groups = ([np.flatnonzero(dataset.labels == k) for k in range(dataset.class_count)]
              if stratified else [np.arange(len(dataset))])
    a, b = [], []
    for idx in groups:
        order = idx[rng.permutation(len(idx))]
        cut = _half_up(len(idx) * fraction)
        a.append(np.sort(order[:cut]))
        b.append(np.sort(order[cut:]))
    return dataset.subset(np.concatenate(a)), dataset.subset(np.concatenate(b))
