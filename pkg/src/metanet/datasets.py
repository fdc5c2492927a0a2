"""Image datasets: the MN01 binary format, synthetic glyphs, and augmentations."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MN01"
_HEADER = struct.Struct("<4I")


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class EmptyClassError(DatasetError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray          # (count, height, width), values in [0, 1]
    labels: np.ndarray          # (count,) class ids
    class_count: int
    partition: str = "train"
    _members: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.class_count)][0])
            raise LabelRangeError(f"label {bad} outside [0, {self.class_count})")
        counts = np.bincount(self.labels, minlength=self.class_count)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise EmptyClassError(f"class {int(empty[0])} has no examples")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def members(self, cls: int) -> np.ndarray:
        """Indices of the examples of class ``cls``, in file order."""
        if self._members is None:
            order = np.argsort(self.labels, kind="stable")
            bounds = np.cumsum(np.bincount(self.labels, minlength=self.class_count))[:-1]
            self._members = np.split(order, bounds)
        return self._members[cls]

    def subset_classes(self, classes, partition: str | None = None) -> "LabeledImageSet":
        """Examples of ``classes``, relabelled 0..len(classes)-1 in the given order."""
        classes = [int(c) for c in classes]
        idx = np.concatenate([self.members(c) for c in classes])
        remap = np.full(self.class_count, -1)
        remap[classes] = np.arange(len(classes))
        idx.sort()
        return LabeledImageSet(self.images[idx], remap[self.labels[idx]], len(classes),
                               partition or self.partition)


def dataset_to_bytes(ds: LabeledImageSet) -> bytes:
    n, h, w = ds.images.shape
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    return (MAGIC + _HEADER.pack(n, h, w, ds.class_count)
            + ds.labels.astype("<u4").tobytes() + pixels.tobytes())


def dataset_from_bytes(buf: bytes, partition: str = "train") -> LabeledImageSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 4 + _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    n, h, w, class_count = _HEADER.unpack_from(buf, 4)
    off = 4 + _HEADER.size
    need = off + 4 * n + n * h * w
    if len(buf) < need:
        raise TruncatedFileError(f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise DatasetError(f"{len(buf) - need} trailing bytes after pixel data")
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=off + 4 * n)
    images = pixels.reshape(n, h, w).astype(np.float64) / 255.0
    return LabeledImageSet(images, labels, class_count, partition)


def save_dataset(ds: LabeledImageSet, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path, partition: str = "train") -> LabeledImageSet:
    return dataset_from_bytes(Path(path).read_bytes(), partition)


# ---------------------------------------------------------------- synthetic glyphs

def _random_stroke(rng) -> np.ndarray:
    """Polyline (k, 2) of a line or arc inside the central 20x20 box."""
    if rng.random() < 0.5:
        a, b = rng.uniform(4, 24, size=(2, 2))
        while np.hypot(*(a - b)) < 6:
            b = rng.uniform(4, 24, size=2)
        t = np.linspace(0, 1, 8)[:, None]
        return a + t * (b - a)
    center = rng.uniform(9, 19, size=2)
    radius = rng.uniform(3, 8)
    start = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(0.5, 1.5) * np.pi * rng.choice([-1, 1])
    t = start + sweep * np.linspace(0, 1, 12)
    pts = center + radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    return np.clip(pts, 1, 27)


def _render(strokes, width, size, grid) -> np.ndarray:
    segs = np.concatenate([np.stack([s[:-1], s[1:]], axis=1) for s in strokes])  # S, 2, 2
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-12)
    ap = grid[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(2) / denom, 0, 1)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((grid[:, None, :] - closest) ** 2).sum(2)).min(1)
    return np.clip(width / 2 + 0.5 - dist, 0, 1).reshape(size, size)


def gen_synthetic_glyphs(class_count: int, per_class: int, seed: int, size: int = 28,
                         partition: str = "train") -> LabeledImageSet:
    """Procedural stroke glyphs: 3-6 random lines/arcs per class, jittered per example
    by up to +-2 px translation, +-10 degrees rotation and stroke-width noise."""
    if class_count < 2 or per_class < 2:
        raise DatasetError("need at least 2 classes and 2 examples per class")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    centre = np.array([(size - 1) / 2, (size - 1) / 2])
    scale = size / 28.0
    images = np.empty((class_count * per_class, size, size))
    labels = np.repeat(np.arange(class_count), per_class)
    for c in range(class_count):
        strokes = [_random_stroke(rng) * scale for _ in range(rng.integers(3, 7))]
        base_width = rng.uniform(1.2, 2.2) * scale
        for k in range(per_class):
            ang = np.deg2rad(rng.uniform(-10, 10))
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            shift = rng.uniform(-2, 2, size=2) * scale
            moved = [(s - centre) @ rot.T + centre + shift for s in strokes]
            width = base_width * rng.uniform(0.75, 1.25)
            images[c * per_class + k] = _render(moved, width, size, grid)
    images = np.rint(images * 255.0) / 255.0
    return LabeledImageSet(images, labels, class_count, partition)


# ---------------------------------------------------------------- augmentation

def augment_rotations(ds: LabeledImageSet) -> LabeledImageSet:
    """Add 90/180/270 degree rotations; rotation k of class c becomes class c + k*C."""
    h, w = ds.image_shape
    if h != w:
        raise DatasetError(f"rotations need square images, got {h}x{w}")
    C = ds.class_count
    images = np.concatenate([np.rot90(ds.images, k, axes=(1, 2)) for k in range(4)])
    labels = np.concatenate([ds.labels + k * C for k in range(4)])
    return LabeledImageSet(images, labels, 4 * C, ds.partition)


@dataclass(frozen=True)
class PermutationFamily:
    """``shuffle_count`` pixel permutations; shuffle 0 is the identity."""

    pixel_count: int
    shuffle_count: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.shuffle_count < 1 or self.pixel_count < 1:
            raise ValueError("shuffle_count and pixel_count must be positive")

    @property
    def permutations(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        perms = [np.arange(self.pixel_count)]
        perms += [rng.permutation(self.pixel_count) for _ in range(self.shuffle_count - 1)]
        return np.stack(perms)


def apply_permutation_family(ds: LabeledImageSet, family: PermutationFamily) -> LabeledImageSet:
    """Shuffle s of class c becomes class c + s*C; one permutation per shuffle for all images."""
    n, h, w = ds.images.shape
    if h * w != family.pixel_count:
        raise DatasetError(f"images have {h * w} pixels, permutations act on {family.pixel_count}")
    flat = ds.images.reshape(n, h * w)
    C = ds.class_count
    perms = family.permutations
    images = np.concatenate([flat[:, p].reshape(n, h, w) for p in perms])
    labels = np.concatenate([ds.labels + s * C for s in range(len(perms))])
    return LabeledImageSet(images, labels, C * len(perms), ds.partition)


def split_classes(ds: LabeledImageSet, n_train: int, n_test: int):
    """First ``n_train`` classes form the train partition, the next ``n_test`` the test one."""
    if n_train < 1 or n_test < 1 or n_train + n_test > ds.class_count:
        raise DatasetError(f"split {n_train}/{n_test} needs {n_train + n_test} classes, "
                           f"dataset has {ds.class_count}")
    train = ds.subset_classes(range(n_train), "train")
    test = ds.subset_classes(range(n_train, n_train + n_test), "test")
    return train, test
