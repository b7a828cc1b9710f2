"""Dataset ingestion, seeded random streams and image dumps.

Pixels live in [0, 1] as float64 ``H x W x C`` arrays. Files on disk are
8-bit; loading divides by 255 and dumping writes ``round(pixel * 255)``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(ValueError):
    pass


class MagicMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RandomStream:
    """Seedable counter-based stream (Philox) keyed by integers.

    ``RandomStream(seed, 3, 7)`` always yields the same draws, and
    ``stream.child(k)`` derives an independent stream without consuming
    draws from the parent, so per-image work can be scheduled in any order.
    """

    def __init__(self, seed: int, *key: int):
        self.key = (int(seed),) + tuple(int(k) for k in key)
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.key)))

    def child(self, *key: int) -> "RandomStream":
        return RandomStream(*self.key, *key)

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)


@dataclass
class ImageTensor:
    pixels: np.ndarray
    label: int
    id: int = 0

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DataError(f"image must be H x W x C, got shape {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels) -> "ImageTensor":
        return ImageTensor(pixels, self.label, self.id)


@dataclass
class DatasetHandle:
    images: list
    num_classes: int
    by_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.images:
            raise DataError("dataset is empty")
        by_class = {}
        for img in self.images:
            if not 0 <= img.label < self.num_classes:
                raise DataError(f"image {img.id}: label {img.label} outside [0, {self.num_classes})")
            by_class.setdefault(img.label, []).append(img.id)
        self.by_class = by_class
        self._pos = {img.id: i for i, img in enumerate(self.images)}

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> ImageTensor:
        return self.images[i]

    def by_id(self, image_id: int) -> ImageTensor:
        return self.images[self._pos[image_id]]

    @property
    def shape(self):
        return self.images[0].shape

    def pixels(self) -> np.ndarray:
        return np.stack([img.pixels for img in self.images])

    def labels(self) -> np.ndarray:
        return np.array([img.label for img in self.images], dtype=np.int64)

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.num_classes)


def from_arrays(pixels, labels, num_classes=None) -> DatasetHandle:
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    images = [ImageTensor(p, int(y), i) for i, (p, y) in enumerate(zip(pixels, labels))]
    return DatasetHandle(images, num_classes)


# -- IDX --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, magic: int, ndims: int, path) -> tuple:
    need = 4 + 4 * ndims
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise MagicMismatchError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(">" + "I" * ndims, raw[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> DatasetHandle:
    img_raw, lab_raw = _read_bytes(images_path), _read_bytes(labels_path)
    n, rows, cols = _idx_header(img_raw, 0x803, 3, images_path)
    (m,) = _idx_header(lab_raw, 0x801, 1, labels_path)
    if len(img_raw) < 16 + n * rows * cols:
        raise TruncatedFileError(f"{images_path}: expected {n * rows * cols} pixel bytes")
    if len(lab_raw) < 8 + m:
        raise TruncatedFileError(f"{labels_path}: expected {m} label bytes")
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels")
    pix = np.frombuffer(img_raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=m, offset=8)
    pix = pix.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    return from_arrays(pix, labels, num_classes)


def write_idx(dataset: DatasetHandle, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX (gzipped when the path ends in .gz)."""
    pix = to_uint8(dataset.pixels())
    if pix.shape[3] != 1:
        raise DataError("IDX holds grayscale images only")
    n, h, w, _ = pix.shape
    for path, payload in (
        (images_path, struct.pack(">IIII", 0x803, n, h, w) + pix.tobytes()),
        (labels_path, struct.pack(">II", 0x801, n) + dataset.labels().astype(np.uint8).tobytes()),
    ):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)


# -- image directories ------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".ppm")


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1", "I;16", "I"):
                arr = np.asarray(im.convert("L"))[..., None]
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def load_image_dir(root) -> DatasetHandle:
    """Load ``root/<class>/<file>.png|ppm``; classes are numbered in sorted directory order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    images = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {cdir} holds no PNG/PPM images")
        for f in files:
            images.append(ImageTensor(_decode(f), label, len(images)))
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataError(f"{root}: mixed image shapes {sorted(shapes)}")
    return DatasetHandle(images, len(class_dirs))


def load_split(root, split: str) -> DatasetHandle:
    """Load ``split`` ("train" or "test") from a dataset root.

    Accepts either ``root/<split>/<class>/...`` image trees or IDX pairs named
    ``<split>-images-idx3-ubyte[.gz]`` / ``<split>-labels-idx1-ubyte[.gz]``.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root not found: {root}")
    if (root / split).is_dir():
        return load_image_dir(root / split)
    for suffix in ("", ".gz"):
        imgs = root / f"{split}-images-idx3-ubyte{suffix}"
        labs = root / f"{split}-labels-idx1-ubyte{suffix}"
        if imgs.exists() and labs.exists():
            return load_idx(imgs, labs)
    raise DataError(f"{root}: no '{split}' split (image tree or IDX files)")


def sample_donor(data: DatasetHandle, exclude_label: int, rng: RandomStream) -> ImageTensor:
    """Uniform draw over all images whose label differs from ``exclude_label``."""
    eligible = [i for lab, ids in sorted(data.by_class.items()) if lab != exclude_label for i in ids]
    if not eligible:
        raise DataError(f"no donor image with label != {exclude_label}")
    return data.by_id(eligible[int(rng.integers(len(eligible)))])


# -- output -----------------------------------------------------------------

def to_uint8(pixels) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, pixels) -> None:
    arr = to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def write_image_dir(dataset: DatasetHandle, root) -> None:
    root = Path(root)
    width = len(str(dataset.num_classes - 1))
    for img in dataset.images:
        save_png(root / f"{img.label:0{width}d}" / f"{img.id:06d}.png", img.pixels)
