"""Dataset ingestion: directory scan, image decode, resize, augment, batch.

Directory layout: root/{train,test,val}/{NORMAL,PNEUMONIA}/*.{jpeg,jpg,png,pgm}.
Labels come solely from the class subfolder (NORMAL=0, PNEUMONIA=1).

Shuffling uses Fisher-Yates driven by SplitMix64, a fixed self-contained
generator, so batch order is reproducible across machines and numpy
versions. The per-epoch stream is seeded with splitmix(seed) xor epoch.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "val")
CLASS_LABELS = {"NORMAL": 0, "PNEUMONIA": 1}
IMAGE_EXTENSIONS = {".jpeg", ".jpg", ".png", ".pgm"}


class DecodeError(ValueError):
    """Corrupt, truncated, or unsupported image payload."""


@dataclass
class ImageBuffer:
    """8-bit pixels, [H, W, C] with C in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"ImageBuffer needs [H,W,1|3], got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"ImageBuffer needs uint8 pixels, got {px.dtype}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    rotation_max_degrees: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        if self.rotation_max_degrees < 0:
            raise ValueError("rotation_max_degrees must be >= 0")


# ---------------------------------------------------------------------------
# Directory scan


@dataclass
class DatasetIndex:
    entries: dict  # split -> list[(Path, label)], lexicographic by path

    def counts(self) -> dict:
        out = {}
        for split, items in self.entries.items():
            per_class = {"NORMAL": 0, "PNEUMONIA": 0}
            for _, label in items:
                per_class["PNEUMONIA" if label == 1 else "NORMAL"] += 1
            out[split] = {"total": len(items), **per_class}
        return out


def scan_dataset(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    entries = {}
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise FileNotFoundError(f"missing split folder {split_dir}")
        for sub in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if sub.name not in CLASS_LABELS:
                raise ValueError(f"unknown class folder {sub} "
                                 f"(expected NORMAL or PNEUMONIA)")
        items = []
        for cls, label in CLASS_LABELS.items():
            cls_dir = split_dir / cls
            if not cls_dir.is_dir():
                logger.warning("class folder %s missing; counting 0", cls_dir)
                continue
            files = sorted(p for p in cls_dir.iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
            if not files:
                logger.warning("class folder %s is empty", cls_dir)
            items.extend((p, label) for p in files)
        items.sort(key=lambda pair: str(pair[0]))
        entries[split] = items
    return DatasetIndex(entries=entries)


# ---------------------------------------------------------------------------
# Decoding


def _decode_pgm(data: bytes) -> ImageBuffer:
    if not data.startswith(b"P5"):
        raise DecodeError("not a P5 PGM")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DecodeError(f"bad PGM header: {exc}") from exc
    if maxval <= 0 or maxval > 255:
        raise DecodeError(f"unsupported PGM maxval {maxval} (8-bit only)")
    need = width * height
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise DecodeError(f"truncated PGM: expected {need} pixel bytes, "
                          f"got {len(raw)}")
    px = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return ImageBuffer(px.copy())


def decode_image(data: bytes, fmt: str | None = None) -> ImageBuffer:
    """Decode JPEG / PNG (8-bit) / PGM (P5) bytes; grayscale stays 1-channel."""
    if not data:
        raise DecodeError("empty image payload")
    if fmt is None:
        if data[:2] == b"P5":
            fmt = "pgm"
        elif data[:2] == b"\xff\xd8":
            fmt = "jpeg"
        elif data[:8] == b"\x89PNG\r\n\x1a\n":
            fmt = "png"
        else:
            raise DecodeError("unrecognized image format "
                              "(supported: JPEG, PNG, PGM P5)")
    fmt = fmt.lower().lstrip(".")
    if fmt == "jpg":
        fmt = "jpeg"
    if fmt == "pgm":
        return _decode_pgm(data)
    if fmt not in ("jpeg", "png"):
        raise DecodeError(f"unsupported format {fmt!r}")
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode in ("L", "I;16", "I"):
                img = img.convert("L")
            elif img.mode != "RGB":
                img = img.convert("RGB")
            px = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {fmt} image: {exc}") from exc
    return ImageBuffer(px)


def load_image(path) -> ImageBuffer:
    path = Path(path)
    return decode_image(path.read_bytes(), path.suffix)


# ---------------------------------------------------------------------------
# Resize (half-pixel-center bilinear)


def bilinear_resize_array(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear-resample a float [H,W] or [H,W,C] array, half-pixel centers."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    h, w = src.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if src.ndim == 3:
        wy = wy[:, :, None]
        wx = wx[:, :, None]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bottom = c * (1 - wx) + d * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    if (out_h, out_w) == (img.height, img.width):
        return ImageBuffer(img.pixels.copy())
    out = bilinear_resize_array(img.pixels.astype(np.float64), out_h, out_w)
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Augmentation


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(np.ascontiguousarray(img.pixels[:, ::-1]))


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    """Rotate about the image center; bilinear resampling, black fill.

    Positive angles turn the content clockwise in screen orientation
    (row 0 at the top). Augmentation draws from a symmetric range, so the
    sign convention only matters for direct callers.
    """
    if degrees == 0.0:
        return ImageBuffer(img.pixels.copy())
    h, w = img.height, img.width
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: rotate destination coords by -theta around the center
    dy, dx = yy - cy, xx - cx
    src_y = cy + dy * cos_t - dx * sin_t
    src_x = cx + dy * sin_t + dx * cos_t

    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = src_y - y0
    wx = src_x - x0
    out = np.zeros((h, w, img.channels), dtype=np.float64)
    px = img.pixels.astype(np.float64)
    # out-of-bounds neighbors contribute 0, giving the black fill
    for oy, ox, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        cy_, cx_ = np.where(valid, oy, 0), np.where(valid, ox, 0)
        out += px[cy_, cx_] * (wgt * valid)[:, :, None]
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def augment(img: ImageBuffer, config: AugmentationConfig,
            rng: np.random.Generator) -> ImageBuffer:
    """Maybe horizontal mirror, then rotate by a uniform random angle."""
    if rng.random() < config.hflip_prob:
        img = hflip(img)
    if config.rotation_max_degrees > 0:
        angle = rng.uniform(-config.rotation_max_degrees,
                            config.rotation_max_degrees)
        img = rotate(img, angle)
    return img


_augment_image = augment  # batches() has an `augment` toggle in scope


# ---------------------------------------------------------------------------
# Tensor conversion


def to_tensor(img: ImageBuffer, model_channels: int) -> Tensor:
    """Scale pixels to [0,1] and lay out as [C,H,W]; replicate 1->3 channels."""
    px = img.pixels
    if img.channels == 1 and model_channels == 3:
        px = np.repeat(px, 3, axis=2)
    elif img.channels != model_channels:
        raise ValueError(f"image has {img.channels} channels, model wants "
                         f"{model_channels} (only 1->3 replication supported)")
    chw = px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return T.from_array(chw)


# ---------------------------------------------------------------------------
# Deterministic shuffle (SplitMix64 + Fisher-Yates)


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, z ^ (z >> 31)


def shuffled_indices(n: int, seed: int, epoch: int = 0) -> list:
    """Fisher-Yates permutation of range(n) from a SplitMix64 stream."""
    state, _ = _splitmix64((seed & 0xFFFFFFFFFFFFFFFF) ^ (epoch * 0x9E3779B97F4A7C15))
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        state, z = _splitmix64(state)
        j = z % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


# ---------------------------------------------------------------------------
# Datasets


class ArrayDataset:
    """In-memory dataset of uint8 grayscale images, split -> (images, labels)."""

    def __init__(self, splits: dict, channels: int = 3,
                 augmentation: AugmentationConfig | None = None,
                 augment_seed: int = 0):
        self.splits = {}
        for split, (images, labels) in splits.items():
            labels = np.asarray(labels, dtype=np.int64)
            if len(images) != len(labels):
                raise ValueError(f"split {split!r}: {len(images)} images vs "
                                 f"{len(labels)} labels")
            self.splits[split] = (list(images), labels)
        self.channels = channels
        self.augmentation = augmentation or AugmentationConfig()
        self.augment_seed = augment_seed

    def size(self, split: str) -> int:
        return len(self.splits[split][0])

    def _image(self, split: str, i: int) -> ImageBuffer:
        img = self.splits[split][0][i]
        return img if isinstance(img, ImageBuffer) else ImageBuffer(img)

    def batches(self, split: str, batch_size: int, shuffle_seed: int | None = None,
                epoch: int = 0, augment: bool = False):
        if split not in self.splits:
            raise KeyError(f"no split {split!r}")
        images, labels = self.splits[split]
        n = len(images)
        if n == 0:
            raise ValueError(f"split {split!r} is empty")
        order = (shuffled_indices(n, shuffle_seed, epoch)
                 if shuffle_seed is not None else list(range(n)))
        aug_rng = np.random.default_rng(
            (self.augment_seed, epoch)) if augment else None
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tensors = []
            for i in idx:
                img = self._image(split, i)
                if augment:
                    img = _augment_image(img, self.augmentation, aug_rng)
                tensors.append(to_tensor(img, self.channels).data)
            xb = Tensor(np.stack(tensors))
            yb = labels[idx]
            yield xb, yb


class DirectoryDataset(ArrayDataset):
    """Lazily decoded dataset over a scanned directory index."""

    CACHE_LIMIT = 4096  # decoded images; larger datasets re-decode per epoch

    def __init__(self, index: DatasetIndex, image_size: tuple, channels: int = 3,
                 augmentation: AugmentationConfig | None = None,
                 augment_seed: int = 0):
        self.index = index
        self.image_size = image_size  # (H, W)
        self.splits = {split: ([path for path, _ in items],
                               np.asarray([label for _, label in items], dtype=np.int64))
                       for split, items in index.entries.items()}
        self.channels = channels
        self.augmentation = augmentation or AugmentationConfig()
        self.augment_seed = augment_seed
        self._cache: dict = {}

    def _image(self, split: str, i: int) -> ImageBuffer:
        path = self.splits[split][0][i]
        cached = self._cache.get(path)
        if cached is None:
            img = load_image(path)
            cached = resize_bilinear(img, self.image_size[1], self.image_size[0])
            if len(self._cache) < self.CACHE_LIMIT:
                self._cache[path] = cached
        return cached
