#!/usr/bin/env python3
"""
GPDNN Datasets
IDX / Semeion parsing, transfer-test preprocessing, half moons and splits.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_SIDE = 28
SEMEION_SIDE = 16
SEMEION_FIELDS = SEMEION_SIDE * SEMEION_SIDE + 10
LUMINANCE = np.array([0.299, 0.587, 0.114])

PathLike = Union[str, Path]


class DatasetError(Exception):
    """Malformed or inconsistent dataset input"""


@dataclass(frozen=True)
class Dataset:
    """Images [N, ...] with integer labels [N]; pixels normalized into [lo, hi]"""
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    lo: float = -1.0
    hi: float = 1.0
    num_classes: int = 10
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        for arr in (self.images, self.labels):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, index: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index], name=name or self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": len(self),
            "input_shape": list(self.input_shape),
            "range": [self.lo, self.hi],
            "label_counts": np.bincount(self.labels, minlength=self.num_classes).tolist(),
        }


def normalize_pixels(raw: np.ndarray, scale: float = 255.0) -> np.ndarray:
    """Map [0, scale] onto [-1, 1]"""
    return np.clip(np.asarray(raw, dtype=np.float64) * (2.0 / scale) - 1.0, -1.0, 1.0)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"file not found: {path}")
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, expected_magic: int, source: str) -> np.ndarray:
    if len(data) < 8:
        raise DatasetError(f"{source}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetError(f"{source}: bad IDX magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{source}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header != size:
        raise DatasetError(f"{source}: payload has {len(data) - header} bytes, header promises {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def save_idx(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def load_idx(images_path: PathLike, labels_path: PathLike, name: str = "mnist") -> Dataset:
    raw_images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    raw_labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(raw_images) != len(raw_labels):
        raise DatasetError(f"{images_path} has {len(raw_images)} images but {labels_path} "
                           f"has {len(raw_labels)} labels")
    if raw_labels.size and raw_labels.max() >= 10:
        raise DatasetError(f"{labels_path}: label {raw_labels.max()} outside [0, 10)")
    images = normalize_pixels(raw_images)[..., None]
    logger.info(f"Loaded {len(raw_labels)} IDX images {raw_images.shape[1:]} from {images_path}")
    return Dataset(images, raw_labels.astype(np.int64), name=name)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centre source indices and blend weights along one axis"""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def bilinear_resize(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize [N, H, W, C] images with bilinear interpolation at pixel centres"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DatasetError(f"bilinear_resize expects [N, H, W, C], got {images.shape}")
    _, H, W, _ = images.shape
    if (H, W) == (height, width):
        return images.copy()
    r0, r1, wr = _axis_weights(H, height)
    c0, c1, wc = _axis_weights(W, width)
    wr = wr[None, :, None, None]
    wc = wc[None, None, :, None]
    top = images[:, r0][:, :, c0] * (1 - wc) + images[:, r0][:, :, c1] * wc
    bottom = images[:, r1][:, :, c0] * (1 - wc) + images[:, r1][:, :, c1] * wc
    return top * (1 - wr) + bottom * wr


def to_grayscale(images: np.ndarray) -> np.ndarray:
    channels = images.shape[-1]
    if channels == 1:
        return images
    if channels == 3:
        return (images @ LUMINANCE)[..., None]
    raise DatasetError(f"unsupported channel count {channels} (expected 1 or 3)")


def preprocess_external(images: np.ndarray, labels: Optional[np.ndarray] = None, name: str = "external",
                        scale: float = 255.0, side: int = MNIST_SIDE) -> Dataset:
    """Grayscale, resize to side x side and normalize raw [0, scale] pixels"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DatasetError(f"{name}: expected [N, H, W, C] images, got {images.shape}")
    gray = bilinear_resize(to_grayscale(images), side, side)
    if labels is None:
        labels = np.zeros(len(images), dtype=np.int64)
    return Dataset(normalize_pixels(gray, scale), np.asarray(labels, dtype=np.int64), name=name)


def load_npy(images_path: PathLike, labels_path: PathLike, name: Optional[str] = None,
             scale: float = 255.0) -> Dataset:
    """Already-decoded external images (e.g. SVHN) stored as .npy arrays"""
    for p in (images_path, labels_path):
        if not Path(p).is_file():
            raise DatasetError(f"file not found: {p}")
    try:
        images = np.load(images_path, allow_pickle=False)
        labels = np.load(labels_path, allow_pickle=False).reshape(-1)
    except ValueError as e:
        raise DatasetError(f"{images_path}: unreadable array ({e})") from None
    return preprocess_external(images, labels, name=name or Path(images_path).stem, scale=scale)


# ---------------------------------------------------------------------------
# Semeion
# ---------------------------------------------------------------------------

def load_semeion(path: PathLike, name: str = "semeion") -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"file not found: {path}")
    rows, labels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != SEMEION_FIELDS:
            raise DatasetError(f"{path}:{lineno}: expected {SEMEION_FIELDS} fields, got {len(fields)}")
        try:
            values = np.array([float(v) for v in fields])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric field") from None
        pixels, onehot = values[:SEMEION_SIDE * SEMEION_SIDE], values[SEMEION_SIDE * SEMEION_SIDE:]
        if not np.all(np.isin(onehot, (0.0, 1.0))) or onehot.sum() != 1:
            raise DatasetError(f"{path}:{lineno}: label is not one-hot")
        rows.append(pixels.reshape(SEMEION_SIDE, SEMEION_SIDE))
        labels.append(int(np.argmax(onehot)))
    if not rows:
        raise DatasetError(f"{path}: no rows")
    images = bilinear_resize(np.stack(rows)[..., None], MNIST_SIDE, MNIST_SIDE)
    logger.info(f"Loaded {len(rows)} Semeion digits from {path}")
    # ink 1 -> +1, background 0 -> -1
    return Dataset(normalize_pixels(images, scale=1.0), np.array(labels, dtype=np.int64), name=name)


# ---------------------------------------------------------------------------
# Synthetic and splits
# ---------------------------------------------------------------------------

def half_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles; the first n/2 rows are class 0"""
    if n <= 0 or n % 2:
        raise DatasetError(f"half_moons needs a positive even n, got {n}")
    if noise < 0:
        raise DatasetError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    points = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    labels = np.repeat([0, 1], half)
    lo, hi = float(points.min()), float(points.max())
    return Dataset(points, labels, name="halfmoons", lo=lo, hi=hi, num_classes=2)


def split(ds: Dataset, val_size: int, train_proportion: float = 1.0, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """First `val_size` items validate; a seeded proportion of the rest trains"""
    if not 0 <= val_size < len(ds):
        raise DatasetError(f"val_size {val_size} must lie in [0, {len(ds)})")
    if not 0.0 < train_proportion <= 1.0:
        raise DatasetError(f"train proportion must lie in (0, 1], got {train_proportion}")
    rest = np.arange(val_size, len(ds))
    n_train = int(round(train_proportion * len(rest)))
    if train_proportion < 1.0:
        rng = np.random.default_rng(seed)
        rest = np.sort(rng.choice(rest, size=n_train, replace=False))
    val = ds.take(np.arange(val_size), name=f"{ds.name}-val")
    train = ds.take(rest, name=f"{ds.name}-train")
    logger.info(f"Split {ds.name}: {len(train)} train, {len(val)} validation")
    return train, val


def subset(ds: Dataset, n: int) -> Dataset:
    """The first n items"""
    if n < 0:
        raise DatasetError(f"subset size must be non-negative, got {n}")
    return ds.take(np.arange(min(n, len(ds))))
