"""Dataset file format, synthetic shape generator, and noise OOD sets.

The on-disk format is little-endian: magic ``AMIX``, then u32 version, count,
channels, height, width, class count; then count * c * h * w float32 pixels
in [0, 1]; then count u32 class indices. The reader rejects files whose byte
length disagrees with the header and payloads violating the range invariants.

The synthetic set renders k classes of geometric primitives with pose,
scale, and intensity jitter plus pixel noise, deterministically from a seed;
the train and test splits draw from disjoint seed streams.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"AMIX"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset: float32 images (n, c, h, w) in [0,1], integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (n, c, h, w)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one index per image")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if (labels < 0).any() or (labels >= num_classes).any():
        raise ValueError("label index out of range")
    return np.eye(num_classes, dtype=dtype)[labels]


def atomic_write_bytes(path: str, payload: bytes):
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_dataset(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    if (images < 0).any() or (images > 1).any():
        raise ValueError("pixels must lie in [0, 1]")
    labels = np.ascontiguousarray(ds.labels, dtype="<u4")
    if (ds.labels < 0).any() or (ds.labels >= ds.num_classes).any():
        raise ValueError("labels must be < num_classes")
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes)
    return header + images.tobytes() + labels.tobytes()


def save_dataset(path: str, ds: Dataset):
    atomic_write_bytes(path, encode_dataset(ds))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, c, h, w, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + n * c * h * w * 4 + n * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    pixels = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=_HEADER.size + pixels.nbytes)
    images = pixels.reshape(n, c, h, w).astype(np.float32)
    if (images < 0).any() or (images > 1).any():
        raise ValueError(f"{path}: pixel values outside [0, 1]")
    labels = labels.astype(np.int64)
    if (labels >= k).any():
        raise ValueError(f"{path}: label index >= class count {k}")
    return Dataset(images=images, labels=labels, num_classes=int(k))


# -- synthetic shapes ---------------------------------------------------------


def _rotate(xx, yy, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * xx + s * yy, -s * xx + c * yy


def _shape_mask(kind: int, xx, yy, s: float, theta: float) -> np.ndarray:
    u, v = _rotate(xx, yy, theta)
    au, av = np.abs(u), np.abs(v)
    dist = np.sqrt(u * u + v * v)
    if kind == 0:    # disk
        return dist <= s
    if kind == 1:    # filled square
        return np.maximum(au, av) <= 0.85 * s
    if kind == 2:    # plus
        return ((au <= 0.3 * s) & (av <= s)) | ((av <= 0.3 * s) & (au <= s))
    if kind == 3:    # ring
        return (dist <= s) & (dist >= 0.55 * s)
    if kind == 4:    # triangle, apex up
        return (v >= -0.62 * s) & (v + 2.0 * au <= 0.75 * s)
    if kind == 5:    # diamond
        return au + av <= 1.05 * s
    if kind == 6:    # horizontal bar
        return (av <= 0.32 * s) & (au <= 1.05 * s)
    if kind == 7:    # vertical bar
        return (au <= 0.32 * s) & (av <= 1.05 * s)
    if kind == 8:    # diagonal cross
        return (np.abs(au - av) <= 0.28 * s) & (np.maximum(au, av) <= 1.05 * s)
    if kind == 9:    # 2x2 checker
        return ((u > 0) ^ (v > 0)) & (np.maximum(au, av) <= 0.9 * s)
    if kind == 10:   # hollow square frame
        m = np.maximum(au, av)
        return (m <= s) & (m >= 0.6 * s)
    if kind == 11:   # two dots
        d1 = np.sqrt((u - 0.55 * s) ** 2 + v * v)
        d2 = np.sqrt((u + 0.55 * s) ** 2 + v * v)
        return (d1 <= 0.42 * s) | (d2 <= 0.42 * s)
    if kind == 12:   # half disk
        return (dist <= 1.05 * s) & (v >= 0.05 * s)
    if kind == 13:   # corner L
        return ((u <= -0.35 * s) & (au <= s) & (av <= s)) | \
               ((v >= 0.35 * s) & (av <= s) & (au <= s))
    if kind == 14:   # diagonal stripes in a disk
        return (np.mod(u + v, 0.9 * s) <= 0.45 * s) & (dist <= 1.1 * s)
    if kind == 15:   # 2x2 dot grid
        gu = np.abs(au - 0.5 * s)
        gv = np.abs(av - 0.5 * s)
        return np.sqrt(gu * gu + gv * gv) <= 0.3 * s
    raise ValueError(f"no shape class {kind}")


# Shapes whose silhouettes alias into each other under large rotation
# (square vs diamond, plus vs diagonal cross) keep jitter within +/-18 deg.
_FULL_ROTATION = {0, 3, 11, 12, 15}


# Render jitter ranges. Chosen so a nearest-centroid baseline clearly beats
# chance while a small clean-only net still generalizes imperfectly (the
# regime where mixup regularization is visible at desk scale).
CENTER_JITTER = 0.11
SCALE_RANGE = (0.70, 1.16)
FG_RANGE = (0.60, 1.0)
BG_RANGE = (0.05, 0.30)
PIXEL_NOISE = 0.06


def _render_shapes(num_classes: int, count: int, image_size: int,
                   rng: np.random.Generator) -> Dataset:
    half = (image_size - 1) / 2.0
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    xx -= half
    yy -= half
    images = np.empty((count, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        kind = i % num_classes
        cx = rng.uniform(-CENTER_JITTER, CENTER_JITTER) * image_size
        cy = rng.uniform(-CENTER_JITTER, CENTER_JITTER) * image_size
        scale = rng.uniform(*SCALE_RANGE) * 0.30 * image_size
        theta = rng.uniform(0, 2 * np.pi) if kind in _FULL_ROTATION \
            else rng.uniform(-np.pi / 10, np.pi / 10)
        fg = rng.uniform(*FG_RANGE)
        bg = rng.uniform(*BG_RANGE)
        noise = rng.normal(0.0, PIXEL_NOISE, size=(image_size, image_size))
        mask = _shape_mask(kind, xx - cx, yy - cy, scale, theta)
        img = bg + (fg - bg) * mask + noise
        images[i, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = kind
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def generate_shapes(num_classes: int, train_count: int, test_count: int,
                    image_size: int, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic train/test shape datasets from disjoint seed streams."""
    if not 2 <= num_classes <= 16:
        raise ValueError("num_classes must lie in 2..16")
    if image_size not in (16, 32):
        raise ValueError("image_size must be 16 or 32")
    if train_count < 1 or test_count < 1:
        raise ValueError("counts must be positive")
    train = _render_shapes(num_classes, train_count, image_size,
                           np.random.default_rng([seed, 0]))
    test = _render_shapes(num_classes, test_count, image_size,
                          np.random.default_rng([seed, 1]))
    return train, test


# -- noise OOD sets -------------------------------------------------------------


def uniform_noise_dataset(count: int, image_shape: tuple[int, int, int],
                          seed: int) -> Dataset:
    """Pixels drawn from U(0, 1)."""
    rng = np.random.default_rng([seed, 2])
    images = rng.random((count, *image_shape)).astype(np.float32)
    return Dataset(images=images, labels=np.zeros(count, dtype=np.int64), num_classes=2)


def gaussian_noise_dataset(count: int, image_shape: tuple[int, int, int],
                           seed: int) -> Dataset:
    """Pixels drawn from N(0.5, 0.5), clipped to [0, 1] to stay in the input domain."""
    rng = np.random.default_rng([seed, 3])
    images = rng.normal(0.5, 0.5, size=(count, *image_shape))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=np.zeros(count, dtype=np.int64), num_classes=2)
