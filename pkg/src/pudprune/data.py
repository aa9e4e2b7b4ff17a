"""Dataset ingestion, resizing, augmentation, synthetic data and minibatches."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, SizeError
from .losses import TeacherOutput

CIFAR_RECORD = 3073
CFTD_MAGIC = b"CFTD"
CFTD_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise DataError("labeled dataset needs N >= 1 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count)


@dataclass
class UnlabeledDataset:
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise DataError("unlabeled images must be [N, C, H, W]")

    def __len__(self):
        return len(self.images)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3)) + 1e-8


# ----------------------------------------------------------------------------
# CIFAR-10 binary batches

def load_cifar10(path, mean=None, std=None) -> LabeledDataset:
    """Read 3073-byte records: one label byte then 3x32x32 channel-major pixels.

    Pixels are scaled to [0, 1]; if ``mean``/``std`` are given they are
    applied per channel afterwards.
    """
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if mean is not None:
        images = (images - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return LabeledDataset(images, labels, 10)


def write_cifar10(path, dataset: LabeledDataset) -> None:
    """Quantize [0, 1] images to bytes and write CIFAR-10 records."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise SizeError("CIFAR-10 records hold 3x32x32 images")
    if dataset.labels.max() > 9:
        raise FormatError("CIFAR-10 records hold labels 0..9")
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    out = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = pix.reshape(len(dataset), -1)
    Path(path).write_bytes(out.tobytes())


# ----------------------------------------------------------------------------
# raw tensor files

def write_tensor_file(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f8")
    header = CFTD_MAGIC + struct.pack("<II", CFTD_VERSION, a.ndim)
    header += struct.pack("<" + "I" * a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CFTD_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != CFTD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    end = 12 + 4 * rank
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from("<" + "I" * rank, raw, 12)
    n = int(np.prod(dims)) if rank else 1
    if len(raw) != end + 8 * n:
        raise FormatError(f"{path}: payload holds {len(raw) - end} bytes, expected {8 * n}")
    return np.frombuffer(raw, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def load_tensor_file(path, target_hw: tuple[int, int] | None = None) -> UnlabeledDataset:
    arr = read_tensor_file(path)
    if arr.ndim != 4:
        raise FormatError(f"{path}: unlabeled images must be rank 4, got rank {arr.ndim}")
    if target_hw is not None and arr.shape[2:] != tuple(target_hw):
        arr = resize_bilinear(arr, target_hw)
    return UnlabeledDataset(arr)


# ----------------------------------------------------------------------------
# image transforms

def _axis_weights(src: int, dst: int):
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(images: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of an [N, C, H, W] batch."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise SizeError("target size must be at least 1x1")
    images = np.asarray(images, dtype=np.float64)
    h, w = images.shape[-2:]
    if (h, w) == (th, tw):
        return images.copy()
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    top = images[..., y0, :] * (1 - fy)[:, None] + images[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Zero-pad, take a random crop of the original size, flip with p=0.5."""
    c, h, w = image.shape
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    flip = rng.random() < 0.5
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, oy:oy + h, ox:ox + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    return np.stack([augment(im, rng, pad) for im in images]) if len(images) else images.copy()


# ----------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("disk", "ring", "square", "cross", "hbars", "vbars", "triangle", "diamond",
          "frame", "xcross")


def _shape_mask(kind: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    d = np.sqrt(dy ** 2 + dx ** 2)
    ady, adx = np.abs(dy), np.abs(dx)
    inside = (ady < r) & (adx < r)
    if kind == "disk":
        return d < r
    if kind == "ring":
        return (d < r) & (d > 0.55 * r)
    if kind == "square":
        return (ady < 0.8 * r) & (adx < 0.8 * r)
    if kind == "cross":
        return inside & ((ady < 0.3 * r) | (adx < 0.3 * r))
    if kind == "hbars":
        return inside & (np.floor((dy + r) / (0.5 * r)) % 2 == 0)
    if kind == "vbars":
        return inside & (np.floor((dx + r) / (0.5 * r)) % 2 == 0)
    if kind == "triangle":
        return (dy < 0.8 * r) & (dy > -r) & (adx < (dy + r) * 0.55)
    if kind == "diamond":
        return ady + adx < r
    if kind == "frame":
        return inside & ((ady > 0.6 * r) | (adx > 0.6 * r))
    return inside & ((np.abs(dy - dx) < 0.3 * r) | (np.abs(dy + dx) < 0.3 * r))


def _strokes(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, count: int):
    """Masks and colours of ``count`` random line segments (clutter)."""
    size = yy.shape[0]
    for _ in range(count):
        p0 = rng.uniform(0, size, size=2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(0.3, 0.8) * size
        uy, ux = np.sin(ang), np.cos(ang)
        t = np.clip((yy - p0[0]) * uy + (xx - p0[1]) * ux, 0, length)
        d = np.hypot(yy - p0[0] - t * uy, xx - p0[1] - t * ux)
        yield (d < 1.0).astype(np.float64), rng.uniform(0.0, 1.0, size=3)


def _draw(rng: np.random.Generator, labels: np.ndarray, size: int, shift: float,
          noise: float, clutter: int = 3, rotation: float = 0.5) -> np.ndarray:
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, 3, size, size))
    jitter = size * 0.2
    # the shifted pool is displaced, brighter and lower in contrast
    contrast = 1.0 - 0.7 * shift
    for i, k in enumerate(labels):
        r = rng.uniform(0.2, 0.34) * size
        cy, cx = size / 2 + rng.uniform(-jitter, jitter, size=2) + shift * size * 0.3
        th = rng.uniform(-rotation, rotation)
        c, s = np.cos(th), np.sin(th)
        dy, dx = yy - cy, xx - cx
        mask = _shape_mask(SHAPES[k], c * dy - s * dx, s * dy + c * dx, r).astype(np.float64)
        fg = rng.uniform(0.35, 1.0, size=3)
        bg = rng.uniform(0.0, 0.35, size=3)
        img = np.repeat(bg[:, None, None], size * size, axis=1).reshape(3, size, size)
        for m, col in _strokes(rng, yy, xx, clutter):
            img = img * (1 - m[None]) + col[:, None, None] * m[None]
        img = img * (1 - mask[None]) + (bg + contrast * (fg - bg))[:, None, None] * mask[None]
        img += rng.normal(0.0, noise, size=img.shape) + 0.5 * shift
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def synth_generate(seed: int, K: int, n_labeled: int, n_unlabeled: int, bias_shift: float,
                   n_test: int = 1000, size: int = 32, noise: float = 0.2, clutter: int = 3,
                   rotation: float = 0.5):
    """Class-conditional shape images over random line clutter; the
    unlabeled pool is drawn from the same classes but brightened, lowered
    in contrast and displaced according to ``bias_shift``.

    Returns ``(labeled, unlabeled, test)``; labeled and test share the
    unshifted distribution.
    """
    if not 2 <= K <= len(SHAPES):
        raise DataError(f"K must lie in [2, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    y_l = rng.integers(0, K, size=n_labeled)
    y_u = rng.integers(0, K, size=n_unlabeled)
    y_t = rng.integers(0, K, size=n_test)
    opts = dict(noise=noise, clutter=clutter, rotation=rotation)
    labeled = LabeledDataset(_draw(rng, y_l, size, 0.0, **opts), y_l, K) if n_labeled else None
    unlabeled = UnlabeledDataset(_draw(rng, y_u, size, bias_shift, **opts)
                                 .reshape(-1, 3, size, size))
    test = LabeledDataset(_draw(rng, y_t, size, 0.0, **opts), y_t, K) if n_test else None
    return labeled, unlabeled, test


# ----------------------------------------------------------------------------
# minibatches

@dataclass
class Batch:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    teacher_labeled: TeacherOutput | None
    teacher_unlabeled: TeacherOutput | None

    @property
    def n_labeled(self) -> int:
        return len(self.y_labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.x_unlabeled)

    @property
    def size(self) -> int:
        return self.n_labeled + self.n_unlabeled


def sample_minibatch(labeled: LabeledDataset, unlabeled: UnlabeledDataset | None,
                     sizes: tuple[int, int], teacher, rng: np.random.Generator,
                     tau: float = 3.0, augment_images: bool = True,
                     confidence_tau: float | None = None) -> Batch:
    """Uniform sampling with replacement; the teacher (any object with
    ``predict(images)`` returning logits, or None) scores every example."""
    n_l, n_u = sizes
    if n_l > 0 and (labeled is None or len(labeled) == 0):
        raise DataError("labeled pool is empty")
    if n_u > 0 and (unlabeled is None or len(unlabeled) == 0):
        raise DataError("unlabeled pool is empty")
    if n_l + n_u < 1:
        raise DataError("minibatch must hold at least one example")
    idx_l = rng.integers(0, len(labeled), size=n_l) if n_l else np.zeros(0, np.int64)
    idx_u = rng.integers(0, len(unlabeled), size=n_u) if n_u else np.zeros(0, np.int64)
    shape = labeled.images.shape[1:] if labeled is not None else unlabeled.images.shape[1:]
    x_l = labeled.images[idx_l] if n_l else np.zeros((0,) + shape)
    y_l = labeled.labels[idx_l] if n_l else np.zeros(0, np.int64)
    x_u = unlabeled.images[idx_u] if n_u else np.zeros((0,) + shape)
    if augment_images:
        x_l, x_u = augment_batch(x_l, rng), augment_batch(x_u, rng)
    t_l = t_u = None
    if teacher is not None:
        logits = teacher.predict(np.concatenate([x_l, x_u]))
        t_l = TeacherOutput.from_logits(logits[:n_l], tau, confidence_tau)
        t_u = TeacherOutput.from_logits(logits[n_l:], tau, confidence_tau)
    return Batch(x_l, y_l, x_u, t_l, t_u)
