"""Image datasets: IDX files, block downsampling and synthetic generators."""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IDXDimensionError, IDXFormatError, IDXTruncatedError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64 holding integers in [0, 255]
    labels: np.ndarray | None = None
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, split=None):
        labels = None if self.labels is None else self.labels[index]
        return replace(self, images=self.images[index], labels=labels, split=split or self.split)


def _read_header(buf, path, expected_magic, ndim):
    if len(buf) < 4:
        raise IDXTruncatedError(f"{path}: file too short for an IDX header ({len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IDXFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IDXTruncatedError(f"{path}: header truncated ({len(buf)} of {need} bytes)")
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    return dims, need


def _read_idx(path, magic, ndim):
    path = Path(path)
    buf = path.read_bytes()
    dims, offset = _read_header(buf, path, magic, ndim)
    count = int(np.prod(dims))
    payload = len(buf) - offset
    if payload < count:
        raise IDXTruncatedError(f"{path}: expected {count} data bytes for dims {dims}, found {payload}")
    if payload > count:
        raise IDXDimensionError(f"{path}: {payload} data bytes but dims {dims} account for {count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).reshape(dims)


def load_idx(images_path, labels_path=None, split="train"):
    """Read an MNIST-style IDX image file (and optional label file)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
        if labels.shape[0] != images.shape[0]:
            raise IDXDimensionError(
                f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images"
            )
        labels = labels.astype(np.int64)
    n, h, w = images.shape
    return Dataset(
        images=images.reshape(n, 1, h, w).astype(np.float64),
        labels=labels,
        split=split,
        metadata={"source": str(images_path), "shape": [1, h, w]},
    )


def write_idx(dataset, images_path, labels_path=None):
    """Write a single-channel dataset in IDX format."""
    imgs = dataset.images
    if imgs.shape[1] != 1:
        raise ShapeError(f"IDX images must be single-channel, got {imgs.shape[1]} channels")
    n, _, h, w = imgs.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.asarray(imgs, dtype=np.uint8).tobytes())
    if labels_path is not None:
        if dataset.labels is None:
            raise ValueError("dataset has no labels to write")
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
            fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def downsample(ds, factor):
    """Block-average pooling by ``factor``, rounded half-up to integer pixels."""
    n, c, h, w = ds.images.shape
    if h % factor or w % factor:
        raise ShapeError(f"cannot downsample {h}x{w} by factor {factor}")
    blocks = ds.images.reshape(n, c, h // factor, factor, w // factor, factor)
    pooled = np.floor(blocks.mean(axis=(3, 5)) + 0.5)
    meta = dict(ds.metadata, shape=[c, h // factor, w // factor], downsample=factor)
    return replace(ds, images=pooled, metadata=meta)


def synth_bars(n, size=8, rng=None, split="train"):
    """Images with 1-3 bright horizontal or vertical bars on a dark, mildly noisy background."""
    if size < 4:
        raise ValueError(f"size must be at least 4, got {size}")
    rng = np.random.default_rng(rng)
    images = rng.normal(20.0, 6.0, (n, 1, size, size))
    for i in range(n):
        for _ in range(rng.integers(1, 4)):
            pos = rng.integers(0, size)
            level = rng.uniform(180.0, 240.0)
            if rng.random() < 0.5:
                images[i, 0, pos, :] = level + rng.normal(0.0, 6.0, size)
            else:
                images[i, 0, :, pos] = level + rng.normal(0.0, 6.0, size)
    images = np.clip(np.rint(images), 0, 255)
    return Dataset(images, split=split, metadata={"source": "bars", "shape": [1, size, size]})


def synth_noise(n, size=8, rng=None, split="train"):
    """Uniform random pixels; the incompressible reference for the bars family."""
    rng = np.random.default_rng(rng)
    images = rng.integers(0, 256, (n, 1, size, size)).astype(np.float64)
    return Dataset(images, split=split, metadata={"source": "noise", "shape": [1, size, size]})
