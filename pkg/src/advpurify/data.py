"""Dataset synthesis, train/test splits, and deterministic batching.

There is no network access at desk scale, so the "mnist-like" dataset is
rendered procedurally: each sample is a digit glyph drawn from a stroke
skeleton with a randomized affine transform, stroke thickness, ink level,
and background noise. Everything is a pure function of (name, seed), and
splits are cached on disk as ``<root>/<name>/<split>.bin`` containers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ContainerFormatError, DataCacheError, UnknownDatasetError

GENERATOR_VERSION = 2

_TRAIN_SIZE = 8000
_TEST_SIZE = 2000


@dataclass
class ImageBatch:
    """A batch of images with integer class labels.

    pixels: float32 array of shape (batch, channels, height, width) in [0, 1].
    labels: int64 array of shape (batch,).
    """

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be 4-D (B,C,H,W), got shape {self.pixels.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match batch size {self.pixels.shape[0]}"
            )
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class DatasetSplit:
    """Normalized train/test data plus shape metadata."""

    train: ImageBatch
    test: ImageBatch
    num_classes: int
    image_shape: tuple[int, int, int]


# Stroke skeletons per digit: polylines in a unit box, x right, y down.
# Closed loops are emitted by _ellipse(); open strokes are listed directly.
def _ellipse(cx: float, cy: float, rx: float, ry: float, n: int = 14) -> np.ndarray:
    angles = np.linspace(0.0, 2.0 * math.pi, n + 1)
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


_GLYPHS: dict[int, list[np.ndarray]] = {
    0: [_ellipse(0.5, 0.5, 0.21, 0.32)],
    1: [np.array([(0.34, 0.3), (0.54, 0.15), (0.54, 0.85)])],
    2: [
        np.array(
            [
                (0.29, 0.32),
                (0.35, 0.18),
                (0.5, 0.14),
                (0.66, 0.19),
                (0.7, 0.34),
                (0.6, 0.52),
                (0.3, 0.85),
                (0.72, 0.85),
            ]
        )
    ],
    3: [
        np.array([(0.3, 0.2), (0.48, 0.14), (0.67, 0.22), (0.67, 0.38), (0.48, 0.47)]),
        np.array([(0.48, 0.47), (0.7, 0.55), (0.71, 0.74), (0.5, 0.86), (0.29, 0.78)]),
    ],
    4: [
        np.array([(0.6, 0.15), (0.24, 0.6), (0.78, 0.6)]),
        np.array([(0.62, 0.38), (0.62, 0.86)]),
    ],
    5: [
        np.array(
            [
                (0.69, 0.15),
                (0.33, 0.15),
                (0.31, 0.46),
                (0.54, 0.42),
                (0.69, 0.52),
                (0.7, 0.72),
                (0.52, 0.85),
                (0.3, 0.79),
            ]
        )
    ],
    6: [
        np.array([(0.64, 0.14), (0.45, 0.3), (0.34, 0.5), (0.31, 0.66)]),
        _ellipse(0.5, 0.67, 0.19, 0.17),
    ],
    7: [np.array([(0.28, 0.16), (0.72, 0.16), (0.44, 0.85)])],
    8: [_ellipse(0.5, 0.31, 0.17, 0.16), _ellipse(0.5, 0.66, 0.2, 0.18)],
    9: [
        _ellipse(0.5, 0.32, 0.19, 0.17),
        np.array([(0.69, 0.34), (0.67, 0.6), (0.58, 0.85)]),
    ],
}


def _segments_for(digit: int, rng: np.random.Generator) -> np.ndarray:
    """Affine-jittered stroke segments for one glyph, in unit coordinates."""
    theta = rng.uniform(-0.22, 0.22)
    shear = rng.uniform(-0.15, 0.15)
    sx, sy = rng.uniform(0.86, 1.1, size=2)
    tx, ty = rng.uniform(-0.05, 0.05, size=2)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # rotation @ shear @ scale, applied around the glyph center
    mat = np.array(
        [
            [cos_t * sx + (-sin_t) * shear * sx, -sin_t * sy],
            [sin_t * sx + cos_t * shear * sx, cos_t * sy],
        ]
    )
    segs = []
    for line in _GLYPHS[digit]:
        pts = (line - 0.5) @ mat.T + 0.5 + np.array([tx, ty])
        segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
    return np.concatenate(segs, axis=0)  # (num_segments, 2, 2)


def _render_glyph(digit: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one digit via a signed-distance field; returns (size, size) in [0,1]."""
    segs = _segments_for(digit, rng) * size
    coords = (np.arange(size) + 0.5).astype(np.float64)
    px = np.stack(np.meshgrid(coords, coords, indexing="xy"), axis=-1)  # (H, W, 2), (x, y)
    pix = px.reshape(-1, 1, 2)  # (P, 1, 2)

    a = segs[:, 0]  # (S, 2)
    ab = segs[:, 1] - segs[:, 0]
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = np.clip(((pix - a) * ab).sum(axis=2) / denom, 0.0, 1.0)  # (P, S)
    nearest = a + t[..., None] * ab
    dist = np.sqrt(((pix - nearest) ** 2).sum(axis=2)).min(axis=1)  # (P,)

    thickness = rng.uniform(0.95, 1.7) * size / 28.0
    softness = 0.75 * size / 28.0
    ink = rng.uniform(0.78, 1.0)
    img = ink * np.clip((thickness - dist) / softness + 0.5, 0.0, 1.0)
    img = img.reshape(size, size)
    img += rng.normal(0.0, 0.005, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _synthesize(name: str, seed: int, total: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``total`` samples; returns (pixels (N,C,H,W) float32, labels (N,) int64)."""
    if name == "mnist-like":
        channels, size = 1, 28
    elif name == "mnist-like-rgb":
        channels, size = 3, 32
    else:
        raise UnknownDatasetError(f"unknown dataset {name!r}; supported: mnist-like, mnist-like-rgb")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, GENERATOR_VERSION])))
    labels = rng.integers(0, 10, size=total, dtype=np.int64)
    pixels = np.empty((total, channels, size, size), dtype=np.float32)
    for i in range(total):
        gray = _render_glyph(int(labels[i]), size, rng)
        if channels == 1:
            pixels[i, 0] = gray
        else:
            tint = rng.uniform(0.55, 1.0, size=3)
            pixels[i] = np.clip(gray[None, :, :] * tint[:, None, None], 0.0, 1.0)
    return pixels, labels


def _split_path(root: str | Path, name: str, which: str) -> Path:
    return Path(root) / name / f"{which}.bin"


def load_dataset(name: str, root: str | Path, seed: int) -> DatasetSplit:
    """Load (or synthesize and cache) a dataset split.

    Identical (name, seed) yields identical splits. A cache written with a
    different seed is regenerated; a corrupt cache file raises DataCacheError.
    """
    if name not in ("mnist-like", "mnist-like-rgb"):
        raise UnknownDatasetError(f"unknown dataset {name!r}; supported: mnist-like, mnist-like-rgb")

    parts: dict[str, ImageBatch] = {}
    image_shape: tuple[int, int, int] | None = None
    cached = _read_cache(name, root, seed)
    if cached is not None:
        parts, image_shape = cached
    else:
        pixels, labels = _synthesize(name, seed, _TRAIN_SIZE + _TEST_SIZE)
        parts["train"] = ImageBatch(pixels[:_TRAIN_SIZE], labels[:_TRAIN_SIZE])
        parts["test"] = ImageBatch(pixels[_TRAIN_SIZE:], labels[_TRAIN_SIZE:])
        image_shape = tuple(pixels.shape[1:])
        meta = {
            "dataset": name,
            "seed": seed,
            "generator_version": GENERATOR_VERSION,
            "num_classes": 10,
            "image_shape": list(image_shape),
        }
        for which, batch in parts.items():
            write_container(
                _split_path(root, name, which),
                "dataset-split",
                meta | {"split": which},
                {"pixels": batch.pixels, "labels": batch.labels},
            )

    assert image_shape is not None
    return DatasetSplit(parts["train"], parts["test"], num_classes=10, image_shape=image_shape)


def _read_cache(
    name: str, root: str | Path, seed: int
) -> tuple[dict[str, ImageBatch], tuple[int, int, int]] | None:
    paths = {which: _split_path(root, name, which) for which in ("train", "test")}
    if not all(p.exists() for p in paths.values()):
        return None
    parts: dict[str, ImageBatch] = {}
    image_shape: tuple[int, int, int] | None = None
    for which, path in paths.items():
        try:
            _, meta, arrays = read_container(path, expected_kind="dataset-split")
        except ContainerFormatError as exc:
            raise DataCacheError(f"corrupt dataset cache {path}: {exc}") from exc
        if meta.get("seed") != seed or meta.get("generator_version") != GENERATOR_VERSION:
            return None  # stale cache: regenerate
        parts[which] = ImageBatch(arrays["pixels"], arrays["labels"])
        image_shape = tuple(meta["image_shape"])
    assert image_shape is not None
    return parts, image_shape


def batches(
    split: DatasetSplit, which: str, batch_size: int, seed: int
) -> list[ImageBatch]:
    """Split one side of the dataset into shuffled batches.

    The union of batches covers the split exactly once; the last batch may
    be smaller. Ordering is a pure function of the seed.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if which not in ("train", "test"):
        raise ValueError(f"which must be 'train' or 'test', got {which!r}")
    data = split.train if which == "train" else split.test
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(data))
    return [
        ImageBatch(data.pixels[idx], data.labels[idx])
        for idx in (order[i:i + batch_size] for i in range(0, len(order), batch_size))
    ]


def take_subset(batch: ImageBatch, n: int, seed: int) -> ImageBatch:
    """A deterministic random subset of at most n items."""
    n = min(n, len(batch))
    idx = np.random.Generator(np.random.PCG64(seed)).permutation(len(batch))[:n]
    return ImageBatch(batch.pixels[idx], batch.labels[idx])
