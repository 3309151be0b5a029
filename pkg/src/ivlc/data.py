"""Dataset ingestion and generation.

Covers the IDX binary format (big-endian magic and dimension headers,
unsigned byte payload), affine pixel normalization with an inverse-exact
record, two synthetic corpora (Gaussian blobs and rendered digits), and
deterministic batching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "Dataset",
    "load_mnist_idx",
    "write_mnist_idx",
    "normalize",
    "raw_bytes",
    "synthetic_blobs",
    "synthetic_digits",
    "batch_iterator",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Immutable example/label store.

    ``X`` is [n, features] or [n, C, H, W] float32. ``norm`` records the
    (lo, hi) range raw bytes were mapped onto, or None for raw/unnormalized
    data; attack clip ranges are read from it.
    """

    X: np.ndarray
    y: np.ndarray
    k: int
    norm: Optional[tuple] = None

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(
                f"{self.X.shape[0]} examples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise ValidationError(f"labels must lie in 0..{self.k - 1}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def take(self, n: int) -> "Dataset":
        """First n examples, order preserved."""
        if n > self.n:
            raise ValidationError(f"requested {n} examples, dataset has {self.n}")
        return replace(self, X=self.X[:n], y=self.y[:n])

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.X.shape[1:]))


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ParseError(f"truncated IDX file: expected {count} bytes of {what}, "
                         f"got {len(buf)}")
    return buf


def load_mnist_idx(image_path: str, label_path: str,
                   limit: Optional[int] = None) -> Dataset:
    """Parse an IDX image/label file pair into a raw (0..255) dataset.

    ``limit`` keeps only the first ``limit`` examples.
    """
    with open(image_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ParseError(f"bad image magic 0x{magic:08x} in {image_path}, "
                             f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(f, n * rows * cols, "pixels"), dtype=np.uint8)
        if f.read(1):
            raise ParseError(f"trailing bytes after {n} images in {image_path}")
    with open(label_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise ParseError(f"bad label magic 0x{magic:08x} in {label_path}, "
                             f"expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, n_labels, "labels"), dtype=np.uint8)
        if f.read(1):
            raise ParseError(f"trailing bytes after {n_labels} labels in {label_path}")
    if n != n_labels:
        raise ParseError(f"{n} images but {n_labels} labels")
    X = pixels.reshape(n, 1, rows, cols).astype(np.float32)
    y = labels.astype(np.int64)
    ds = Dataset(X=X, y=y, k=10, norm=None)
    return ds.take(limit) if limit is not None else ds


def write_mnist_idx(data: Dataset, image_path: str, label_path: str) -> None:
    """Write a raw dataset back to an IDX image/label pair, bit-exact."""
    if data.norm is not None:
        raise ValidationError("write_mnist_idx expects raw (unnormalized) data")
    X = data.X
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValidationError(f"expected [n,1,H,W] images, got shape {X.shape}")
    n, _, rows, cols = X.shape
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.rint(X).astype(np.uint8).tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(data.y.astype(np.uint8).tobytes())


def normalize(data: Dataset, lo: float, hi: float) -> Dataset:
    """Affine map of the raw byte range [0, 255] onto [lo, hi]."""
    if hi <= lo:
        raise ValidationError(f"normalize needs hi > lo, got [{lo}, {hi}]")
    if data.norm is not None:
        raise ValidationError(f"dataset already normalized to {data.norm}")
    X = (data.X * np.float32((hi - lo) / 255.0) + np.float32(lo))
    return replace(data, X=X, norm=(float(lo), float(hi)))


def raw_bytes(data: Dataset) -> np.ndarray:
    """Invert normalization back to exact 0..255 integer bytes."""
    if data.norm is None:
        return np.rint(data.X).astype(np.uint8)
    lo, hi = data.norm
    return np.rint((data.X - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def synthetic_blobs(k: int, n_per_class: int, dim: int, spread: float, seed: int,
                    centers: Optional[np.ndarray] = None) -> Dataset:
    """Gaussian clusters at seeded random centers, shuffled example order."""
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if dim < 2:
        raise ValidationError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.uniform(-2.0, 2.0, size=(k, dim))
    else:
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape != (k, dim):
            raise ValidationError(f"centers shape {centers.shape} != ({k}, {dim})")
    X = np.concatenate([
        centers[c] + spread * rng.standard_normal((n_per_class, dim))
        for c in range(k)
    ]).astype(np.float32)
    y = np.repeat(np.arange(k, dtype=np.int64), n_per_class)
    order = rng.permutation(k * n_per_class)
    return Dataset(X=X[order], y=y[order], k=k, norm=None)


# ---------------------------------------------------------------------------
# rendered digits: an offline stand-in with MNIST's shape and value range
# ---------------------------------------------------------------------------

# Stroke templates on a [0,1]^2 canvas, one list of polylines per digit.
def _ellipse(cx, cy, rx, ry, n=14):
    ts = np.linspace(0, 2 * np.pi, n + 1)
    return [(cx + rx * np.sin(t), cy - ry * np.cos(t)) for t in ts]


_DIGIT_STROKES = {
    0: [_ellipse(0.50, 0.50, 0.24, 0.36)],
    1: [[(0.34, 0.28), (0.54, 0.12), (0.54, 0.88)], [(0.36, 0.88), (0.70, 0.88)]],
    2: [[(0.28, 0.28), (0.36, 0.14), (0.58, 0.12), (0.70, 0.26), (0.66, 0.42),
         (0.28, 0.86), (0.74, 0.86)]],
    3: [[(0.28, 0.18), (0.52, 0.12), (0.68, 0.26), (0.52, 0.46), (0.70, 0.64),
         (0.56, 0.86), (0.28, 0.82)]],
    4: [[(0.62, 0.12), (0.26, 0.62), (0.78, 0.62)], [(0.62, 0.12), (0.62, 0.90)]],
    5: [[(0.70, 0.12), (0.32, 0.12), (0.30, 0.46), (0.58, 0.42), (0.72, 0.60),
         (0.66, 0.82), (0.34, 0.88)]],
    6: [[(0.62, 0.10), (0.40, 0.26), (0.30, 0.56), (0.36, 0.82), (0.58, 0.88),
         (0.70, 0.70), (0.60, 0.52), (0.34, 0.58)]],
    7: [[(0.26, 0.12), (0.76, 0.12), (0.46, 0.88)]],
    8: [_ellipse(0.50, 0.30, 0.18, 0.19), _ellipse(0.50, 0.70, 0.22, 0.21)],
    9: [_ellipse(0.58, 0.32, 0.18, 0.20), [(0.76, 0.32), (0.70, 0.62), (0.52, 0.88)]],
}


def _render_strokes(polylines, size: int, radius: float) -> np.ndarray:
    """Rasterize polylines with soft strokes of the given radius."""
    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords)  # py rows, px cols
    canvas = np.zeros((size, size))
    soft = 0.035
    for line in polylines:
        pts = np.asarray(line)
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            dx, dy = bx - ax, by - ay
            seg_len2 = dx * dx + dy * dy
            if seg_len2 == 0:
                t = 0.0
            else:
                t = np.clip(((px - ax) * dx + (py - ay) * dy) / seg_len2, 0.0, 1.0)
            dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
            canvas = np.maximum(canvas, np.clip(1.0 - (dist - radius) / soft, 0.0, 1.0))
    return canvas


def _transform(polylines, rng) -> list:
    """Random rotation/scale about the canvas center."""
    angle = rng.uniform(-0.30, 0.30)
    sx = rng.uniform(0.85, 1.12)
    sy = rng.uniform(0.85, 1.12)
    ca, sa = np.cos(angle), np.sin(angle)
    out = []
    for line in polylines:
        pts = np.asarray(line) - 0.5
        pts = pts * [sx, sy]
        pts = pts @ np.array([[ca, -sa], [sa, ca]]).T
        out.append(pts + 0.5)
    return out


def synthetic_digits(n: int, seed: int, size: int = 28, variants: int = 60,
                     max_shift: int = 2, noise: float = 0.03,
                     stroke: tuple = (0.040, 0.065),
                     haze: float = 0.30) -> Dataset:
    """Procedurally rendered digit images: [n, 1, size, size] in [0, 1].

    Each example is a randomly rotated/scaled stroke rendering of its digit,
    integer-shifted by up to ``max_shift`` pixels, screen-blended with a
    random background haze field (per-image amplitude up to ``haze``, the
    paper-brightness variation of a scanned page), and overlaid with Gaussian
    pixel noise. ``stroke`` bounds the stroke radius draw. Fully
    deterministic per seed; no files involved.
    """
    rng = np.random.default_rng(seed)
    pool = np.empty((10, variants, size, size), dtype=np.float32)
    for digit in range(10):
        for v in range(variants):
            radius = rng.uniform(*stroke)
            pool[digit, v] = _render_strokes(
                _transform(_DIGIT_STROKES[digit], rng), size, radius)
    y = rng.integers(0, 10, size=n).astype(np.int64)
    picks = rng.integers(0, variants, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    intensity = rng.uniform(0.70, 1.00, size=n).astype(np.float32)
    X = np.zeros((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        img = pool[y[i], picks[i]] * intensity[i]
        dy, dx = shifts[i]
        shifted = np.zeros_like(img)
        src_r = slice(max(0, -dy), size - max(0, dy))
        dst_r = slice(max(0, dy), size - max(0, -dy))
        src_c = slice(max(0, -dx), size - max(0, dx))
        dst_c = slice(max(0, dx), size - max(0, -dx))
        shifted[dst_r, dst_c] = img[src_r, src_c]
        if haze > 0.0:
            amp = rng.uniform(0.0, haze)
            field = rng.uniform(0.0, amp, size=shifted.shape).astype(np.float32)
            shifted += field * (1.0 - shifted)
        X[i, 0] = shifted
    X += rng.normal(0.0, noise, size=X.shape).astype(np.float32)
    np.clip(X, 0.0, 1.0, out=X)
    return Dataset(X=X, y=y, k=10, norm=(0.0, 1.0))


def batch_iterator(data: Dataset, batch_size: int, shuffle: bool,
                   seed: int = 0) -> Iterator[tuple]:
    """Yield (X, y) batches covering every example exactly once.

    The final batch may be short. Shuffle order is seeded.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = (np.random.default_rng(seed).permutation(data.n) if shuffle
             else np.arange(data.n))
    for start in range(0, data.n, batch_size):
        idx = order[start:start + batch_size]
        yield data.X[idx], data.y[idx]
