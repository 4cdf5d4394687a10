"""Dataset ingestion: IDX (MNIST), CIFAR-10 binary, and an offline stand-in corpus.

``load_mnist`` consumes the standard IDX pair (magic 0x00000803 for images,
0x00000801 for labels, big-endian dimensions), with or without gzip.

Because this simulator must run on machines with no dataset access,
``build_synthetic_corpus`` renders a deterministic handwritten-digit-like
corpus (28x28, 10 classes, 60k/10k by default) and writes it as real IDX
files, so the exact same loader path is exercised either way. The corpus is
procedurally drawn from per-digit stroke templates under random affine
warps, point jitter, stroke-width variation and pixel noise.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    """Images in [0, 1] plus integer labels."""

    images: np.ndarray  # (N, H, W) or (N, H, W, C), float32
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.name}: {self.images.shape[0]} images vs {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, n: int) -> "Dataset":
        """First n records, deterministically."""
        return Dataset(self.images[:n], self.labels[:n], self.name)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.labels[:n_first], self.name),
                Dataset(self.images[n_first:], self.labels[n_first:], self.name))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _resolve(dirpath: Path, stem: str) -> Path:
    for cand in (dirpath / stem, dirpath / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DataError(f"missing IDX file {stem}[.gz] in {dirpath}")


def read_idx_images(path: Path) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 16:
        raise DataError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IMAGE_MAGIC:08x}")
    expect = 16 + n * rows * cols
    if len(buf) != expect:
        raise DataError(f"{path}: expected {expect} bytes for {n} images, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 8:
        raise DataError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{LABEL_MAGIC:08x}")
    if len(buf) != 8 + n:
        raise DataError(f"{path}: expected {8 + n} bytes for {n} labels, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def load_mnist(dirpath) -> tuple[Dataset, Dataset]:
    """Load the MNIST IDX pair from a directory; pixels scaled to [0, 1]."""
    d = Path(dirpath)
    out = []
    for split in ("train", "test"):
        images = read_idx_images(_resolve(d, MNIST_FILES[f"{split}_images"]))
        labels = read_idx_labels(_resolve(d, MNIST_FILES[f"{split}_labels"]))
        if images.shape[0] != labels.shape[0]:
            raise DataError(
                f"{split}: image count {images.shape[0]} != label count {labels.shape[0]}")
        if labels.size and labels.max() > 9:
            raise DataError(f"{split}: label value {labels.max()} out of range 0-9")
        out.append(Dataset(images.astype(np.float32) / 255.0,
                           labels.astype(np.int64), f"mnist-{split}"))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixels
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    buf = path.read_bytes()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD != 0:
        raise DataError(f"{path}: size {len(buf)} is not a multiple of record length {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() > 9:
        raise DataError(f"{path}: label value {labels.max()} out of range 0-9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)  # to HWC
    return images, labels


def load_cifar10(dirpath, subset: int | None = None) -> tuple[Dataset, Dataset]:
    """Load CIFAR-10 binary batches; ``subset`` keeps the first n train records."""
    d = Path(dirpath)
    ims, labs = [], []
    for fname in CIFAR_TRAIN_FILES:
        p = d / fname
        if not p.exists():
            raise DataError(f"missing CIFAR-10 batch {p}")
        i, l = _read_cifar_file(p)
        ims.append(i)
        labs.append(l)
    train_im = np.concatenate(ims)
    train_lab = np.concatenate(labs)
    if subset is not None:
        train_im, train_lab = train_im[:subset], train_lab[:subset]
    test_im, test_lab = _read_cifar_file(d / CIFAR_TEST_FILE)
    mk = lambda im, lab, name: Dataset(im.astype(np.float32) / 255.0, lab.astype(np.int64), name)
    return mk(train_im, train_lab, "cifar10-train"), mk(test_im, test_lab, "cifar10-test")


# ---------------------------------------------------------------------------
# Synthetic digit corpus (offline MNIST stand-in)
# ---------------------------------------------------------------------------

# Stroke templates per digit: list of variants, each a list of polylines,
# each polyline a list of (x, y) points in the unit square (y grows down).


def _ellipse(cx, cy, rx, ry, n=14, a0=0.0, a1=2 * np.pi, closed=True):
    t = np.linspace(a0, a1, n, endpoint=not closed)
    pts = [(cx + rx * np.sin(a), cy - ry * np.cos(a)) for a in t]
    if closed:
        pts.append(pts[0])
    return pts


_TEMPLATES: dict[int, list[list[list[tuple[float, float]]]]] = {
    0: [
        [_ellipse(0.5, 0.5, 0.21, 0.32)],
        [_ellipse(0.5, 0.5, 0.17, 0.33), [(0.42, 0.62), (0.58, 0.38)]],
    ],
    1: [
        [[(0.52, 0.15), (0.52, 0.85)]],
        [[(0.38, 0.3), (0.53, 0.15), (0.53, 0.85)], [(0.4, 0.85), (0.66, 0.85)]],
    ],
    2: [
        [[(0.3, 0.35), (0.33, 0.2), (0.5, 0.14), (0.66, 0.2), (0.69, 0.36),
          (0.6, 0.52), (0.42, 0.66), (0.3, 0.82), (0.72, 0.82)]],
        [[(0.32, 0.3), (0.45, 0.16), (0.64, 0.18), (0.68, 0.34), (0.5, 0.56),
          (0.32, 0.8), (0.7, 0.8)]],
    ],
    3: [
        [[(0.32, 0.2), (0.5, 0.14), (0.66, 0.24), (0.58, 0.42), (0.46, 0.47),
          (0.62, 0.52), (0.68, 0.68), (0.52, 0.84), (0.32, 0.78)]],
        [[(0.3, 0.16), (0.68, 0.16), (0.48, 0.44), (0.66, 0.52), (0.68, 0.7),
          (0.5, 0.84), (0.3, 0.76)]],
    ],
    4: [
        [[(0.56, 0.14), (0.3, 0.56), (0.76, 0.56)], [(0.62, 0.3), (0.62, 0.86)]],
        [[(0.4, 0.16), (0.34, 0.52), (0.74, 0.52)], [(0.62, 0.14), (0.62, 0.86)]],
    ],
    5: [
        [[(0.68, 0.16), (0.35, 0.16), (0.33, 0.44), (0.52, 0.4), (0.66, 0.5),
          (0.68, 0.66), (0.54, 0.8), (0.32, 0.77)]],
        [[(0.66, 0.18), (0.38, 0.18), (0.36, 0.42)],
         [(0.36, 0.42), (0.56, 0.4), (0.68, 0.54), (0.62, 0.74), (0.42, 0.82), (0.3, 0.72)]],
    ],
    6: [
        [[(0.62, 0.15), (0.46, 0.27), (0.36, 0.48), (0.35, 0.68), (0.45, 0.82),
          (0.6, 0.81), (0.68, 0.68), (0.64, 0.54), (0.5, 0.5), (0.37, 0.58)]],
        [[(0.58, 0.16), (0.4, 0.36), (0.35, 0.6)],
         _ellipse(0.5, 0.67, 0.15, 0.16)],
    ],
    7: [
        [[(0.3, 0.17), (0.7, 0.17), (0.46, 0.85)]],
        [[(0.3, 0.18), (0.7, 0.18), (0.48, 0.84)], [(0.36, 0.5), (0.62, 0.5)]],
    ],
    8: [
        [_ellipse(0.5, 0.31, 0.14, 0.16), _ellipse(0.5, 0.65, 0.18, 0.19)],
        [_ellipse(0.52, 0.3, 0.16, 0.15), _ellipse(0.48, 0.66, 0.16, 0.18)],
    ],
    9: [
        [_ellipse(0.52, 0.32, 0.16, 0.17), [(0.68, 0.34), (0.66, 0.6), (0.56, 0.85)]],
        [_ellipse(0.5, 0.33, 0.17, 0.18), [(0.67, 0.38), (0.67, 0.85)]],
    ],
}


def _segments_of(variant) -> np.ndarray:
    segs = []
    for line in variant:
        for a, b in zip(line[:-1], line[1:]):
            segs.append((a[0], a[1], b[0], b[1]))
    return np.array(segs, dtype=np.float32)  # (S, 4)


def _render_group(segs: np.ndarray, count: int, rng: np.random.Generator,
                  size: int = 28) -> np.ndarray:
    """Render ``count`` randomized instances of one template (vectorized)."""
    s = segs.reshape(1, -1, 2, 2).repeat(count, axis=0)  # (C, S, 2, 2)

    # Per-sample affine about the glyph center: rotation, anisotropic scale,
    # shear, translation; then per-point jitter.
    ang = rng.uniform(-0.22, 0.22, size=count).astype(np.float32)
    sx = rng.uniform(0.78, 1.12, size=count).astype(np.float32)
    sy = rng.uniform(0.78, 1.12, size=count).astype(np.float32)
    shear = rng.uniform(-0.18, 0.18, size=count).astype(np.float32)
    tx = rng.uniform(-0.07, 0.07, size=count).astype(np.float32)
    ty = rng.uniform(-0.07, 0.07, size=count).astype(np.float32)
    ca, sa = np.cos(ang), np.sin(ang)
    # A = R(ang) @ [[sx, shear*sx], [0, sy]]
    a11 = ca * sx
    a12 = ca * shear * sx - sa * sy
    a21 = sa * sx
    a22 = sa * shear * sx + ca * sy
    p = s - 0.5
    x = p[..., 0]
    y = p[..., 1]
    xn = a11[:, None, None] * x + a12[:, None, None] * y + 0.5 + tx[:, None, None]
    yn = a21[:, None, None] * x + a22[:, None, None] * y + 0.5 + ty[:, None, None]
    pts = np.stack([xn, yn], axis=-1)
    pts += rng.normal(0.0, 0.013, size=pts.shape).astype(np.float32)
    pts *= size

    a = pts[:, :, 0]  # (C, S, 2)
    b = pts[:, :, 1]
    ab = b - a
    ab2 = (ab * ab).sum(-1)  # (C, S)
    ab2 = np.maximum(ab2, 1e-12)

    gy, gx = np.mgrid[0:size, 0:size]
    grid = np.stack([gx.ravel() + 0.5, gy.ravel() + 0.5], axis=-1).astype(np.float32)  # (P, 2)

    pa = grid[None, None] - a[:, :, None]  # (C, S, P, 2)
    t = (pa * ab[:, :, None]).sum(-1) / ab2[:, :, None]
    np.clip(t, 0.0, 1.0, out=t)
    proj = a[:, :, None] + t[..., None] * ab[:, :, None]
    d = np.linalg.norm(grid[None, None] - proj, axis=-1)  # (C, S, P)

    thick = rng.uniform(0.55, 1.15, size=count).astype(np.float32)
    ink = np.clip((thick[:, None, None] - d) / 0.8 + 0.55, 0.0, 1.0).max(axis=1)  # (C, P)
    ink *= rng.uniform(0.78, 1.0, size=count)[:, None].astype(np.float32)
    ink += rng.normal(0.0, 0.05, size=ink.shape).astype(np.float32)
    np.clip(ink, 0.0, 1.0, out=ink)
    return ink.reshape(count, size, size)


def synthesize_digits(n: int, rng: np.random.Generator, size: int = 28,
                      chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic digit-like images: (N, size, size) float32 in [0,1], labels."""
    labels = rng.integers(0, 10, size=n)
    variants = rng.integers(0, 2, size=n)
    images = np.empty((n, size, size), dtype=np.float32)
    for digit in range(10):
        for v in range(2):
            idx = np.flatnonzero((labels == digit) & (variants == v))
            if idx.size == 0:
                continue
            segs = _segments_of(_TEMPLATES[digit][v])
            for s in range(0, idx.size, chunk):
                sel = idx[s : s + chunk]
                images[sel] = _render_group(segs, sel.size, rng, size)
    return images, labels.astype(np.int64)


def build_synthetic_corpus(dirpath, n_train: int = 60000, n_test: int = 10000,
                           master_seed: int = 2024) -> None:
    """Write the stand-in corpus as MNIST-format IDX files into ``dirpath``."""
    from .rng import derive_generator

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for split, count, label in (("train", n_train, "synth-train"), ("test", n_test, "synth-test")):
        imgs, labs = synthesize_digits(count, derive_generator(master_seed, label))
        write_idx_images(d / MNIST_FILES[f"{split}_images"], np.round(imgs * 255).astype(np.uint8))
        write_idx_labels(d / MNIST_FILES[f"{split}_labels"], labs)
