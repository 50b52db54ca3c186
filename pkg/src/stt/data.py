"""Datasets: CIFAR-10 binary batches and a synthetic cross-window matching task.

Images are stored as ``uint8`` pixels ``[n, 3, H, W]`` so that parsing and
re-encoding the 3073-byte record format is lossless; :attr:`Dataset.images`
gives the float32 model input (scaled to [0, 1], then normalized with the
fixed CIFAR-10 channel statistics).

Randomness comes from :class:`PortableRNG`, a Philox4x64-10 counter-based
generator whose 64-bit outputs are turned into uniforms and bounded
integers by simple documented integer arithmetic, so the same seed gives
the same data and batch order in any implementation of Philox.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
RECORDS_PER_FILE = 10_000
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# second Philox key word per purpose; batch shuffles use the epoch itself
STREAM_SYNTH = 1 << 63
STREAM_FLIP = 1 << 62


class DataFormatError(ValueError):
    """Malformed dataset file."""


# ---------------------------------------------------------------------------
# portable random numbers

class PortableRNG:
    """Philox4x64-10 keyed by ``(seed, stream)``.

    The 256-bit counter is incremented before each block, so the first four
    outputs are the words of the block at counter 1, in word order.

    * ``uint64(n)``: the next ``n`` raw outputs.
    * ``uniform(n)``: ``(raw >> 11) * 2**-53`` in [0, 1).
    * ``below(bound, n)``: ``floor(uniform * bound)``.
    """

    def __init__(self, seed: int, stream: int = 0):
        key = np.array([seed % (1 << 64), stream % (1 << 64)], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def uint64(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int) -> np.ndarray:
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def below(self, bound: int, n: int) -> np.ndarray:
        return np.floor(self.uniform(n) * bound).astype(np.int64)


def fisher_yates(n: int, rng: PortableRNG) -> np.ndarray:
    """Permutation of ``range(n)``: for i = n-1 .. 1 swap i with j = floor(u * (i + 1))."""
    perm = np.arange(n)
    if n < 2:
        return perm
    u = rng.uniform(n - 1)
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[step] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    pixels: np.ndarray  # uint8 [n, 3, H, W]
    labels: np.ndarray  # int64 [n]
    num_classes: int
    name: str = ""
    _images: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise ValueError("pixels must be uint8 [n, C, H, W]")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.pixels):
            raise ValueError("pixels and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        """Normalized float32 images ``[n, 3, H, W]``."""
        if self._images is None:
            x = self.pixels.astype(np.float32) / np.float32(255)
            self._images = (x - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]
        return self._images

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], self.labels[idx], self.num_classes, self.name)


def parse_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split CIFAR-10 binary records into ``(labels uint8 [n], pixels uint8 [n, 3, 32, 32])``."""
    if len(raw) % RECORD_BYTES:
        raise DataFormatError(f"{source}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    return rec[:, 0].copy(), rec[:, 1:].reshape(-1, 3, 32, 32).copy()


def encode_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_records`."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"records need uint8 [n, 3, 32, 32] pixels, got {pixels.dtype} {pixels.shape}")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataFormatError("labels must fit in one byte")
    rec = np.empty((len(pixels), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels.reshape(len(pixels), -1)
    return rec.tobytes()


def _read_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 file {path}")
    expected = RECORDS_PER_FILE * RECORD_BYTES
    size = path.stat().st_size
    if size != expected:
        raise DataFormatError(f"{path}: {size} bytes, expected {expected}")
    return parse_records(path.read_bytes(), str(path))


def load_cifar10_binary(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Load the five training batches and the test batch from ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {root}")
    parts = [_read_batch(root / f) for f in TRAIN_FILES]
    train = Dataset(np.concatenate([p for _, p in parts]), np.concatenate([lab for lab, _ in parts]), 10,
                    "cifar10-train")
    labels, pixels = _read_batch(root / TEST_FILE)
    return train, Dataset(pixels, labels, 10, "cifar10-test")


def save_records(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``dataset`` in the 3073-byte record format (32x32 RGB only)."""
    Path(path).write_bytes(encode_records(dataset.labels, dataset.pixels))


def load_records(path: str | os.PathLike, num_classes: int = 10) -> Dataset:
    """Read any number of 3073-byte records from one file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"record file not found: {path}")
    labels, pixels = parse_records(path.read_bytes(), str(path))
    return Dataset(pixels, labels, num_classes, path.stem)


# ---------------------------------------------------------------------------
# synthetic cross-window task

NOISE_LEVELS = 13  # background pixels are uniform in {0, ..., 12}


def glyph(kind: int, patch: int) -> np.ndarray:
    """``patch x patch`` uint8 marker: 0 = solid, 1 = checkerboard of 2x2 cells."""
    if kind == 0:
        return np.full((patch, patch), 255, dtype=np.uint8)
    i = np.arange(patch) // 2
    return np.where((i[:, None] + i[None, :]) % 2 == 0, 255, 0).astype(np.uint8)


def synth_crosswindow(num: int, grid: int, window: int, seed: int = 0, patch: int = 8) -> Dataset:
    """Two marker glyphs in two different windows; label 1 iff the glyphs match.

    The image is ``grid * patch`` pixels square. Each marker covers exactly
    one token cell. Per sample the generator draws, in order: the first
    window ``below(Ns)``, the second ``below(Ns - 1)`` (shifted past the
    first), one cell in each window ``below(M^2)``, both glyph kinds
    ``below(2)``, then ``3 * side^2`` background pixels ``below(13)``.
    """
    if grid % window:
        raise ValueError(f"grid {grid} not divisible by window {window}")
    per_side = grid // window
    ns = per_side * per_side
    if ns < 2:
        raise ValueError(f"synthetic task needs at least 2 windows, got {ns}")
    side = grid * patch
    rng = PortableRNG(seed, STREAM_SYNTH)
    pixels = np.empty((num, 3, side, side), dtype=np.uint8)
    labels = np.empty(num, dtype=np.int64)
    glyphs = [glyph(0, patch), glyph(1, patch)]
    m2 = window * window
    for s in range(num):
        w1 = int(rng.below(ns, 1)[0])
        w2 = int(rng.below(ns - 1, 1)[0])
        if w2 >= w1:
            w2 += 1
        cells = rng.below(m2, 2)
        kinds = rng.below(2, 2)
        img = rng.below(NOISE_LEVELS, 3 * side * side).astype(np.uint8).reshape(3, side, side)
        for w, c, k in ((w1, cells[0], kinds[0]), (w2, cells[1], kinds[1])):
            row = (w // per_side) * window + c // window
            col = (w % per_side) * window + c % window
            img[:, row * patch:(row + 1) * patch, col * patch:(col + 1) * patch] = glyphs[k]
        pixels[s] = img
        labels[s] = int(kinds[0] == kinds[1])
    return Dataset(pixels, labels, 2, f"synth-crosswindow-{grid}-{window}-{seed}")


# ---------------------------------------------------------------------------
# batching

def batch_iter(num: int, batch_size: int, seed: int, epoch: int):
    """Yield index arrays covering ``range(num)`` once, in a (seed, epoch)-keyed order.

    The last batch may be short.
    """
    if not 1 <= batch_size <= num:
        raise ValueError(f"batch size {batch_size} must be in [1, {num}]")
    perm = fisher_yates(num, PortableRNG(seed, epoch))
    for start in range(0, num, batch_size):
        yield perm[start:start + batch_size]


def flip_mask(n: int, seed: int, step: int) -> np.ndarray:
    """Per-sample horizontal-flip decisions for one training step."""
    return PortableRNG(seed, STREAM_FLIP + step).below(2, n).astype(bool)
