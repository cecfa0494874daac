"""Dataset loading: IDX-format image/label files when present, otherwise a
bundled handwritten-digits fixture upsampled to 28x28 so every pipeline
runs end to end without network access."""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """IDX file does not match the expected layout."""


@dataclass
class Dataset:
    x: np.ndarray  # (n, d) float64 in [0, 1]
    y: np.ndarray  # (n,) int64 labels
    name: str

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs vs {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.x)


def _open_maybe_gz(path):
    p = Path(path)
    return gzip.open(p, "rb") if p.suffix == ".gz" else open(p, "rb")


def load_idx_images(path) -> np.ndarray:
    """(n, rows*cols) float64 in [0,1] from an IDX3 unsigned-byte file."""
    with _open_maybe_gz(path) as f:
        head = f.read(16)
        if len(head) < 16:
            raise DataFormatError(f"{path}: truncated header")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IMAGE_MAGIC:
            raise DataFormatError(f"{path}: magic {magic:#x}, expected {IMAGE_MAGIC:#x}")
        raw = f.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise DataFormatError(f"{path}: expected {n} images, file too short")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return data.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        head = f.read(8)
        if len(head) < 8:
            raise DataFormatError(f"{path}: truncated header")
        magic, n = struct.unpack(">II", head)
        if magic != LABEL_MAGIC:
            raise DataFormatError(f"{path}: magic {magic:#x}, expected {LABEL_MAGIC:#x}")
        raw = f.read(n)
    if len(raw) != n:
        raise DataFormatError(f"{path}: expected {n} labels, file too short")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(directory: Path, stem: str) -> Path | None:
    for suffix in ("", ".gz"):
        p = directory / (stem + suffix)
        if p.exists():
            return p
    return None


def load_idx_dir(directory) -> tuple[Dataset, Dataset]:
    """Standard four-file IDX layout (plain or gzipped)."""
    directory = Path(directory)
    sets = {}
    for split, (img_stem, lbl_stem) in _IDX_NAMES.items():
        img, lbl = _find_idx(directory, img_stem), _find_idx(directory, lbl_stem)
        if img is None or lbl is None:
            raise FileNotFoundError(f"missing IDX files for {split!r} in {directory}")
        x, y = load_idx_images(img), load_idx_labels(lbl)
        if len(x) != len(y):
            raise DataFormatError(f"{split}: {len(x)} images vs {len(y)} labels")
        sets[split] = Dataset(x, y, f"idx-{split}")
    return sets["train"], sets["test"]


# ---------------------------------------------------------------------------
# Bundled digits fixture
# ---------------------------------------------------------------------------

def bilinear_upsample(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (n, h, w) images with pixel-center-aligned bilinear sampling."""
    n, h, w = images.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = images[:, y0[:, None], x0[None, :]]
    tr = images[:, y0[:, None], x1[None, :]]
    bl = images[:, y1[:, None], x0[None, :]]
    br = images[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill."""
    h, w = image.shape
    out = np.zeros_like(image)
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[ys_dst, xs_dst] = image[ys_src, xs_src]
    return out


def _fixture_path() -> Path:
    return Path(str(resources.files("defswap").joinpath("fixtures/digits.npz")))


def load_digits_surrogate(train_size: int = 5000, test_keep: int = 500,
                          seed: int = 0) -> tuple[Dataset, Dataset]:
    """28x28 digit sets built from the bundled 8x8 handwritten-digits scans.

    Base images are split into train/test pools before any augmentation,
    so no shifted copy of a test digit ever appears in training data.
    The train pool is grown to train_size with small random translations.
    """
    with np.load(_fixture_path()) as z:
        x8 = z["images"].astype(np.float64) / 16.0
        y = z["labels"].astype(np.int64)
    big = bilinear_upsample(x8, 28, 28)
    big = np.clip(big, 0.0, 1.0)

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 3], dtype=np.uint64)))
    order = rng.permutation(len(big))
    test_idx, train_idx = order[:test_keep], order[test_keep:]

    trx, try_ = big[train_idx], y[train_idx]
    pool = [trx]
    labels = [try_]
    need = train_size - len(trx)
    if need < 0:
        trx, try_ = trx[:train_size], try_[:train_size]
        pool, labels, need = [trx], [try_], 0
    while need > 0:
        take = min(need, len(trx))
        pick = rng.permutation(len(trx))[:take]
        shifts = rng.integers(-3, 4, size=(take, 2))
        shifted = np.stack([_shift(trx[i], int(dy), int(dx))
                            for i, (dy, dx) in zip(pick, shifts)])
        pool.append(shifted)
        labels.append(try_[pick])
        need -= take

    train = Dataset(np.concatenate(pool).reshape(-1, 784),
                    np.concatenate(labels), "digits-train")
    test = Dataset(big[test_idx].reshape(-1, 784), y[test_idx], "digits-test")
    return train, test


def load_default(data_dir=None, train_size: int = 5000,
                 seed: int = 0) -> tuple[Dataset, Dataset, str]:
    """(train, test, source). IDX files win when a directory has them."""
    if data_dir is not None:
        directory = Path(data_dir)
        if _find_idx(directory, _IDX_NAMES["train"][0]) is not None:
            train, test = load_idx_dir(directory)
            return train, test, "idx"
    train, test = load_digits_surrogate(train_size=train_size, seed=seed)
    return train, test, "digits-surrogate"


def subsample(dataset: Dataset, n: int, seed: int, stratified: bool = True) -> Dataset:
    """n-sample subset; per-class proportional draw when possible."""
    if n >= len(dataset):
        return dataset
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 4], dtype=np.uint64)))
    if stratified:
        classes, counts = np.unique(dataset.y, return_counts=True)
        quota = np.maximum(1, np.round(counts / len(dataset) * n)).astype(int)
        while quota.sum() > n:
            quota[np.argmax(quota)] -= 1
        while quota.sum() < n:
            quota[np.argmin(quota)] += 1
        if np.all(quota <= counts):
            picks = []
            for cls, q in zip(classes, quota):
                idx = np.flatnonzero(dataset.y == cls)
                picks.append(rng.permutation(idx)[:q])
            idx = np.sort(np.concatenate(picks))
            return Dataset(dataset.x[idx], dataset.y[idx], dataset.name)
        warnings.warn("class too small for stratified draw; sampling uniformly")
    idx = np.sort(rng.permutation(len(dataset))[:n])
    return Dataset(dataset.x[idx], dataset.y[idx], dataset.name)
