"""CIFAR binary I/O, a synthetic CIFAR-layout dataset, standardization and augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IMAGE_SHAPE = (32, 32, 3)
PIXELS = 32 * 32 * 3
SPLIT_SIZES = {"train": 50000, "validation": 10000}
VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes
DATA_DIR_ENV = "REWINDLAB_DATA_DIR"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, h, w, c) uint8
    labels: np.ndarray  # (n,) int64
    split: str
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.split, self.class_count)


def read_cifar_file(path: str | os.PathLike, variant: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    """Records of label byte(s) + 3072 channel-planar RGB bytes -> NHWC uint8 and labels.

    For CIFAR-100 the fine label (second byte) is returned.
    """
    label_bytes, _ = VARIANTS[variant]
    rec = label_bytes + PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec:
        whole = raw.size // rec
        raise ValueError(f"{path}: truncated record {whole} at byte offset {whole * rec} "
                         f"({raw.size % rec} of {rec} bytes present)")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_file(path: str | os.PathLike, images: np.ndarray, labels: np.ndarray,
                     variant: str = "cifar10", coarse_labels: np.ndarray | None = None) -> None:
    label_bytes, _ = VARIANTS[variant]
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"CIFAR records hold 32x32x3 images, got {images.shape[1:]}")
    n = images.shape[0]
    rec = np.empty((n, label_bytes + PIXELS), dtype=np.uint8)
    if label_bytes == 2:
        rec[:, 0] = 0 if coarse_labels is None else coarse_labels
    rec[:, label_bytes - 1] = labels
    rec[:, label_bytes:] = images.transpose(0, 3, 1, 2).reshape(n, PIXELS)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rec.tofile(path)


def cifar_files(root: str | os.PathLike, variant: str, split: str) -> list[Path]:
    root = Path(root)
    if variant == "cifar10":
        base = root / "cifar-10-batches-bin"
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    elif variant == "cifar100":
        base = root / "cifar-100-binary"
        names = ["train.bin"] if split == "train" else ["test.bin"]
    else:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    return [base / n for n in names]


def load_cifar(path: str | os.PathLike | None, variant: str = "cifar10", split: str = "train",
               strict: bool = True) -> Dataset:
    """Load a split from the standard binary distribution under ``path``.

    ``path`` defaults to $REWINDLAB_DATA_DIR. With ``strict`` the record count
    must equal 50000 (train) or 10000 (validation).
    """
    if split not in SPLIT_SIZES:
        raise ValueError(f"split must be 'train' or 'validation', got {split!r}")
    if path is None:
        path = os.environ.get(DATA_DIR_ENV)
        if not path:
            raise FileNotFoundError(f"no dataset root given and ${DATA_DIR_ENV} unset")
    parts = [read_cifar_file(f, variant) for f in cifar_files(path, variant, split)]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if strict and images.shape[0] != SPLIT_SIZES[split]:
        raise ValueError(f"{variant} {split}: expected {SPLIT_SIZES[split]} records, found {images.shape[0]}")
    return Dataset(images, labels, split, VARIANTS[variant][1])


# ---------------------------------------------------------------- synthetic

def synthetic_cifar(n_train: int = 10000, n_val: int = 2000, classes: int = 10, seed: int = 0,
                    noise: float = 40.0, motif_size: int = 6, motifs_per_image: int = 4,
                    distractors: int = 3) -> tuple[Dataset, Dataset]:
    """Class-conditional motif images in CIFAR layout.

    Every class owns two random colour motifs; an image scatters
    ``motifs_per_image`` of its class motifs plus ``distractors`` motifs from
    a shared pool over a smooth random background, then adds pixel noise.
    """
    rng = np.random.default_rng(seed)
    k = motif_size
    n_motifs = 2 * classes
    motifs = rng.uniform(-1.0, 1.0, size=(n_motifs + 8, k, k, 3))
    motifs = np.sign(motifs) * np.abs(motifs) ** 0.5 * 90.0

    def make(n: int, split_rng: np.random.Generator, split: str) -> Dataset:
        labels = np.arange(n) % classes
        split_rng.shuffle(labels)
        imgs = np.empty((n, 32, 32, 3), dtype=np.uint8)
        # low-frequency background: bilinear upsample of a 4x4 grid
        grid = split_rng.uniform(60, 190, size=(n, 5, 5, 3))
        xs = np.linspace(0, 4, 32)
        i0 = np.clip(xs.astype(int), 0, 3)
        fr = (xs - i0)[None, :, None, None]
        rows = grid[:, i0] * (1 - fr) + grid[:, i0 + 1] * fr
        fc = (xs - i0)[None, None, :, None]
        bg = rows[:, :, i0] * (1 - fc) + rows[:, :, i0 + 1] * fc
        for idx in range(n):
            canvas = bg[idx].copy()
            c = labels[idx]
            picks = [2 * c + split_rng.integers(2) for _ in range(motifs_per_image)]
            picks += list(n_motifs + split_rng.integers(8, size=distractors))
            for m in picks:
                y, x = split_rng.integers(0, 32 - k + 1, size=2)
                motif = motifs[m]
                if split_rng.random() < 0.5:
                    motif = motif[:, ::-1]
                canvas[y:y + k, x:x + k] += motif
            canvas += split_rng.normal(0.0, noise, size=canvas.shape)
            imgs[idx] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        return Dataset(imgs, labels.astype(np.int64), split, classes)

    train_rng, val_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return make(n_train, train_rng, "train"), make(n_val, val_rng, "validation")


def write_synthetic_cifar10(root: str | os.PathLike, train: Dataset, val: Dataset) -> None:
    """Lay a synthetic dataset out like the CIFAR-10 binary distribution."""
    base = Path(root) / "cifar-10-batches-bin"
    chunks = np.array_split(np.arange(len(train)), 5)
    for i, idx in enumerate(chunks, 1):
        write_cifar_file(base / f"data_batch_{i}.bin", train.images[idx], train.labels[idx])
    write_cifar_file(base / "test_batch.bin", val.images, val.labels)


def stratified_subset(ds: Dataset, n: int) -> Dataset:
    """First ``n // classes`` examples of each class, in index order (remainder to low classes)."""
    if n >= len(ds):
        return ds
    per = np.full(ds.class_count, n // ds.class_count)
    per[: n % ds.class_count] += 1
    seen = np.zeros(ds.class_count, dtype=np.int64)
    keep = []
    for i, y in enumerate(ds.labels):
        if seen[y] < per[y]:
            seen[y] += 1
            keep.append(i)
            if len(keep) == n:
                break
    return ds.subset(np.asarray(keep, dtype=np.int64))


# ------------------------------------------------------------ preprocessing

def standardize_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over every pixel of the training split."""
    images = np.asarray(images)
    if images.size == 0:
        raise ValueError("cannot compute statistics of an empty training set")
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std == 0):
        raise ValueError(f"channel(s) {np.flatnonzero(std == 0).tolist()} have zero std")
    return mean, std


@dataclass(frozen=True)
class AugmentPipeline:
    mean: np.ndarray
    std: np.ndarray
    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5

    @classmethod
    def from_train(cls, train: Dataset, pad: int = 4) -> "AugmentPipeline":
        mean, std = standardize_stats(train.images)
        return cls(mean, std, pad, int(train.images.shape[1]))

    def standardize(self, images: np.ndarray) -> np.ndarray:
        """The validation path: standardization only."""
        out = (images.astype(np.float32) - self.mean.astype(np.float32)) / self.std.astype(np.float32)
        return out.astype(np.float32, copy=False)


def augment(batch: np.ndarray, pipeline: AugmentPipeline, rng) -> np.ndarray:
    """Standardize, flip horizontally with p, reflection-pad, random crop (per image)."""
    x = pipeline.standardize(batch)
    n = x.shape[0]
    flips = rng.random(n) < pipeline.flip_prob
    x[flips] = x[flips, :, ::-1]
    p = pipeline.pad
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")
    c = pipeline.crop
    span = x.shape[1] - c + 1
    offsets = rng.integers(0, span, size=(n, 2))
    windows = sliding_window_view(x, (c, c), axis=(1, 2))  # (n, oy, ox, ch, c, c)
    out = windows[np.arange(n), offsets[:, 0], offsets[:, 1]]
    return np.ascontiguousarray(out.transpose(0, 2, 3, 1))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded Fisher-Yates permutation of range(n)."""
    perm = np.arange(n)
    if n < 2:
        return perm
    draws = rng.integers(0, np.arange(n, 1, -1))  # j_i in [0, i] for i = n-1 .. 1
    for i, j in zip(range(n - 1, 0, -1), draws):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class BatchStream:
    """Endless minibatches: reshuffled every epoch, last partial batch dropped."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        order_seed, aug_seed = np.random.SeedSequence(seed).spawn(2)
        self.order_rng = np.random.default_rng(order_seed)
        self.aug_rng = np.random.default_rng(aug_seed)

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            perm = fisher_yates(self.n, self.order_rng)
            for start in range(0, self.n - self.batch_size + 1, self.batch_size):
                yield perm[start:start + self.batch_size]
