"""CIFAR-10 binary ingestion, the augmentation stack, and synthetic
datasets for fast desk-scale runs.

Augmentation order: 4-pixel zero padding, horizontal flip (p=0.5), random
32x32 crop, random erasing (p=0.5, area fraction in [0.02, 0.2], value 0),
then per-channel normalization. Evaluation applies only the
normalization. Every random stage is a pure function of
(global seed, sample index, epoch), so prefetch order can never change
results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
IMAGE_SHAPE = (3, 32, 32)

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

TRAIN_BATCH_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_BATCH_FILES = ["test_batch.bin"]

SYNTHETIC_KINDS = ("two-gaussians-images", "striped-patterns")


@dataclass
class Dataset:
    """Images as float32 (N, 3, 32, 32) scaled to [0, 1]; integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def parse_cifar_records(raw, source="<bytes>"):
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DataFormatError(
            f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES} "
            f"(truncated record starts at byte {offset})")
    n = len(raw) // RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{source}: label byte {int(labels[bad[0]])} > 9 in record {int(bad[0])}")
    images = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def write_cifar_records(path, dataset):
    """Inverse of parse: bit-exact for data that came from the format."""
    n = len(dataset)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    records[:, 1:] = pixels.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def load_cifar10(path):
    """Load the standard binary batches from a directory.

    Returns (train, test) with 50000 + 10000 examples for a full layout;
    missing files raise DataFormatError naming the path.
    """
    def read_split(names):
        images, labels = [], []
        for name in names:
            full = os.path.join(path, name)
            if not os.path.exists(full):
                raise DataFormatError(f"missing CIFAR-10 batch file: {full}")
            with open(full, "rb") as fh:
                imgs, labs = parse_cifar_records(fh.read(), source=full)
            images.append(imgs)
            labels.append(labs)
        return Dataset(np.concatenate(images), np.concatenate(labels))

    return read_split(TRAIN_BATCH_FILES), read_split(TEST_BATCH_FILES)


def compute_channel_stats(dataset):
    """Recompute the per-channel mean/std normalization constants."""
    flat = dataset.images.transpose(1, 0, 2, 3).reshape(3, -1)
    return flat.mean(axis=1), flat.std(axis=1)


def normalize(images):
    return ((images - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]).astype(np.float32)


def sample_rng(seed, index, epoch):
    """Generator that depends only on (seed, index, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def augment(image, rng, flip_p=0.5, erase_p=0.5, erase_area=(0.02, 0.2),
            crop_offset=None):
    """Train-time augmentation of one 3x32x32 image in [0, 1].

    crop_offset pins the crop position ((4, 4) recovers the pre-pad
    image), which together with zero probabilities gives the identity
    path: normalize(input).
    """
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (4, 4), (4, 4)))
    if rng.random() < flip_p:
        padded = padded[:, :, ::-1]
    if crop_offset is None:
        top = int(rng.integers(0, 9))
        left = int(rng.integers(0, 9))
    else:
        top, left = crop_offset
    out = padded[:, top:top + h, left:left + w].copy()
    if rng.random() < erase_p:
        frac = float(rng.uniform(*erase_area))
        aspect = float(np.exp(rng.uniform(np.log(0.3), np.log(1.0 / 0.3))))
        eh = max(1, min(h, int(round(np.sqrt(frac * h * w * aspect)))))
        ew = max(1, min(w, int(round(np.sqrt(frac * h * w / aspect)))))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        out[:, ey:ey + eh, ex:ex + ew] = 0.0
    return normalize(out)


def augment_batch(images, indices, epoch, seed, enabled=True):
    if not enabled:
        return normalize(images)
    out = np.empty_like(images)
    for row, idx in enumerate(indices):
        out[row] = augment(images[row], sample_rng(seed, int(idx), epoch))
    return out


def _smooth_field(rng, strength=8):
    """Low-frequency random image used as a synthetic class mean."""
    coarse = rng.normal(0.0, 1.0, size=(3, strength, strength))
    fine = np.repeat(np.repeat(coarse, 32 // strength, axis=1), 32 // strength, axis=2)
    fine = fine / (np.abs(fine).max() + 1e-9)
    return fine.astype(np.float32)


def synthetic_dataset(kind, n, seed, separation=4.0, noise=0.1):
    """Deterministic toy datasets shaped like CIFAR examples.

    two-gaussians-images: two classes with fixed smooth mean images whose
    distance is separation * noise, so the optimal error is the Gaussian
    tail Phi(-separation/2). striped-patterns: ten classes of oriented
    sinusoidal gratings plus noise. Class balance is exact and independent
    of the seed.
    """
    if n <= 0:
        raise ValueError("dataset size must be positive")
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, seed]))

    if kind == "two-gaussians-images":
        mean_rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, 0]))
        direction = _smooth_field(mean_rng)
        direction /= np.sqrt((direction ** 2).sum())
        base = np.full(IMAGE_SHAPE, 0.5, dtype=np.float32)
        offset = (0.5 * separation * noise) * direction
        means = [base - offset, base + offset]
        labels = np.arange(n) % 2
        images = np.empty((n,) + IMAGE_SHAPE, dtype=np.float32)
        for i in range(n):
            sample = means[labels[i]] + rng.normal(0.0, noise, size=IMAGE_SHAPE)
            images[i] = np.clip(sample, 0.0, 1.0)
    else:
        classes = 10
        ys, xs = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
        labels = np.arange(n) % classes
        images = np.empty((n,) + IMAGE_SHAPE, dtype=np.float32)
        for i in range(n):
            k = int(labels[i])
            theta = np.pi * k / classes
            freq = 2.0 + (k % 5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) / 32.0 + phase)
            img = 0.5 + 0.35 * wave[None, :, :] + rng.normal(0.0, 0.05, size=IMAGE_SHAPE)
            images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)

    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm].astype(np.int64))


class BatchStream:
    """Shuffled minibatch iterator with deterministic per-sample
    augmentation; optional one-thread prefetch (queue capacity 4) that
    cannot change results because augmentation is seeded per index."""

    def __init__(self, dataset, batch_size, seed, augment_enabled=True,
                 prefetch=False):
        if batch_size > len(dataset):
            raise ValueError(
                f"batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.augment_enabled = augment_enabled
        self.prefetch = prefetch
        self._epoch = 0
        self._queue = None
        self._iter = None
        if prefetch:
            self._start_prefetch()
        else:
            self._iter = self._batches()

    def _order(self, epoch):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x0D0E, epoch]))
        return rng.permutation(len(self.dataset))

    def _batches(self):
        n = len(self.dataset)
        while True:
            order = self._order(self._epoch)
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                idx = order[start:start + self.batch_size]
                images = augment_batch(self.dataset.images[idx], idx, self._epoch,
                                       self.seed, enabled=self.augment_enabled)
                yield images, self.dataset.labels[idx]
            self._epoch += 1

    def _start_prefetch(self):
        import queue
        import threading

        self._queue = queue.Queue(maxsize=4)

        def worker():
            for batch in self._batches():
                self._queue.put(batch)

        thread = threading.Thread(target=worker, daemon=True)
        thread.start()

    def __iter__(self):
        return self

    def __next__(self):
        if self._queue is not None:
            return self._queue.get()
        return next(self._iter)
