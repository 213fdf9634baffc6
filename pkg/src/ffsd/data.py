"""Datasets and deterministic batching.

Batch order depends only on ``(seed, epoch)`` and each sample's augmentation
on ``(seed, epoch, sample index)``, so the number of loader workers never
changes what a training run sees.
"""
import hashlib
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import FormatError, InvalidInputError

logger = logging.getLogger(__name__)

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_FILES = {
    "cifar10": (["cifar-10-batches-bin", ""],
                [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"], 1, 10),
    "cifar100": (["cifar-100-binary", ""], ["train.bin"], ["test.bin"], 2, 100),
}
CIFAR_SPLIT_SIZES = {"train": 50000, "test": 10000}


@dataclass
class LabeledImageSet:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise InvalidInputError(f"images must be uint8 (N, C, H, W), got {self.images.dtype} {self.images.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise InvalidInputError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidInputError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))


def subset_per_class(ds, limit):
    """Keep the first ``limit`` samples of every class, in dataset order."""
    if limit <= 0:
        return ds
    keep = []
    seen = np.zeros(ds.num_classes, dtype=np.int64)
    for i, y in enumerate(ds.labels):
        if seen[y] < limit:
            keep.append(i)
            seen[y] += 1
    return ds.subset(keep)


# --- CIFAR binary format -------------------------------------------------

def decode_cifar(raw, label_bytes, source="<bytes>"):
    """Decode CIFAR binary records; the last label byte is used (fine label for CIFAR-100)."""
    reclen = label_bytes + CIFAR_PIXELS
    raw = np.frombuffer(raw, dtype=np.uint8)
    if raw.size == 0:
        raise FormatError(f"{source}: empty file")
    if raw.size % reclen:
        full = raw.size // reclen
        raise OSError(f"{source}: truncated record {full} starting at byte offset {full * reclen} "
                      f"({raw.size - full * reclen} of {reclen} bytes present)")
    recs = raw.reshape(-1, reclen)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def encode_cifar(images, labels, label_bytes=1, coarse=None):
    """Inverse of :func:`decode_cifar`; ``coarse`` fills the first label byte for CIFAR-100."""
    n = len(labels)
    recs = np.empty((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    if label_bytes == 2:
        recs[:, 0] = 0 if coarse is None else coarse
    recs[:, label_bytes - 1] = labels
    recs[:, label_bytes:] = images.reshape(n, -1)
    return recs.tobytes()


def _find_dir(root, subdirs, probe):
    for sub in subdirs:
        d = root / sub if sub else root
        if (d / probe).is_file():
            return d
    raise FileNotFoundError(f"{probe} not found under {root} (looked in {[s or '.' for s in subdirs]})")


def load_cifar(path, variant="cifar100", check_sizes=True):
    """Load ``(train, test)`` from the canonical CIFAR binary distribution."""
    if variant not in CIFAR_FILES:
        raise InvalidInputError(f"unknown CIFAR variant {variant!r}")
    subdirs, train_files, test_files, label_bytes, K = CIFAR_FILES[variant]
    d = _find_dir(Path(path), subdirs, test_files[0])
    out = []
    for split, files in (("train", train_files), ("test", test_files)):
        imgs, labs = [], []
        for name in files:
            f = d / name
            if not f.is_file():
                raise FileNotFoundError(f"missing CIFAR file {f}")
            i, l = decode_cifar(f.read_bytes(), label_bytes, str(f))
            imgs.append(i)
            labs.append(l)
        images = np.concatenate(imgs)
        labels = np.concatenate(labs)
        if check_sizes and len(labels) != CIFAR_SPLIT_SIZES[split]:
            raise FormatError(f"{variant} {split}: {len(labels)} records, expected {CIFAR_SPLIT_SIZES[split]}")
        if labels.max() >= K:
            raise FormatError(f"{variant} {split}: label {labels.max()} out of range for {K} classes")
        out.append(LabeledImageSet(images, labels, K, {"source": variant, "split": split}))
    return tuple(out)


# --- synthetic data ------------------------------------------------------

def _blob(H, W, cy, cx, sigma):
    yy, xx = np.mgrid[0:H, 0:W]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def synthetic_set(K, N, H, W=None, seed=0, noise=0.6, split="train"):
    """Class-conditional Gaussian-blob images.

    Each class has a fixed template (two coloured blobs) drawn from ``seed``;
    samples jitter and rescale the template and add a random distractor blob
    plus pixel noise, both scaled by ``noise``. Templates depend only on
    ``seed``, so a ``"train"`` and a ``"test"`` split share classes.
    """
    if K < 2:
        raise InvalidInputError("synthetic_set needs K >= 2")
    W = H if W is None else W
    trng = np.random.default_rng([seed, 0])
    scale = min(H, W) / 16
    templates = np.zeros((K, 3, H, W))
    for k in range(K):
        for _ in range(2):
            cy, cx = trng.uniform(0.2, 0.8) * H, trng.uniform(0.2, 0.8) * W
            color = trng.uniform(-1, 1, size=3)
            templates[k] += color[:, None, None] * _blob(H, W, cy, cx, trng.uniform(1.5, 3.0) * scale)
    srng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = srng.permutation(np.repeat(np.arange(K), -(-N // K))[:N])
    jitter = max(1, int(round(scale)))
    images = np.empty((N, 3, H, W))
    shifts = srng.integers(-jitter, jitter + 1, size=(N, 2))
    contrast = srng.uniform(0.7, 1.3, size=N)
    dcy = srng.uniform(0, H, size=N)
    dcx = srng.uniform(0, W, size=N)
    dsig = srng.uniform(1.5, 3.0, size=N) * scale
    dcol = srng.uniform(-1, 1, size=(N, 3))
    for s in range(N):
        img = np.roll(templates[labels[s]], tuple(shifts[s]), axis=(1, 2)) * contrast[s]
        img += noise * dcol[s][:, None, None] * _blob(H, W, dcy[s], dcx[s], dsig[s])
        images[s] = img
    images += srng.normal(0, 0.5 * noise, size=images.shape)
    pixels = np.clip(np.round(128 + 64 * images), 0, 255).astype(np.uint8)
    return LabeledImageSet(pixels, labels, K, {"source": "synthetic", "seed": seed, "noise": noise, "split": split})


def save_image_set(ds, path):
    """Write a flat binary (images then int64 labels) with a JSON sidecar."""
    path = Path(path)
    blob = ds.images.tobytes() + ds.labels.astype("<i8").tobytes()
    path.write_bytes(blob)
    sidecar = {"shape": list(ds.images.shape), "num_classes": ds.num_classes, "meta": ds.meta,
               "sha256": hashlib.sha256(blob).hexdigest()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_image_set(path):
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != side["sha256"]:
        raise FormatError(f"{path}: checksum mismatch")
    shape = tuple(side["shape"])
    n_img = int(np.prod(shape))
    images = np.frombuffer(blob[:n_img], dtype=np.uint8).reshape(shape).copy()
    labels = np.frombuffer(blob[n_img:], dtype="<i8").astype(np.int64)
    return LabeledImageSet(images, labels, side["num_classes"], side["meta"])


def cached_synthetic_set(cache_dir, K, N, H, seed, noise, split):
    name = f"synthetic_K{K}_N{N}_H{H}_s{seed}_n{noise:g}_{split}.bin"
    path = Path(cache_dir) / name
    if path.is_file():
        return load_image_set(path)
    ds = synthetic_set(K, N, H, H, seed, noise, split)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image_set(ds, path)
    return ds


# --- augmentation and batching ------------------------------------------

@dataclass
class AugmentationPolicy:
    pad: int = 4
    flip_p: float = 0.5
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)
    augment: bool = True

    @classmethod
    def from_dataset(cls, ds, pad=4, flip_p=0.5, augment=True):
        x = ds.images.astype(np.float64) / 255
        return cls(pad, flip_p, tuple(x.mean(axis=(0, 2, 3))), tuple(x.std(axis=(0, 2, 3)) + 1e-8), augment)

    def normalize(self, images):
        x = images.astype(np.float32) / 255
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return (x - mean) / std

    def augment_one(self, image, rng):
        """Zero-pad, random crop back to the original size, random horizontal flip."""
        _, H, W = image.shape
        p = self.pad
        if p > 0:
            padded = np.zeros((image.shape[0], H + 2 * p, W + 2 * p), dtype=image.dtype)
            padded[:, p:p + H, p:p + W] = image
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            image = padded[:, dy:dy + H, dx:dx + W]
        if rng.random() < self.flip_p:
            image = image[:, :, ::-1]
        return image


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batch(ds, idx, policy=None, seed=0, epoch=0, train=True):
    images = ds.images[idx]
    if policy is not None and train and policy.augment:
        images = np.stack([policy.augment_one(ds.images[i], np.random.default_rng([seed, epoch, int(i)]))
                           for i in idx])
    x = policy.normalize(images) if policy is not None else images.astype(np.float32) / 255
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(ds.labels[idx])


def batches(ds, batch_size, seed=0, epoch=0, policy=None, train=True, workers=0):
    """Yield ``(x, y)`` mini-batches; shuffled and augmented when ``train``.

    The last partial batch is kept. ``workers > 0`` prepares batches in a
    thread pool with a bounded prefetch queue; output is identical.
    """
    n = len(ds)
    if batch_size > n:
        batch_size = n
    order = epoch_order(n, seed, epoch) if train else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if workers <= 0:
        for idx in chunks:
            yield make_batch(ds, idx, policy, seed, epoch, train)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        it = iter(chunks)
        for idx in it:
            pending.append(pool.submit(make_batch, ds, idx, policy, seed, epoch, train))
            if len(pending) >= 2 * workers:
                break
        for idx in it:
            yield pending.popleft().result()
            pending.append(pool.submit(make_batch, ds, idx, policy, seed, epoch, train))
        while pending:
            yield pending.popleft().result()


def load_datasets(cfg):
    """Build ``(train, test)`` from a config's ``[data]`` section."""
    from .config import derive_seed

    d = cfg.data
    if d.dataset == "synthetic":
        seed = derive_seed(cfg.train.seed, "data")
        if d.path:  # data.path doubles as a cache directory for generated sets
            train = cached_synthetic_set(d.path, d.num_classes, d.train_size, d.image_size, seed, d.noise, "train")
            test = cached_synthetic_set(d.path, d.num_classes, d.test_size, d.image_size, seed, d.noise, "test")
        else:
            train = synthetic_set(d.num_classes, d.train_size, d.image_size, d.image_size, seed, d.noise, "train")
            test = synthetic_set(d.num_classes, d.test_size, d.image_size, d.image_size, seed, d.noise, "test")
    else:
        train, test = load_cifar(d.path, d.dataset)
    train = subset_per_class(train, d.per_class_limit)
    return train, test
