"""Datasets, IDX loading, synthetic blobs and label-skewed client partitions."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


class IdxFormatError(ValueError):
    """Malformed IDX file. ``path`` and byte ``offset`` locate the problem."""

    def __init__(self, message: str, path, offset: int):
        self.path = os.fspath(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class MagicMismatch(IdxFormatError):
    pass


class TruncatedFile(IdxFormatError):
    pass


class CountMismatch(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} do not line up"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.isnan(self.inputs).any():
            raise ValueError("inputs contain NaN")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    label_set: tuple
    # positions in the source dataset, kept so partitions can be audited
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 20
    labels_per_client: int = 2
    lognormal_sigma: float = 1.0
    seed: int = 0
    train_test_ratio: float = 0.8
    random_factor: bool = True

    def validate(self, num_classes: int) -> None:
        if self.num_clients < 2:
            raise PartitionError("num_clients must be >= 2")
        if not 1 <= self.labels_per_client <= num_classes:
            raise PartitionError(f"labels_per_client must lie in [1, {num_classes}]")
        if self.lognormal_sigma <= 0:
            raise PartitionError("lognormal_sigma must be > 0")
        if not 0.0 < self.train_test_ratio < 1.0:
            raise PartitionError("train_test_ratio must lie in (0, 1)")
        if self.num_clients * self.labels_per_client < num_classes:
            raise PartitionError(
                f"{self.num_clients} clients x {self.labels_per_client} labels cannot "
                f"cover all {num_classes} classes"
            )


def _read_header(path, buf: bytes, magic: int, ndim: int) -> tuple:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise TruncatedFile(f"header needs {need} bytes, file has {len(buf)}", path, len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise MagicMismatch(f"expected magic 0x{magic:08x}, found 0x{found:08x}", path, 0)
    return struct.unpack(f">{ndim}I", buf[4:need]), need


def load_idx(images_path, labels_path, num_classes: int = 10, mean=MNIST_MEAN, std=MNIST_STD) -> Dataset:
    """Load an IDX image/label pair (MNIST layout).

    Pixels are scaled to [0, 1] and standardized with ``(x - mean) / std``;
    each image is flattened row-major to ``rows * cols`` features.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lbl_buf = f.read()

    (count, rows, cols), off = _read_header(images_path, img_buf, IDX_IMAGES_MAGIC, 3)
    need = off + count * rows * cols
    if len(img_buf) < need:
        raise TruncatedFile(f"expected {need} bytes of pixel data", images_path, len(img_buf))
    (n_labels,), loff = _read_header(labels_path, lbl_buf, IDX_LABELS_MAGIC, 1)
    if len(lbl_buf) < loff + n_labels:
        raise TruncatedFile(f"expected {loff + n_labels} bytes of labels", labels_path, len(lbl_buf))
    if n_labels != count:
        raise CountMismatch(f"{n_labels} labels for {count} images in {images_path}", labels_path, 4)

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=off)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_labels, offset=loff).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxFormatError(f"label {labels[bad]} >= {num_classes}", labels_path, loff + bad)
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset((x - mean) / std, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(M, rows, cols)`` and labels ``(M,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def gen_synthetic(
    num_clusters: int,
    samples_per_class: int,
    d: int,
    C: int,
    seed: int,
    std: float = 0.5,
    separation: float = 3.0,
    cluster_spread: float = 3.0,
) -> Dataset:
    """Gaussian class blobs grouped into clusters.

    Class ``c`` belongs to cluster ``c % num_clusters``. Each cluster gets a random
    centre at radius ``cluster_spread * separation``; class means sit around their
    cluster centre with pairwise distance about ``separation``. Samples are
    isotropic with standard deviation ``std``.
    """
    if C % num_clusters:
        raise ValueError(f"C={C} is not divisible by num_clusters={num_clusters}")
    rng = np.random.default_rng(seed)

    def unit(n):
        v = rng.standard_normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    centres = unit(num_clusters) * cluster_spread * separation
    # random unit offsets are nearly orthogonal in moderate d, so the pairwise
    # distance between class means in a cluster is close to `separation`
    means = centres[np.arange(C) % num_clusters] + unit(C) * separation / np.sqrt(2.0)
    labels = np.repeat(np.arange(C), samples_per_class)
    inputs = means[labels] + std * rng.standard_normal((len(labels), d))
    return Dataset(inputs, labels, C)


def cluster_of(label: int, num_clusters: int) -> int:
    return label % num_clusters


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Split ``total`` items proportionally to ``weights``, at least one each."""
    k = len(weights)
    counts = np.ones(k, dtype=np.int64)
    rest = total - k
    share = weights / weights.sum() * rest
    counts += np.floor(share).astype(np.int64)
    left = total - counts.sum()
    if left:
        frac = share - np.floor(share)
        # stable order keeps ties deterministic
        counts[np.argsort(-frac, kind="stable")[:left]] += 1
    return counts


def partition_heterogeneous(ds: Dataset, cfg: PartitionConfig) -> list:
    """Assign ``labels_per_client`` classes to each client, then split class samples.

    Classes are dealt round-robin from a seeded shuffle of the class list. Every
    holder of a class receives a share proportional to a Lognormal(0, sigma^2)
    draw times a Uniform[0.5, 1.5) factor; all samples of a class are handed out.
    Each client's samples are split into train/test per class.
    """
    C = ds.num_classes
    cfg.validate(C)
    N, s = cfg.num_clients, cfg.labels_per_client
    rng = np.random.default_rng(cfg.seed)

    order = rng.permutation(C)
    label_sets = [tuple(sorted(int(order[(n * s + j) % C]) for j in range(s))) for n in range(N)]
    holders = {c: [n for n in range(N) if c in label_sets[n]] for c in range(C)}

    weights = rng.lognormal(0.0, cfg.lognormal_sigma, size=(N, C))
    if cfg.random_factor:
        weights = weights * rng.uniform(0.5, 1.5, size=(N, C))

    per_client = [dict() for _ in range(N)]
    for c in range(C):
        idx = np.flatnonzero(ds.labels == c)
        hs = holders[c]
        if len(idx) < len(hs):
            raise PartitionError(f"class {c} has {len(idx)} samples for {len(hs)} holders")
        idx = rng.permutation(idx)
        counts = _allocate(len(idx), weights[hs, c])
        start = 0
        for n, k in zip(hs, counts):
            per_client[n][c] = idx[start : start + k]
            start += k

    shards = []
    for n in range(N):
        train_parts, test_parts = [], []
        for c in label_sets[n]:
            idx = per_client[n][c]
            n_test = 0
            if len(idx) >= 2:
                n_test = min(len(idx) - 1, max(1, int(round(len(idx) * (1 - cfg.train_test_ratio)))))
            train_parts.append(idx[n_test:])
            test_parts.append(idx[:n_test])
        train_idx = np.sort(np.concatenate(train_parts))
        test_idx = np.sort(np.concatenate(test_parts))
        shards.append(
            ClientShard(n, ds.subset(train_idx), ds.subset(test_idx), label_sets[n], train_idx, test_idx)
        )
    return shards


def subsample(ds: Dataset, size: Optional[int], seed: int) -> Dataset:
    """Seeded random subset of ``size`` samples (whole set if None)."""
    if size is None or size >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(ds))[:size]
    return ds.subset(np.sort(idx))
