"""Synthetic data, federated partitioning, and file loaders."""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput, ParseError
from .models import LocalDataset, split_blocks

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """An unpartitioned sample set."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx])

    def as_local(self, M=1):
        return LocalDataset.with_blocks(self.features, self.labels, M)


@dataclass
class FederatedDataset:
    clients: list
    test: Dataset = None

    @property
    def N(self):
        return len(self.clients)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"
    c_percent: float = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "sorted", "mixture"):
            raise InvalidInput(f"unknown partition scheme {self.scheme!r}")
        if (self.c_percent is not None) != (self.scheme == "mixture"):
            raise InvalidInput("c_percent must be given iff scheme == 'mixture'")
        if self.c_percent is not None and not 0 <= self.c_percent <= 100:
            raise InvalidInput(f"c_percent must lie in [0, 100], got {self.c_percent}")


@dataclass(frozen=True)
class LrmeGroundTruth:
    X_G: np.ndarray
    rank: int
    d: int


def even_sizes(count, N, first_extra=0):
    """Split ``count`` into N sizes differing by at most one. The
    ``count % N`` extra samples go to clients ``first_extra, first_extra+1, ...``
    (mod N)."""
    sizes = np.full(N, count // N, dtype=np.int64)
    for k in range(count % N):
        sizes[(first_extra + k) % N] += 1
    return sizes


def _chunks(order, sizes):
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [order[bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


def partition(dataset, spec, N, M):
    """Distribute ``dataset`` over N clients with M blocks each.

    iid: seeded shuffle, then an even contiguous split.
    sorted: stable sort by label, then an even contiguous split.
    mixture: the first (100 - c)% of a seeded shuffle is split as in iid; the
    remaining c% is put in label order and split contiguously, each client's
    share appended after its shuffled share. c = 0 reproduces iid and c = 100
    reproduces sorted for the same seed.
    """
    n = len(dataset)
    if N < 1 or M < 1:
        raise InvalidInput("N and M must be >= 1")
    if N * M > n:
        raise InvalidInput(f"{n} samples cannot give {N} clients {M} blocks each")
    labels = np.asarray(dataset.labels)
    rng = np.random.default_rng(spec.seed)

    if spec.scheme == "iid":
        order = rng.permutation(n)
        parts = _chunks(order, even_sizes(n, N))
    elif spec.scheme == "sorted":
        order = np.argsort(labels, kind="stable")
        parts = _chunks(order, even_sizes(n, N))
    else:
        order = rng.permutation(n)
        n_tail = int(round(n * spec.c_percent / 100.0))
        head, tail = order[: n - n_tail], np.sort(order[n - n_tail:])
        tail = tail[np.argsort(labels[tail], kind="stable")]
        head_parts = _chunks(head, even_sizes(len(head), N))
        tail_parts = _chunks(tail, even_sizes(len(tail), N, first_extra=len(head) % N))
        parts = [np.concatenate([h, t]) for h, t in zip(head_parts, tail_parts)]

    clients = []
    for idx in parts:
        if len(idx) < M:
            raise InvalidInput(f"a client received {len(idx)} samples, fewer than M={M}")
        clients.append(LocalDataset(dataset.features[idx], labels[idx], split_blocks(len(idx), M)))
    return FederatedDataset(clients)


def label_entropy(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def train_test_split(dataset, test_fraction, seed):
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def gen_logistic(d, classes, samples, separation, seed, offset=0.0):
    """Gaussian class clusters. Class means are ``separation`` times standard
    normal vectors; each sample adds unit isotropic noise and a constant
    ``offset`` in every coordinate (uncentered features, as with raw pixel
    intensities). Labels cycle through the classes so every class is equally
    represented."""
    if classes < 2:
        raise InvalidInput("classes must be >= 2")
    if d < 1 or samples < 1:
        raise InvalidInput("d and samples must be positive")
    rng = np.random.default_rng(seed)
    means = separation * rng.standard_normal((classes, d))
    labels = np.arange(samples) % classes
    features = means[labels] + rng.standard_normal((samples, d)) + offset
    return Dataset(features, labels.astype(np.int64))


def gen_quadratic(d, N, samples_per_client, seed, noise=0.5, heterogeneity=1.0, M=1,
                  test_samples=0):
    """Federated least-squares data. Client i regresses on its own vector
    ``w + heterogeneity * v_i`` (``w``, ``v_i`` standard normal), so local
    optima differ while every local loss stays strongly convex. The test set
    uses ``w`` plus the mean client offset, the minimizer of the pooled
    population loss."""
    if d < 1 or N < 1:
        raise InvalidInput("d and N must be positive")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    offsets = heterogeneity * rng.standard_normal((N, d))
    clients = []
    for i in range(N):
        X = rng.standard_normal((samples_per_client, d))
        y = X @ (w + offsets[i]) + noise * rng.standard_normal(samples_per_client)
        clients.append(LocalDataset.with_blocks(X, y, M))
    test = None
    if test_samples:
        X = rng.standard_normal((test_samples, d))
        y = X @ (w + offsets.mean(axis=0)) + noise * rng.standard_normal(test_samples)
        test = Dataset(X, y)
    return FederatedDataset(clients, test)


def lrme_ground_truth(d, rank):
    if not 0 <= rank <= d:
        raise InvalidInput(f"rank {rank} must lie in [0, d={d}]")
    X_G = np.zeros((d, d))
    X_G[:rank, :rank] = np.eye(rank)
    return LrmeGroundTruth(X_G, rank, d)


def gen_lrme(d, rank, samples_per_client, N, noise_sigma=0.1, seed=0, M=1, test_samples=0):
    """Trace-regression data: ``D_j`` entries ~ N(0.1, 1) and
    ``y_j = <X_G, D_j> + N(0, noise_sigma^2)``."""
    truth = lrme_ground_truth(d, rank)
    rng = np.random.default_rng(seed)

    def draw(n):
        D = 0.1 + rng.standard_normal((n, d, d))
        y = np.einsum("nij,ij->n", D, truth.X_G)
        if noise_sigma > 0:
            y = y + noise_sigma * rng.standard_normal(n)
        return D, y

    clients = []
    for _ in range(N):
        D, y = draw(samples_per_client)
        clients.append(LocalDataset.with_blocks(D, y, M))
    test = Dataset(*draw(test_samples)) if test_samples else None
    return FederatedDataset(clients, test), truth


def load_idx(path):
    """Read an IDX file (MNIST layout). Returns a uint8 array shaped by the
    header dimensions: (count,) for labels, (count, rows, cols) for images."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ParseError(f"file too short for an IDX header ({len(raw)} bytes)", path)
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_LABEL_MAGIC:
        dims, offset = (count,), 8
    elif magic == IDX_IMAGE_MAGIC:
        if len(raw) < 16:
            raise ParseError(f"file too short for an image header ({len(raw)} bytes)", path)
        rows, cols = struct.unpack(">II", raw[8:16])
        dims, offset = (count, rows, cols), 16
    else:
        raise ParseError(f"bad magic number 0x{magic:08x}", path)
    expected = int(np.prod(dims))
    actual = len(raw) - offset
    if actual != expected:
        raise ParseError(f"expected {expected} payload bytes, found {actual}", path)
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_mnist(images_path, labels_path):
    """Images flattened and scaled to [0, 1]."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ParseError("expected an image file and a label file", images_path)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", labels_path)
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64))


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, label_column):
    """Comma-separated numeric table. A first row with any non-numeric field
    is taken as a header; ``label_column`` is a header name or an integer
    column index."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ParseError("empty file", path)
    header = None
    if not all(_is_number(field) for field in rows[0]):
        header, rows = rows[0], rows[1:]
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise ParseError(f"label column {label_column!r} not found", path)
        col = header.index(label_column)
    else:
        col = int(label_column)
    width = len(header) if header is not None else len(rows[0]) if rows else 0
    values = []
    for lineno, row in enumerate(rows, start=2 if header is not None else 1):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", f"{path}:{lineno}")
        try:
            values.append([float(field) for field in row])
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", f"{path}:{lineno}") from None
    table = np.asarray(values, dtype=np.float64).reshape(len(values), width)
    labels = table[:, col]
    features = np.delete(table, col, axis=1)
    if np.all(labels == np.round(labels)):
        labels = labels.astype(np.int64)
    return Dataset(features, labels)
