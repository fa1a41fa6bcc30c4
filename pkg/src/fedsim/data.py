"""Dataset synthesis, IDX loading, Dirichlet partitioning and label attacks."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray   # (n, d_in) float64
    labels: np.ndarray     # (n,) ints in [0, C)
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigurationError("dataset features/labels shape mismatch")
        if len(self.labels) == 0:
            raise ConfigurationError("dataset must be nonempty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigurationError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("dataset features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[indices], self.labels[indices],
                       self.num_classes, self.provenance)


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    counts: np.ndarray         # (M, C) integer counts N_{m,c}
    distributions: np.ndarray  # (M, C) rows a_m; zero rows for empty clients
    alpha: float
    seed: int
    empty_clients: tuple[int, ...] = field(default_factory=tuple)

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def client_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def report(self) -> dict:
        return {
            "clients": self.num_clients,
            "alpha": self.alpha,
            "seed": self.seed,
            "counts": self.counts.tolist(),
            "distributions": self.distributions.tolist(),
            "empty_clients": list(self.empty_clients),
        }


def gen_synthetic(num_classes: int, input_dim: int, n_per_class: int,
                  separation: float, seed: int) -> Dataset:
    """Class-conditional unit Gaussians around seeded random unit directions."""
    if input_dim < 1:
        raise ConfigurationError("input_dim must be >= 1")
    if num_classes < 2 or n_per_class < 1 or separation <= 0:
        raise ConfigurationError("bad synthetic dataset parameters")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    feats = []
    labels = []
    for c in range(num_classes):
        feats.append(separation * dirs[c] + rng.standard_normal((n_per_class, input_dim)))
        labels.append(np.full(n_per_class, c, dtype=np.intp))
    return Dataset(np.concatenate(feats), np.concatenate(labels), num_classes, "synthetic")


def synthetic_train_test(num_classes: int, input_dim: int, n_train_per_class: int,
                         n_test_per_class: int, separation: float, seed: int
                         ) -> tuple[Dataset, Dataset]:
    """Train/test splits drawn from the same seeded class-conditional Gaussians.

    A single generation pass guarantees both splits share the class means;
    the first n_train samples of each class block form the train set.
    """
    per = n_train_per_class + n_test_per_class
    full = gen_synthetic(num_classes, input_dim, per, separation, seed)
    train_idx, test_idx = [], []
    for c in range(num_classes):
        start = c * per
        train_idx.append(np.arange(start, start + n_train_per_class))
        test_idx.append(np.arange(start + n_train_per_class, start + per))
    return (full.subset(np.concatenate(train_idx)),
            full.subset(np.concatenate(test_idx)))


def _read_idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[tuple[int, ...], int]:
    need = 4 * (1 + ndim)
    if len(raw) < need:
        raise FormatError(f"{path}: truncated header, file ends at offset {len(raw)}")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    return dims, need


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label pair into a normalized flat dataset.

    Pixels are scaled to [0, 1], flattened, then standardized by the global
    pixel mean and standard deviation.
    """
    with open(images_path, "rb") as f:
        img_raw = f.read()
    with open(labels_path, "rb") as f:
        lab_raw = f.read()
    (n_img, rows, cols), img_off = _read_idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab_off = _read_idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"images report {n_img} items but labels report {n_lab}")
    expected = img_off + n_img * rows * cols
    if len(img_raw) != expected:
        raise FormatError(
            f"{images_path}: expected {expected} bytes, payload ends at offset {len(img_raw)}")
    if len(lab_raw) != lab_off + n_lab:
        raise FormatError(
            f"{labels_path}: expected {lab_off + n_lab} bytes, payload ends at offset {len(lab_raw)}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=img_off)
    feats = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    std = feats.std()
    feats = (feats - feats.mean()) / (std if std > 0 else 1.0)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=lab_off).astype(np.intp)
    num_classes = int(labels.max()) + 1
    return Dataset(feats, labels, num_classes, "idx-file")


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Apportion ``total`` items by ``proportions`` with exact conservation."""
    quotas = total * proportions
    base = np.floor(quotas).astype(np.intp)
    rem = total - base.sum()
    if rem > 0:
        # ties broken toward the lowest index via stable sort
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:rem]] += 1
    elif rem < 0:  # float round-up pathology; trim the largest shares
        order = np.argsort(-base, kind="stable")
        base[order[:-rem]] -= 1
    return base


def dirichlet_partition(dataset: Dataset, num_clients: int, alpha: float,
                        seed: int) -> Partition:
    """Per class, draw client shares from Dir(alpha) and apportion the samples.

    Counts are conserved exactly and index lists are disjoint; clients may
    end up with zero samples of some (or all) classes.
    """
    if num_clients < 1:
        raise ConfigurationError("need at least one client")
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    rng = np.random.default_rng(seed)
    c_count = dataset.num_classes
    lists: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    counts = np.zeros((num_clients, c_count), dtype=np.intp)
    for c in range(c_count):
        idx = np.flatnonzero(dataset.labels == c)
        draws = rng.gamma(alpha, 1.0, num_clients)
        total = draws.sum()
        q = draws / total if total > 0 else np.full(num_clients, 1.0 / num_clients)
        target = _largest_remainder(len(idx), q)
        rng.shuffle(idx)
        offset = 0
        for m in range(num_clients):
            lists[m].append(idx[offset:offset + target[m]])
            counts[m, c] = target[m]
            offset += target[m]
    client_indices = [np.sort(np.concatenate(parts)) for parts in lists]
    sizes = counts.sum(axis=1)
    dist = np.zeros((num_clients, c_count))
    nonempty = sizes > 0
    dist[nonempty] = counts[nonempty] / sizes[nonempty, None]
    empty = tuple(int(m) for m in np.flatnonzero(~nonempty))
    if empty:
        warnings.warn(f"clients with zero samples: {empty}; they are skipped in sampling")
    return Partition(client_indices, counts, dist, float(alpha), int(seed), empty)


def exponential_imbalance(dataset: Dataset, im_ratio: float, seed: int) -> Dataset:
    """Subsample per-class sizes along an exponential decay profile.

    Class c keeps round(N_max * im_ratio^(-c / (C-1))) samples; im_ratio = 1
    leaves the dataset unchanged.
    """
    if im_ratio < 1:
        raise ConfigurationError("imbalance ratio must be >= 1")
    if im_ratio == 1:
        return dataset
    rng = np.random.default_rng(seed)
    counts = dataset.class_counts()
    n_max = int(counts.max())
    c_count = dataset.num_classes
    keep = []
    for c in range(c_count):
        target = int(round(n_max * im_ratio ** (-c / (c_count - 1))))
        if target == 0:
            raise ConfigurationError(
                f"imbalance ratio {im_ratio} drives class {c} to zero samples")
        idx = np.flatnonzero(dataset.labels == c)
        if target < len(idx):
            idx = rng.choice(idx, size=target, replace=False)
        keep.append(idx)
    order = np.sort(np.concatenate(keep))
    return dataset.subset(order)


def class_distribution(partition: Partition, m: int) -> np.ndarray:
    """Normalized class-count vector a_m of client m."""
    size = partition.counts[m].sum()
    if size == 0:
        raise DomainError(f"client {m} has no samples")
    return partition.counts[m] / size


def sample_meta_set(dataset: Dataset, per_class: int, seed: int) -> np.ndarray:
    """Seeded class-balanced index draw for a server-held meta set."""
    if per_class < 1:
        raise ConfigurationError("meta set needs at least one sample per class")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise ConfigurationError(f"class {c} has fewer than {per_class} samples for the meta set")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(picks))


def augment_with_meta(client_indices: np.ndarray, meta_indices: np.ndarray,
                      dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the meta set onto a client's index view.

    Returns the combined indices and the updated class counts.
    """
    client_indices = np.asarray(client_indices, dtype=np.intp)
    meta_indices = np.asarray(meta_indices, dtype=np.intp)
    combined = np.concatenate([client_indices, meta_indices])
    counts = np.bincount(dataset.labels[combined], minlength=dataset.num_classes)
    return combined, counts


def poison_labels(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Replace labels by seeded uniform-random classes; features untouched."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, num_classes, size=len(labels)).astype(np.intp)
