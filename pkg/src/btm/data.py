"""Dataset construction: long-tailed downsampling, balanced few-shot
subsets, synthetic Gaussian-mixture sources, and IDX ingestion.

All sampling here is a pure function of (inputs, seed); repeated calls
are bit-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"BTMDATA1"
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Feature matrix with integer class labels.

    Every class in [0, n_classes) must be represented by at least one row.
    Rows are immutable by convention: operations copy, never mutate.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0
    name: str = ""
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix (samples x dim)")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ValueError("labels must be 1-D and match the number of rows")
        if len(self.labels) == 0:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.n_classes <= 0:
            self.n_classes = int(self.labels.max()) + 1
        elif self.labels.max() >= self.n_classes:
            raise ValueError("label outside [0, n_classes)")
        self.class_counts = np.bincount(self.labels, minlength=self.n_classes)
        if np.any(self.class_counts == 0):
            k = int(np.nonzero(self.class_counts == 0)[0][0])
            raise ValueError(f"class {k} has no samples")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_indices(self, k: int) -> np.ndarray:
        return np.nonzero(self.labels == k)[0]


@dataclass(frozen=True)
class SamplerSpec:
    """How many balanced subsets to draw and how big each one is."""

    n_datasets: int
    n_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.n_datasets < 1 or self.n_per_class < 1:
            raise ValueError("n_datasets and n_per_class must be >= 1")


@dataclass(frozen=True)
class LongTailSpec:
    """Parameters of the deterministic power-law class-count profile."""

    n_classes: int
    max_count: int
    imbalance_ratio: float
    pareto_alpha: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.max_count < 1:
            raise ValueError("max_count must be positive")
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance_ratio must be >= 1")
        if self.pareto_alpha <= 0:
            raise ValueError("pareto_alpha must be positive")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def pareto_longtail_counts(spec: LongTailSpec, direct_alpha: bool = False) -> np.ndarray:
    """Per-class sample counts following a power-law decay.

    Default mode fixes the decay exponent a = log(imbalance_ratio) /
    log(n_classes) so counts[0] == max_count and counts[-1] ==
    round(max_count / imbalance_ratio). With direct_alpha=True the
    exponent is spec.pareto_alpha instead and counts are clipped at 1.
    """
    n = spec.n_classes
    ranks = np.arange(1, n + 1, dtype=np.float64)
    if direct_alpha:
        counts = _round_half_up(spec.max_count * ranks ** (-spec.pareto_alpha))
        return np.maximum(counts, 1)
    if spec.imbalance_ratio == 1.0:
        return np.full(n, spec.max_count, dtype=np.int64)
    if n == 1:
        raise ValueError("imbalance_ratio > 1 needs at least two classes")
    a = math.log(spec.imbalance_ratio) / math.log(n)
    counts = _round_half_up(spec.max_count * ranks ** (-a))
    if counts[-1] < 1:
        raise ValueError(
            f"max_count / imbalance_ratio rounds below one sample "
            f"({spec.max_count}/{spec.imbalance_ratio})"
        )
    return counts


def downsample_to_longtail(source: LabeledDataset, counts, seed: int) -> LabeledDataset:
    """Per class, keep `counts[k]` rows drawn uniformly without replacement."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != source.n_classes:
        raise ValueError("counts length must equal the number of classes")
    if np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(source.n_classes):
        idx = source.class_indices(k)
        if len(idx) < counts[k]:
            raise ValueError(
                f"class {k} has only {len(idx)} samples, need {int(counts[k])}"
            )
        chosen = rng.choice(idx, size=int(counts[k]), replace=False)
        keep.append(np.sort(chosen))
    order = np.concatenate(keep)
    return LabeledDataset(
        features=source.features[order].copy(),
        labels=source.labels[order].copy(),
        n_classes=source.n_classes,
        name=f"{source.name}/longtail",
    )


def sample_balanced_fewshot(source: LabeledDataset, n_per_class: int, seed: int) -> LabeledDataset:
    """Draw min(n_per_class, available) samples per class, uniformly
    without replacement. Shortfall classes contribute everything they
    have; the dataset name is tagged when that happens."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    shortfall = False
    for k in range(source.n_classes):
        idx = source.class_indices(k)
        take = min(n_per_class, len(idx))
        if take < n_per_class:
            shortfall = True
        chosen = rng.choice(idx, size=take, replace=False)
        keep.append(np.sort(chosen))
    order = np.concatenate(keep)
    tag = f"{source.name}/fewshot{n_per_class}"
    if shortfall:
        tag += "/short"
    return LabeledDataset(
        features=source.features[order].copy(),
        labels=source.labels[order].copy(),
        n_classes=source.n_classes,
        name=tag,
    )


def union_datasets(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Set union of two datasets; duplicate samples (identical feature row
    and label) appear once. The result is generally no longer balanced."""
    if a.dim != b.dim:
        raise ValueError(f"feature dim mismatch: {a.dim} vs {b.dim}")
    if a.n_classes != b.n_classes:
        raise ValueError(f"class set mismatch: {a.n_classes} vs {b.n_classes}")
    seen = set()
    rows = []
    labels = []
    for ds in (a, b):
        feats = np.ascontiguousarray(ds.features)
        for i in range(ds.n_samples):
            key = (int(ds.labels[i]), feats[i].tobytes())
            if key in seen:
                continue
            seen.add(key)
            rows.append(feats[i])
            labels.append(ds.labels[i])
    return LabeledDataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        n_classes=a.n_classes,
        name=f"union({a.name},{b.name})",
    )


def generate_gaussian_mixture(n_classes: int, dim: int, separation: float,
                              samples_per_class: int, seed: int) -> LabeledDataset:
    """Balanced synthetic source: class k is an isotropic unit-variance
    Gaussian centered at a seeded uniform direction scaled to radius
    `separation`."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if dim < 2:
        raise ValueError("need dim >= 2")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_classes, dim))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs / norms
    feats = np.empty((n_classes * samples_per_class, dim))
    labels = np.empty(n_classes * samples_per_class, dtype=np.int64)
    for k in range(n_classes):
        lo = k * samples_per_class
        hi = lo + samples_per_class
        feats[lo:hi] = means[k] + rng.standard_normal((samples_per_class, dim))
        labels[lo:hi] = k
    return LabeledDataset(feats, labels, n_classes=n_classes,
                          name=f"gauss{n_classes}x{samples_per_class}")


def split_per_class(source: LabeledDataset, n_first: int):
    """Split into (first n_first rows per class, the rest). Both halves
    must end up non-empty for every class."""
    first, rest = [], []
    for k in range(source.n_classes):
        idx = source.class_indices(k)
        if len(idx) <= n_first:
            raise ValueError(f"class {k} has {len(idx)} samples, cannot split at {n_first}")
        first.append(idx[:n_first])
        rest.append(idx[n_first:])
    f = np.concatenate(first)
    r = np.concatenate(rest)
    return (
        LabeledDataset(source.features[f].copy(), source.labels[f].copy(),
                       source.n_classes, f"{source.name}/head"),
        LabeledDataset(source.features[r].copy(), source.labels[r].copy(),
                       source.n_classes, f"{source.name}/tail"),
    )


def make_synthetic_problem(spec: LongTailSpec, dim: int, separation: float,
                           test_per_class: int):
    """Build a (long-tailed train, balanced test) pair from one Gaussian
    mixture so both share the same class means. The first max_count rows
    of each class form the training pool, the rest the test set."""
    full = generate_gaussian_mixture(
        spec.n_classes, dim, separation,
        samples_per_class=spec.max_count + test_per_class, seed=spec.seed,
    )
    pool, test = split_per_class(full, spec.max_count)
    counts = pareto_longtail_counts(spec)
    train = downsample_to_longtail(pool, counts, seed=spec.seed + 1)
    return train, test


def imbalance_ratio(dataset: LabeledDataset) -> float:
    """Most frequent class count divided by least frequent class count."""
    return float(dataset.class_counts.max() / dataset.class_counts.min())


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: LabeledDataset, path) -> None:
    """Binary container: magic, u32-LE JSON header length, JSON header,
    u32-LE labels, f32-LE row-major features."""
    header = {
        "version": 1,
        "n_samples": int(dataset.n_samples),
        "dim": int(dataset.dim),
        "n_classes": int(dataset.n_classes),
        "name": dataset.name,
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(dataset.labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != DATASET_MAGIC:
        raise ValueError(f"bad dataset magic in {path}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    n, d = header["n_samples"], header["dim"]
    off = 12 + hlen
    lab_bytes = 4 * n
    feat_bytes = 4 * n * d
    if len(blob) != off + lab_bytes + feat_bytes:
        raise ValueError(f"truncated dataset payload in {path}")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off + lab_bytes)
    return LabeledDataset(
        features=feats.reshape(n, d).astype(np.float64),
        labels=labels,
        n_classes=header["n_classes"],
        name=header["name"],
    )


def _read_be_u32(f, what: str) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError(f"truncated IDX header in {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, MNIST layout).

    Pixels are scaled to [0, 1] and flattened row-major.
    """
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, "image file")
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX magic in image file: 0x{magic:08x}")
        count = _read_be_u32(f, "image file")
        rows = _read_be_u32(f, "image file")
        cols = _read_be_u32(f, "image file")
        payload = f.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise ValueError("truncated IDX image payload")
        pixels = np.frombuffer(payload, dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, "label file")
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX magic in label file: 0x{magic:08x}")
        label_count = _read_be_u32(f, "label file")
        payload = f.read(label_count)
        if len(payload) < label_count:
            raise ValueError("truncated IDX label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if count != label_count:
        raise ValueError(f"IDX sample count mismatch: {count} images vs {label_count} labels")
    feats = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    return LabeledDataset(feats, labels, name="idx")
