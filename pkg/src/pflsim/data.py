"""Datasets, Dirichlet client partitioning, trigger embedding and poisoning."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng


class PartitionError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"features {self.X.shape} do not match {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")

    def __len__(self):
        return int(self.y.shape[0])

    @property
    def dim(self):
        return int(self.X.shape[1])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def concat(self, other):
        return Dataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), self.num_classes)

    def class_counts(self):
        return np.bincount(self.y, minlength=self.num_classes)


def empty_dataset(dim, num_classes):
    return Dataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)


@dataclass
class TriggerSpec:
    delta: np.ndarray
    mask: np.ndarray
    target: int

    def __post_init__(self):
        self.delta = np.clip(np.asarray(self.delta, dtype=np.float64), 0.0, 1.0)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.delta.shape != self.mask.shape:
            raise ValueError("delta and mask lengths differ")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be binary")

    @classmethod
    def from_indices(cls, dim, indices, target, value=0.5):
        mask = np.zeros(dim)
        mask[list(indices)] = 1.0
        return cls(np.where(mask > 0, value, 0.0), mask, int(target))

    @property
    def support(self):
        return np.flatnonzero(self.mask)

    def with_delta(self, delta):
        return TriggerSpec(delta, self.mask.copy(), self.target)

    def as_pairs(self):
        return [(int(i), float(self.delta[i])) for i in self.support]


def gen_synthetic(num_classes, dim, n_per_class, spread, seed, low=0.2, high=0.8):
    """Gaussian blobs clipped to [0, 1].

    Each class prototype sets every coordinate to ``low`` or ``high`` (a fair
    coin per coordinate), so mid-range values are rare in the data.
    """
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = derive_rng(seed, "synthetic")
    means = np.where(rng.random((num_classes, dim)) < 0.5, low, high)
    X = np.empty((num_classes * n_per_class, dim))
    y = np.repeat(np.arange(num_classes), n_per_class)
    for c in range(num_classes):
        X[c * n_per_class:(c + 1) * n_per_class] = means[c] + spread * rng.standard_normal((n_per_class, dim))
    return Dataset(np.clip(X, 0.0, 1.0), y, num_classes)


@dataclass
class TableInfo:
    columns: list
    label_column: str
    mins: list = field(default_factory=list)
    maxs: list = field(default_factory=list)
    classes: list = field(default_factory=list)


def load_table(path, label_column, feature_columns=None):
    """Read a CSV with a header row; min-max scale each feature to [0, 1].

    Constant columns scale to 0.0. Class labels are sorted (numerically when
    they all parse as numbers) and mapped to 0..C-1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if label_column not in header:
            raise SchemaError(f"label column {label_column!r} not in header")
        feats = feature_columns or [h for h in header if h != label_column]
        missing = [c for c in feats if c not in header]
        if missing:
            raise SchemaError(f"feature columns not in header: {missing}")
        fidx = [header.index(c) for c in feats]
        lidx = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for j in fidx:
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise SchemaError(f"{path}:{lineno}: non-numeric value {row[j]!r} "
                                      f"in feature column {header[j]!r}") from None
            rows.append(vals)
            labels.append(row[lidx].strip())
    if not rows:
        raise ParseError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    mins, maxs = X.min(axis=0), X.max(axis=0)
    span = maxs - mins
    scaled = np.where(span > 0, (X - mins) / np.where(span > 0, span, 1.0), 0.0)
    try:
        classes = sorted(set(labels), key=float)
    except ValueError:
        classes = sorted(set(labels))
    lut = {c: i for i, c in enumerate(classes)}
    y = np.array([lut[v] for v in labels], dtype=np.int64)
    info = TableInfo(list(feats), label_column, mins.tolist(), maxs.tolist(), classes)
    return Dataset(scaled, y, max(len(classes), 2)), info


def write_table(path, data, label_column="label"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(data.dim)] + [label_column])
        for x, lab in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(lab)])


def _largest_remainder(total, props):
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        frac = raw - base
        # stable: ties go to the lower client index
        order = np.argsort(-frac, kind="stable")
        base[order[:rest]] += 1
    return base


def dirichlet_partition(data, n_clients, alpha, seed, max_tries=100):
    """Split ``data`` into ``n_clients`` parts with per-class Dir(alpha) shares."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if n_clients == 1:
        return [data.subset(np.arange(len(data)))]
    if len(data) < n_clients:
        raise PartitionError("fewer examples than clients")
    by_class = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.y == c)
        by_class.append(idx[derive_rng(seed, "class-order", c).permutation(idx.size)])
    for attempt in range(max_tries):
        rng = derive_rng(seed, "dirichlet", attempt)
        parts = [[] for _ in range(n_clients)]
        for c, idx in enumerate(by_class):
            props = rng.dirichlet(np.full(n_clients, float(alpha)))
            quota = _largest_remainder(idx.size, props)
            start = 0
            for k in range(n_clients):
                parts[k].extend(idx[start:start + quota[k]].tolist())
                start += quota[k]
        if all(parts):
            return [data.subset(np.sort(np.array(p, dtype=np.int64))) for p in parts]
    raise PartitionError(f"could not give every client an example in {max_tries} draws")


def embed_trigger(x, trigger):
    """E(x, delta) = x * (1 - m) + delta * m, row-wise for 2-D input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trigger.mask.shape[0]:
        raise ValueError(f"feature length {x.shape[-1]} != trigger length {trigger.mask.shape[0]}")
    m = trigger.mask
    return x * (1.0 - m) + trigger.delta * m


def poison_indices(n, rate, seed):
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    k = int(np.floor(rate * n + 0.5))
    return np.sort(derive_rng(seed, "poison").permutation(n)[:k])


def split_poison(data, rate, trigger, seed):
    """Return (D_mal, D_nor): a seeded ``rate`` fraction, triggered and relabelled."""
    pool, rest = split_pool(data, rate, seed)
    return poison_dataset(pool, trigger), rest


def split_pool(data, rate, seed):
    """Clean (pool, remainder) split; the pool is what gets triggered."""
    idx = poison_indices(len(data), rate, seed)
    keep = np.setdiff1d(np.arange(len(data)), idx)
    return data.subset(idx), data.subset(keep)


def poison_dataset(pool, trigger):
    return Dataset(embed_trigger(pool.X, trigger), np.full(len(pool), trigger.target), pool.num_classes)


def stratified_split(data, fraction, seed):
    """Per-class ``round(fraction * n_c)`` examples to the held-out part."""
    held = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.y == c)
        if idx.size == 0:
            continue
        k = int(np.floor(fraction * idx.size + 0.5))
        held.extend(idx[derive_rng(seed, "holdout", c).permutation(idx.size)[:k]].tolist())
    if not held and len(data) >= 2:
        c = int(np.argmax(data.class_counts()))
        idx = np.flatnonzero(data.y == c)
        held = [int(idx[derive_rng(seed, "holdout", c).permutation(idx.size)[0]])]
    held = np.sort(np.array(held, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(data)), held)
    return data.subset(keep), data.subset(held)
