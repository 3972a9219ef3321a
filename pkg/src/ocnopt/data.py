"""Datasets: CSV ingestion, synthetic generators and seeded splits.

Features are standardized with statistics of the training split only.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn import datasets as skd

from .errors import ParseError

SYNTHETIC = ("two-moons", "spirals", "circles", "linear-regression", "digits", "wine")
REGRESSION = ("linear-regression",)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray = None
    std: np.ndarray = None
    feature_names: tuple = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.mean is None:
            self.fit_normalization()

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def in_dim(self):
        return self.X.shape[1]

    @property
    def n_classes(self):
        return int(self.y.max()) + 1 if self.task == "classification" else 0

    @property
    def out_dim(self):
        if self.task == "classification":
            return self.n_classes
        return 1 if self.y.ndim == 1 else self.y.shape[1]

    def fit_normalization(self):
        Xt = self.X[self.train]
        self.mean = Xt.mean(axis=0)
        std = Xt.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def normalized(self, X):
        return (X - self.mean) / self.std

    def split(self, name):
        idx = {"train": self.train, "val": self.val, "test": self.test}[name]
        y = self.y[idx]
        if self.task != "classification" and y.ndim == 1:
            y = y[:, None]
        return self.normalized(self.X[idx]), y


def split_indices(n, seed, fractions=(0.7, 0.15, 0.15)):
    """Seeded shuffle cut into train/val/test; the test split takes the remainder."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def _spirals(n, noise, rng, arms=3):
    per = [n // arms + (1 if j < n % arms else 0) for j in range(arms)]
    X, y = [], []
    for j, m in enumerate(per):
        r = np.linspace(0.05, 1.0, m)
        t = np.linspace(j * 2 * np.pi / arms, j * 2 * np.pi / arms + 1.75 * np.pi, m)
        t = t + rng.normal(0.0, noise, m)
        X.append(np.column_stack([r * np.sin(t), r * np.cos(t)]))
        y.append(np.full(m, j))
    return np.vstack(X), np.concatenate(y)


def make_synthetic(kind, n=500, noise=0.1, seed=0, split=(0.7, 0.15, 0.15)):
    """Deterministic toy datasets.

    ``digits`` (8x8 handwritten digits, 10 classes) and ``wine`` (13
    features, 3 classes) are the bundled scikit-learn copies; ``n`` and
    ``noise`` are ignored for them.
    """
    if kind not in SYNTHETIC:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {SYNTHETIC}")
    if kind not in ("digits", "wine") and n < 10:
        raise ValueError("synthetic datasets need n >= 10")
    rng = np.random.default_rng(seed)
    task = "regression" if kind in REGRESSION else "classification"
    if kind == "two-moons":
        X, y = skd.make_moons(n, noise=noise, random_state=int(rng.integers(2**31)))
    elif kind == "circles":
        X, y = skd.make_circles(n, noise=noise, factor=0.5, random_state=int(rng.integers(2**31)))
    elif kind == "spirals":
        X, y = _spirals(n, noise, rng)
    elif kind == "linear-regression":
        X, y = skd.make_regression(n, n_features=4, n_informative=4, noise=noise,
                                   random_state=int(rng.integers(2**31)))
        y = y / np.std(y)
    elif kind == "digits":
        X, y = skd.load_digits(return_X_y=True)
    else:
        X, y = skd.load_wine(return_X_y=True)
    y = np.asarray(y, dtype=np.int64 if task == "classification" else np.float64)
    tr, va, te = split_indices(len(y), seed, split)
    return Dataset(np.asarray(X, dtype=np.float64), y, task, tr, va, te)


def load_csv(path, label_column="label", task="classification", seed=0,
             split=(0.7, 0.15, 0.15)):
    """Numeric CSV with a header row; one column holds the label.

    Classification labels are mapped to ``0..C-1`` in sorted order of their
    numeric values.  Ragged rows, non-numeric or non-finite cells, and a
    missing label column raise ``ParseError`` naming line and column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        if label_column not in header:
            raise ParseError(f"{path}: no column named {label_column!r} in header", line=1)
        li = header.index(label_column)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}",
                                 line=line_no)
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{line_no}:{col}: non-numeric cell {cell!r}",
                                     line=line_no, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{line_no}:{col}: non-finite cell {cell!r}",
                                     line=line_no, column=col)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows", line=2)
    A = np.array(rows, dtype=np.float64)
    y = A[:, li]
    X = np.delete(A, li, axis=1)
    if task == "classification":
        classes = np.unique(y)
        y = np.searchsorted(classes, y).astype(np.int64)
    names = tuple(h for j, h in enumerate(header) if j != li)
    tr, va, te = split_indices(len(y), seed, split)
    return Dataset(X, y, task, tr, va, te, feature_names=names)


def write_csv(path, X, y, label_column="label"):
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(X.shape[1])] + [label_column])
        for xi, yi in zip(X, y):
            w.writerow([repr(float(v)) for v in xi] + [repr(yi.item() if hasattr(yi, "item") else yi)])


def load_dataset(cfg, seed):
    """Dataset from a ``DataConfig``: a CSV path or a named generator."""
    if cfg.path:
        return load_csv(cfg.path, cfg.label_column, cfg.task, seed, tuple(cfg.split))
    return make_synthetic(cfg.kind, cfg.n, cfg.noise, seed, tuple(cfg.split))
