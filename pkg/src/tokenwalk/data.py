"""Datasets: LIBSVM text I/O, synthetic generators, normalization, splitting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse

from .losses import DataShard

REGRESSION = "regression"
CLASSIFICATION = "classification"


class ParseError(ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Dataset:
    """``features`` is an (n, p) dense array or CSR matrix, ``labels`` a length-n vector."""

    features: np.ndarray | scipy.sparse.csr_matrix
    labels: np.ndarray
    task: str = REGRESSION

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the number of rows")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def dense(self):
        if scipy.sparse.issparse(self.features):
            return replace(self, features=self.features.toarray())
        return self

    def content_hash(self):
        h = hashlib.sha256()
        X = self.features
        if scipy.sparse.issparse(X):
            X = X.tocsr()
            for arr in (X.indptr, X.indices, X.data):
                h.update(np.ascontiguousarray(arr).tobytes())
        else:
            h.update(np.ascontiguousarray(X, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(repr(X.shape).encode())
        return h.hexdigest()


def _num(tok, lineno, what):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(lineno, f"non-numeric {what} {tok!r}") from None


def parse_libsvm(stream, n_features=None, task=REGRESSION):
    """Read ``label idx:val ...`` lines with 1-based, strictly increasing indices.

    Blank lines are skipped and anything after ``#`` is ignored.  The feature
    count is the largest index seen unless ``n_features`` is given.
    """
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = stream
    labels, indptr, indices, values = [], [0], [], []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        labels.append(_num(toks[0], lineno, "label"))
        last = 0
        for tok in toks[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                idx = int(idx_s)
            except ValueError:
                raise ParseError(lineno, f"non-numeric index {idx_s!r}") from None
            if idx < 1:
                raise ParseError(lineno, f"indices are 1-based, got {idx}")
            if idx <= last:
                raise ParseError(lineno, f"index {idx} does not increase (previous {last})")
            last = idx
            indices.append(idx - 1)
            values.append(_num(val_s, lineno, "value"))
        indptr.append(len(indices))
    p = (max(indices) + 1) if indices else 0
    if n_features is not None:
        if n_features < p:
            raise ValueError(f"n_features={n_features} but index {p} appears")
        p = n_features
    X = scipy.sparse.csr_matrix(
        (np.array(values, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(labels), p),
    )
    if task == CLASSIFICATION:
        labels = binarize_labels(np.array(labels))
    return Dataset(X, np.array(labels, dtype=float), task)


def serialize_libsvm(dataset):
    X = scipy.sparse.csr_matrix(dataset.features)
    X.eliminate_zeros()
    X.sort_indices()
    out = []
    for r in range(X.shape[0]):
        lo, hi = X.indptr[r], X.indptr[r + 1]
        feats = " ".join(f"{j + 1}:{v!r}" for j, v in zip(X.indices[lo:hi].tolist(), X.data[lo:hi].tolist()))
        out.append(f"{float(dataset.labels[r])!r} {feats}".rstrip())
    return "".join(line + "\n" for line in out)


def binarize_labels(labels, positive=None):
    """Map labels to {-1, +1}: ``positive`` vs rest, or >0 vs <=0 when unset."""
    labels = np.asarray(labels, dtype=float)
    if positive is None:
        return np.where(labels > 0, 1.0, -1.0)
    return np.where(labels == positive, 1.0, -1.0)


def load_libsvm(path, task=REGRESSION, positive_label=None, n_features=None):
    with open(path) as fh:
        ds = parse_libsvm(fh, n_features=n_features)
    if task == CLASSIFICATION:
        ds = replace(ds, labels=binarize_labels(ds.labels, positive_label), task=task)
    return ds


def partition(dataset, n_agents, scheme="iid-equal", seed=0):
    """Disjoint near-equal shards covering ``dataset``.

    ``iid-equal`` shuffles with ``seed`` first; ``contiguous`` keeps file order.
    """
    n = dataset.n_rows
    if n_agents < 1 or n_agents > n:
        raise ValueError(f"cannot split {n} rows across {n_agents} agents")
    if scheme == "iid-equal":
        order = np.random.default_rng(seed).permutation(n)
    elif scheme == "contiguous":
        order = np.arange(n)
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    shards = []
    for i, idx in enumerate(np.array_split(order, n_agents)):
        shards.append(DataShard(dataset.features[idx], dataset.labels[idx], owner=i, row_ids=idx))
    return shards


def shard_manifest(shards):
    return {str(s.owner): [int(r) for r in s.row_ids] for s in shards}


def train_test_split(dataset, test_fraction=0.2, seed=0):
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    n = dataset.n_rows
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


@dataclass(frozen=True)
class Normalization:
    mode: str
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def apply(self, dataset):
        if self.mode == "none":
            return dataset
        if self.mode == "unit-row":
            return _unit_rows(dataset)
        X = np.asarray(dataset.dense().features, dtype=float)
        return replace(dataset, features=(X - self.mean) / self.scale)


def normalize(dataset, mode="none"):
    """Fit a normalization on ``dataset`` (the training split) and apply it.

    Returns the transformed dataset and the fitted :class:`Normalization`, whose
    ``apply`` reuses the training statistics on a test split.
    """
    if mode == "none":
        norm = Normalization(mode)
    elif mode == "per-feature-standardize":
        X = np.asarray(dataset.dense().features, dtype=float)
        mean = X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1])
        scale = X.std(axis=0) if X.shape[0] else np.ones(X.shape[1])
        scale = np.where(scale > 0, scale, 1.0)
        norm = Normalization(mode, mean, scale)
    elif mode == "unit-row":
        norm = Normalization(mode)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return norm.apply(dataset), norm


def _unit_rows(dataset):
    X = dataset.features
    if scipy.sparse.issparse(X):
        norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
        inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
        return replace(dataset, features=scipy.sparse.diags(inv) @ X)
    norms = np.linalg.norm(X, axis=1)
    return replace(dataset, features=X / np.where(norms > 0, norms, 1.0)[:, None])


def _column_scales(p, feature_var):
    if feature_var is None:
        return np.ones(p)
    lo, hi = feature_var
    return np.sqrt(np.linspace(lo, hi, p))


def synthesize_regression(n_rows, p, noise_sigma=0.1, seed=0, feature_var=None):
    """Gaussian design, ``y = A x* + noise``.  Returns ``(dataset, x*)``.

    ``feature_var=(lo, hi)`` spreads the column variances linearly over
    ``[lo, hi]`` to control the conditioning; default is unit variance.
    """
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(p)
    A = rng.standard_normal((n_rows, p)) * _column_scales(p, feature_var)
    y = A @ x_true + noise_sigma * rng.standard_normal(n_rows)
    return Dataset(A, y, REGRESSION), x_true


def synthesize_classification(n_rows, p, margin=0.1, seed=0, flip_prob=0.05, feature_var=None):
    """Gaussian points pushed ``margin`` away from a random hyperplane.

    Labels are the side of the hyperplane, each flipped with ``flip_prob``.
    Returns ``(dataset, normal)`` with ``normal`` the unit hyperplane normal.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(p)
    w /= np.linalg.norm(w)
    A = rng.standard_normal((n_rows, p))
    y = np.where(A @ w >= 0, 1.0, -1.0)
    A += margin * y[:, None] * w[None, :]
    A *= _column_scales(p, feature_var)
    flip = rng.random(n_rows) < flip_prob
    y = np.where(flip, -y, y)
    return Dataset(A, y, CLASSIFICATION), w


def write_ground_truth(path, x_true, meta):
    with open(path, "w") as fh:
        json.dump({**meta, "x_true": [float(v) for v in x_true]}, fh, indent=2)
