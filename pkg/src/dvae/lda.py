"""Speaker-discriminative ranking of candidate functionals with LDA.

Features are ranked by the magnitude of their weight in the leading
discriminant direction, i.e. the generalized eigenvector of
(S_B, S_W + ridge*I) with the largest eigenvalue.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .data import DataFormatError


@dataclass
class FunctionalTable:
    values: np.ndarray  # (N, Nf)
    labels: np.ndarray  # (N,)
    names: list[str]
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.labels = np.asarray(self.labels).astype(str)
        if self.labels.shape != (self.values.shape[0],):
            raise ValueError("one label per row required")
        if len(self.names) != self.values.shape[1]:
            raise ValueError("one name per column required")
        self.names = [str(n) for n in self.names]

    def __len__(self):
        return self.values.shape[0]

    def subset(self, rows) -> "FunctionalTable":
        return FunctionalTable(self.values[rows], self.labels[rows], list(self.names),
                               None if self.ids is None else np.asarray(self.ids)[rows])

    def split(self, train_fraction: float = 0.8, seed: int = 0):
        if not 0 < train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_train = int(round(train_fraction * len(self)))
        if n_train == 0 or n_train == len(self):
            raise ValueError("split leaves an empty side")
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:]))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, table: FunctionalTable) -> FunctionalTable:
        return FunctionalTable((table.values - self.mean) / self.std, table.labels,
                               list(table.names), table.ids)


@dataclass
class LdaResult:
    w: np.ndarray  # unit-norm leading discriminant direction
    names: list[str]
    classes: np.ndarray
    means: np.ndarray  # (C, Nf)
    covariance: np.ndarray  # shared, regularised
    priors: np.ndarray
    eigenvalue: float
    ranking: list[int] = field(default_factory=list)
    test_accuracy: float | None = None


def load_functional_table(path) -> FunctionalTable:
    """CSV with header ``id,label,<name1>,...``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"] or len(rows[0]) < 3:
        raise DataFormatError("header must be 'id,label,<name1>,...'", 1)
    names = rows[0][2:]
    ids, labels, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]):
            raise DataFormatError(f"expected {len(rows[0])} fields, found {len(row)}", lineno)
        try:
            values.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise DataFormatError(f"non-numeric value ({exc})", lineno) from None
        ids.append(row[0])
        labels.append(row[1])
    if not ids:
        raise DataFormatError("no data rows", 2)
    return FunctionalTable(np.array(values), np.array(labels), names, np.array(ids))


def save_functional_table(path, table: FunctionalTable) -> None:
    ids = table.ids if table.ids is not None else [f"r{i:06d}" for i in range(len(table))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *table.names])
        for i in range(len(table)):
            w.writerow([ids[i], table.labels[i], *[repr(float(v)) for v in table.values[i]]])


def standardize(table: FunctionalTable):
    """Zero-mean, unit-variance columns; returns ``(table, Standardizer)``."""
    mean = table.values.mean(axis=0)
    std = table.values.std(axis=0)
    bad = [table.names[j] for j in np.flatnonzero(std == 0)]
    if bad:
        raise ValueError(f"zero-variance column(s): {', '.join(bad)}")
    stats = Standardizer(mean, std)
    return stats.apply(table), stats


def scatter_matrices(values: np.ndarray, labels: np.ndarray):
    """Within-class and between-class scatter."""
    classes = np.unique(labels)
    grand = values.mean(axis=0)
    nf = values.shape[1]
    s_w = np.zeros((nf, nf))
    s_b = np.zeros((nf, nf))
    for c in classes:
        xc = values[labels == c]
        mc = xc.mean(axis=0)
        centred = xc - mc
        s_w += centred.T @ centred
        dm = (mc - grand)[:, None]
        s_b += xc.shape[0] * (dm @ dm.T)
    return s_w, s_b


def leading_discriminant(s_w: np.ndarray, s_b: np.ndarray, tol: float = 1e-10,
                         max_iter: int = 200_000):
    """Power iteration on L^-1 S_B L^-T where S_W = L L^T.

    Stops once the eigen-residual ||Mv - lambda v|| falls below
    ``tol * ||M||``.  Returns ``(w, eigenvalue)`` with ``w`` unit norm and its
    largest-magnitude entry positive.
    """
    try:
        chol, lower = cho_factor(s_w, lower=True)
    except np.linalg.LinAlgError:
        raise ValueError("within-class scatter is singular; use ridge > 0") from None
    L = np.tril(chol)
    tmp = solve_triangular(L, s_b, lower=True)
    m = solve_triangular(L, tmp.T, lower=True)
    m = 0.5 * (m + m.T)
    scale = np.linalg.norm(m, 2)
    if scale == 0:
        raise ValueError("between-class scatter is zero; classes are indistinguishable")

    v = np.random.default_rng(0).standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        mv = m @ v
        lam = float(v @ mv)
        if np.linalg.norm(mv - lam * v) <= tol * scale:
            break
        v = mv / np.linalg.norm(mv)
    else:
        warnings.warn("power iteration did not reach tolerance", RuntimeWarning)
    w = solve_triangular(L.T, v, lower=False)
    w /= np.linalg.norm(w)
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    return w, lam


def fit_lda(train: FunctionalTable, ridge: float = 1e-6) -> LdaResult:
    """Leading discriminant direction plus a shared-covariance classifier."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    x, y = train.values, train.labels
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    s_w, s_b = scatter_matrices(x, y)
    nf = x.shape[1]
    if ridge == 0 and np.linalg.cond(s_w) > 1e12:
        raise ValueError("within-class scatter is singular; use ridge > 0")
    w, lam = leading_discriminant(s_w + ridge * np.eye(nf), s_b)

    means = np.array([x[y == c].mean(axis=0) for c in classes])
    dof = len(x) - len(classes)
    cov = s_w / (dof if dof > 0 else len(x)) + ridge * np.eye(nf)
    result = LdaResult(w, list(train.names), classes, means, cov,
                       counts / counts.sum(), lam)
    result.ranking = [int(j) for j in np.argsort(-np.abs(w), kind="stable")]
    return result


def rank_features(result: LdaResult, top_k: int | None = None) -> list[tuple[str, float]]:
    """(name, |w|) pairs by descending |w|; ties keep column order."""
    nf = len(result.names)
    if top_k is None:
        top_k = nf
    if not 0 < top_k <= nf:
        raise ValueError(f"top_k must lie in 1..{nf}")
    order = np.argsort(-np.abs(result.w), kind="stable")[:top_k]
    return [(result.names[j], float(abs(result.w[j]))) for j in order]


def predict(result: LdaResult, values: np.ndarray) -> np.ndarray:
    factor = cho_factor(result.covariance, lower=True)
    coef = cho_solve(factor, result.means.T)  # (Nf, C)
    bias = -0.5 * np.sum(result.means.T * coef, axis=0) + np.log(result.priors)
    scores = np.asarray(values, dtype=np.float64) @ coef + bias
    return result.classes[np.argmax(scores, axis=1)]


def evaluate_accuracy(result: LdaResult, test: FunctionalTable) -> float:
    unseen = sorted(set(test.labels.tolist()) - set(result.classes.tolist()))
    if unseen:
        raise ValueError(f"test labels not seen in training: {unseen[:5]}")
    if len(test) == 0:
        raise ValueError("empty test table")
    return float(np.mean(predict(result, test.values) == test.labels))
