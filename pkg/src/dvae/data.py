"""Synthetic speaker-like datasets, CSV ingestion and deterministic splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset or trial file; ``line`` is 1-based (header = line 1)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Dataset:
    X: np.ndarray
    F: np.ndarray | None = None
    labels: np.ndarray | None = None
    ids: np.ndarray | None = None
    factor_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        n = self.X.shape[0]
        if not np.all(np.isfinite(self.X)):
            raise ValueError("observations contain non-finite values")
        if self.F is not None:
            self.F = np.asarray(self.F, dtype=np.float64).reshape(n, -1)
            if not np.all(np.isfinite(self.F)):
                raise ValueError("factors contain non-finite values")
            if not self.factor_names:
                self.factor_names = [str(k + 1) for k in range(self.F.shape[1])]
            if len(self.factor_names) != self.F.shape[1]:
                raise ValueError("factor_names length does not match factor columns")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(str)
            if self.labels.shape != (n,):
                raise ValueError(f"{self.labels.shape[0]} labels for {n} rows")
        if self.ids is None:
            self.ids = np.array([f"u{i:06d}" for i in range(n)])
        else:
            self.ids = np.asarray(self.ids).astype(str)
            if self.ids.shape != (n,):
                raise ValueError(f"{self.ids.shape[0]} ids for {n} rows")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_factors(self) -> int:
        return 0 if self.F is None else self.F.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.X[rows],
            None if self.F is None else self.F[rows],
            None if self.labels is None else self.labels[rows],
            self.ids[rows],
            list(self.factor_names),
        )

    def require_factors(self) -> np.ndarray:
        if self.F is None:
            raise ValueError("dataset has no factor columns")
        return self.F

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no class labels")
        return self.labels


@dataclass
class SyntheticConfig:
    n_speakers: int = 50
    utterances_per_speaker: int = 20
    n_factors: int = 8
    x_dim: int = 64
    factor_correlation: np.ndarray | None = None  # identity when None
    mixing: str = "linear"
    session_noise_std: float = 0.05
    seed: int = 0

    def correlation(self) -> np.ndarray:
        if self.factor_correlation is None:
            return np.eye(self.n_factors)
        return np.asarray(self.factor_correlation, dtype=np.float64)


def validate_correlation(c: np.ndarray, k: int) -> np.ndarray:
    """Cholesky factor of a valid correlation matrix, else ``ValueError``."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (k, k):
        raise ValueError(f"correlation matrix must be {k}x{k}, got {c.shape}")
    if not np.allclose(c, c.T, atol=1e-12):
        raise ValueError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(c), 1.0, atol=1e-12):
        raise ValueError("correlation matrix does not have a unit diagonal")
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise ValueError("correlation matrix is not positive definite "
                         "(Cholesky factorisation failed)") from None


def mixing_matrix(x_dim: int, n_factors: int, seed: int) -> np.ndarray:
    """Seeded full-rank mixing matrix with roughly unit-norm columns."""
    rng = np.random.default_rng([seed, 0])
    a = rng.standard_normal((x_dim, n_factors)) / math.sqrt(x_dim)
    if np.linalg.matrix_rank(a) < n_factors:  # measure-zero, but keep the contract
        raise ValueError("mixing matrix is rank deficient; choose another seed")
    return a


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Speaker-level factors pushed through a fixed mixing plus session noise.

    Each speaker has its own RNG stream keyed on ``(seed, speaker)``, so the
    output does not depend on generation order.
    """
    k, dx = cfg.n_factors, cfg.x_dim
    if k < 1 or cfg.n_speakers < 1 or cfg.utterances_per_speaker < 1:
        raise ValueError("n_factors, n_speakers and utterances_per_speaker must be >= 1")
    if dx < k:
        raise ValueError(f"x_dim ({dx}) must be at least n_factors ({k})")
    if cfg.mixing not in ("linear", "tanh"):
        raise ValueError(f"unknown mixing {cfg.mixing!r}")
    if cfg.session_noise_std < 0:
        raise ValueError("session_noise_std must be non-negative")
    chol = validate_correlation(cfg.correlation(), k)
    a = mixing_matrix(dx, k, cfg.seed)

    u = cfg.utterances_per_speaker
    n = cfg.n_speakers * u
    X = np.empty((n, dx))
    F = np.empty((n, k))
    width = len(str(cfg.n_speakers - 1))
    labels = []
    for spk in range(cfg.n_speakers):
        rng = np.random.default_rng([cfg.seed, 1, spk])
        f = chol @ rng.standard_normal(k)
        clean = a @ f
        if cfg.mixing == "tanh":
            clean = np.tanh(clean)
        rows = slice(spk * u, (spk + 1) * u)
        X[rows] = clean + cfg.session_noise_std * rng.standard_normal((u, dx))
        F[rows] = f
        labels.extend([f"spk{spk:0{width}d}"] * u)
    ids = np.array([f"{lab}_{j:04d}" for lab, j in zip(labels, np.tile(np.arange(u), cfg.n_speakers))])
    return Dataset(X, F, np.array(labels), ids, [str(i + 1) for i in range(k)])


# -- CSV ---------------------------------------------------------------------
# header: id,label,f_<name>...,x_1..x_Dx ; factor block and label optional

def save_dataset(path, ds: Dataset) -> None:
    header = ["id"]
    if ds.labels is not None:
        header.append("label")
    header += [f"f_{name}" for name in (ds.factor_names if ds.F is not None else [])]
    header += [f"x_{j + 1}" for j in range(ds.X.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [ds.ids[i]]
            if ds.labels is not None:
                row.append(ds.labels[i])
            if ds.F is not None:
                row += [repr(float(v)) for v in ds.F[i]]
            row += [repr(float(v)) for v in ds.X[i]]
            w.writerow(row)


def load_dataset(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "id":
        raise DataFormatError("first column must be 'id'", 1)
    has_label = "label" in header
    f_cols = [i for i, h in enumerate(header) if h.startswith("f_")]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    known = {0} | set(f_cols) | set(x_cols) | ({header.index("label")} if has_label else set())
    unknown = [header[i] for i in range(len(header)) if i not in known]
    if unknown:
        raise DataFormatError(f"unrecognised columns {unknown}", 1)
    if not x_cols:
        raise DataFormatError("no observation columns (x_*)", 1)

    ids, labels, F, X, seen = [], [], [], [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", lineno)
        rid = row[0]
        if rid in seen:
            raise DataFormatError(f"duplicate id {rid!r} (first on line {seen[rid]})", lineno)
        seen[rid] = lineno
        try:
            X.append([float(row[i]) for i in x_cols])
            F.append([float(row[i]) for i in f_cols])
        except ValueError as exc:
            raise DataFormatError(f"non-numeric value ({exc})", lineno) from None
        if not (np.all(np.isfinite(X[-1])) and np.all(np.isfinite(F[-1]))):
            raise DataFormatError("non-finite value", lineno)
        ids.append(rid)
        if has_label:
            labels.append(row[header.index("label")])
    if not ids:
        raise DataFormatError("no data rows", 2)
    return Dataset(
        np.array(X),
        np.array(F) if f_cols else None,
        np.array(labels) if has_label else None,
        np.array(ids),
        [header[i][2:] for i in f_cols],
    )


def split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0,
          speaker_disjoint: bool = False) -> tuple[Dataset, Dataset]:
    """Shuffled train/test partition; utterance-level unless ``speaker_disjoint``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    if speaker_disjoint:
        speakers = np.unique(ds.require_labels())
        perm = rng.permutation(len(speakers))
        n_train = int(round(train_fraction * len(speakers)))
        train_spk = set(speakers[perm[:n_train]])
        mask = np.array([lab in train_spk for lab in ds.labels])
        train_idx, test_idx = np.flatnonzero(mask), np.flatnonzero(~mask)
    else:
        perm = rng.permutation(len(ds))
        n_train = int(round(train_fraction * len(ds)))
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"split leaves an empty side ({len(train_idx)}/{len(test_idx)})")
    return ds.subset(train_idx), ds.subset(test_idx)
