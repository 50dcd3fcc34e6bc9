"""DCI scores: compactness, modularity and explicitness from regressor importances."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.linear_model import Lasso

_SNAP = 1e-12


@dataclass
class ImportanceMatrix:
    R: np.ndarray  # (K factors, D latent dims), non-negative
    factor_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        if np.any(self.R < 0) or not np.all(np.isfinite(self.R)):
            raise ValueError("importances must be finite and non-negative")
        if not self.factor_names:
            self.factor_names = [str(k + 1) for k in range(self.R.shape[0])]
        if len(self.factor_names) != self.R.shape[0]:
            raise ValueError("one name per factor row required")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["factor"] + [f"dim_{d + 1}" for d in range(self.R.shape[1])])
            for name, row in zip(self.factor_names, self.R):
                w.writerow([name] + [repr(float(v)) for v in row])


@dataclass
class DciScores:
    compactness: np.ndarray  # (K,)
    modularity: np.ndarray  # (D,)
    explicitness: np.ndarray  # (K,) held-out MSE, lower is better
    compactness_agg: float
    modularity_agg: float
    explicitness_mean: float
    zero_factors: list[int] = field(default_factory=list)
    zero_dims: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "compactness": self.compactness.tolist(),
            "modularity": self.modularity.tolist(),
            "explicitness": self.explicitness.tolist(),
            "aggregates": {
                "compactness": self.compactness_agg,
                "modularity": self.modularity_agg,
                "explicitness": self.explicitness_mean,
                "compactness_mean": float(self.compactness.mean()),
                "modularity_mean": float(self.modularity.mean()),
            },
            "flags": {"zero_importance_factors": self.zero_factors,
                      "zero_importance_dims": self.zero_dims},
        }


def _matrix(R) -> np.ndarray:
    return R.R if isinstance(R, ImportanceMatrix) else np.atleast_2d(np.asarray(R, float))


def _one_minus_entropy(p_rows: np.ndarray, base: int) -> np.ndarray:
    """1 - H(p)/log(base) per row; rows summing to zero score 0."""
    sums = p_rows.sum(axis=1, keepdims=True)
    out = np.zeros(p_rows.shape[0])
    ok = sums[:, 0] > 0
    if base < 2:
        out[ok] = 1.0  # a single outcome has zero entropy
        return out
    p = p_rows[ok] / sums[ok]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    out[ok] = 1.0 + plogp.sum(axis=1) / np.log(base)
    # p*log(p) rounding leaves ~1e-16 residue at the fixed points 0 and 1
    out[np.abs(out) < _SNAP] = 0.0
    out[np.abs(out - 1.0) < _SNAP] = 1.0
    return np.clip(out, 0.0, 1.0)


def compactness(R) -> np.ndarray:
    """Per factor: 1 + sum_d p_kd log_D p_kd, p normalised over dims."""
    r = _matrix(R)
    return _one_minus_entropy(r, r.shape[1])


def modularity(R) -> np.ndarray:
    """Per latent dim: 1 + sum_k p_kd log_K p_kd, p normalised over factors."""
    r = _matrix(R)
    return _one_minus_entropy(r.T, r.shape[0])


def dci_scores(R, explicitness) -> DciScores:
    r = _matrix(R)
    comp, mod = compactness(r), modularity(r)
    total = r.sum()
    if total > 0:
        comp_agg = float(np.sum(comp * r.sum(axis=1) / total))
        mod_agg = float(np.sum(mod * r.sum(axis=0) / total))
    else:
        comp_agg = mod_agg = 0.0
    expl = np.asarray(explicitness, dtype=np.float64)
    return DciScores(comp, mod, expl, comp_agg, mod_agg, float(expl.mean()),
                     np.flatnonzero(r.sum(axis=1) == 0).tolist(),
                     np.flatnonzero(r.sum(axis=0) == 0).tolist())


def standardize_factors(factors: np.ndarray, names=None) -> np.ndarray:
    f = np.asarray(factors, dtype=np.float64)
    std = f.std(axis=0)
    if np.any(std == 0):
        bad = [names[k] if names else str(k) for k in np.flatnonzero(std == 0)]
        raise ValueError(f"constant factor column(s) {bad}; standardisation undefined")
    return (f - f.mean(axis=0)) / std


def fit_importance(latents, factors, split_seed: int = 0, regressor: str = "forest",
                   factor_names=None, n_estimators: int = 100, max_depth: int = 8,
                   lasso_alpha: float = 0.01, train_fraction: float = 0.8):
    """One regressor per factor on an 80/20 split.

    Returns ``(ImportanceMatrix, explicitness)`` where explicitness is the
    held-out MSE of each (standardised) factor.
    """
    z = np.asarray(latents, dtype=np.float64)
    f = standardize_factors(factors, factor_names)
    n = z.shape[0]
    if f.shape[0] != n:
        raise ValueError(f"{n} latent rows but {f.shape[0]} factor rows")
    if n < 100:
        raise ValueError(f"need at least 100 rows to fit importances, got {n}")
    perm = np.random.default_rng(split_seed).permutation(n)
    n_train = int(round(train_fraction * n))
    tr, te = perm[:n_train], perm[n_train:]

    if regressor == "lasso":
        mean, std = z[tr].mean(axis=0), z[tr].std(axis=0)
        std[std == 0] = 1.0
        z = (z - mean) / std
    elif regressor != "forest":
        raise ValueError(f"unknown regressor {regressor!r}")

    k_fac = f.shape[1]
    R = np.zeros((k_fac, z.shape[1]))
    expl = np.zeros(k_fac)
    for k in range(k_fac):
        if regressor == "forest":
            model = RandomForestRegressor(n_estimators=n_estimators, max_depth=max_depth,
                                          random_state=split_seed + k, n_jobs=1)
            model.fit(z[tr], f[tr, k])
            R[k] = model.feature_importances_
        else:
            model = Lasso(alpha=lasso_alpha).fit(z[tr], f[tr, k])
            R[k] = np.abs(model.coef_)
        expl[k] = float(np.mean((model.predict(z[te]) - f[te, k]) ** 2))
    names = list(factor_names) if factor_names else None
    return ImportanceMatrix(R, names or []), expl


def dci(latents, factors, split_seed: int = 0, regressor: str = "forest",
        factor_names=None, **kwargs):
    """Convenience wrapper: importances, then all DCI scores."""
    imp, expl = fit_importance(latents, factors, split_seed, regressor, factor_names,
                               **kwargs)
    return imp, dci_scores(imp, expl)
