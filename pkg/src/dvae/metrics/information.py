"""Monte Carlo information estimates under the aggregate posterior.

q(s) = 1/M sum_m q(s|x_m) over a sample of M observations.  Latents are
drawn from every q(s|x_m) ``mc_samples`` times, and marginals over a subset
of dimensions are obtained by dropping the other coordinates, which is exact
for diagonal Gaussians.  All quantities are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..vae import LOG_2PI, GaussianPosterior, encode

ENTROPY_FLOOR = 1e-3
SATURATION_TOL = 1e-3
_CHUNK = 128


@dataclass
class Estimate:
    value: float
    stderr: float
    flagged: bool = False


@dataclass
class WsepinResult:
    value: float
    flagged: bool
    mi_joint: float = float("nan")
    mi_without: list[float] = field(default_factory=list)
    mi_single: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    reasons: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "flagged": self.flagged,
            "reasons": list(self.reasons),
            "mi_joint": self.mi_joint,
            "mi_without": list(self.mi_without),
            "mi_single": list(self.mi_single),
            "entropy": list(self.entropy),
        }


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


def _mc_terms(post: GaussianPosterior, masks: np.ndarray, mc_samples: int, seed: int):
    """Per-observation averages of log q(s_S|x) and log q(s_S) for each mask S.

    ``masks`` is (n_subsets, D) of 0/1.  Returns two (M, n_subsets) arrays
    (own log density, aggregate log density), each averaged over the
    ``mc_samples`` draws of that observation.
    """
    mu, lv = post.mu, post.log_var
    n_obs, _ = mu.shape
    if n_obs < 2:
        raise ValueError("need at least 2 observations")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    masks = np.asarray(masks, dtype=np.float64)
    rng = np.random.default_rng(seed)
    std = np.exp(0.5 * lv)
    prec = np.exp(-lv)
    noise = rng.standard_normal((mc_samples, n_obs, mu.shape[1]))
    s_all = (mu[None] + std[None] * noise).reshape(-1, mu.shape[1])  # draw-major
    src = np.tile(np.arange(n_obs), mc_samples)

    # sum_{d in S} log N(s_d; mu_md, var_md) expanded in s so that every
    # subset is one row block of a single matrix product
    const = -0.5 * (LOG_2PI + lv + mu * mu * prec) @ masks.T  # (M, K)
    right = np.vstack([-0.5 * prec.T, (mu * prec).T])  # (2D, M)
    n_sub = masks.shape[0]
    own = np.empty((s_all.shape[0], n_sub))
    agg = np.empty_like(own)
    log_m = math.log(n_obs)
    for start in range(0, s_all.shape[0], _CHUNK):
        s = s_all[start:start + _CHUNK]
        c = len(s)
        left = np.concatenate([s[None] ** 2 * masks[:, None, :],
                               s[None] * masks[:, None, :]], axis=2)  # (K, c, 2D)
        sub = left.reshape(n_sub * c, -1) @ right
        sub = sub.reshape(n_sub, c, n_obs) + const.T[:, None, :]
        agg[start:start + c] = (_lse(sub, axis=2) - log_m).T
        own[start:start + c] = sub[:, np.arange(c), src[start:start + c]].T
    own = own.reshape(mc_samples, n_obs, -1).mean(axis=0)
    agg = agg.reshape(mc_samples, n_obs, -1).mean(axis=0)
    return own, agg


def _mean_se(per_obs: np.ndarray):
    n = per_obs.shape[0]
    return per_obs.mean(axis=0), per_obs.std(axis=0, ddof=1) / math.sqrt(n)


def _check_dims(dims, d: int) -> np.ndarray:
    dims = np.atleast_1d(np.asarray(dims, dtype=int))
    if dims.size == 0:
        raise ValueError("dims must select at least one latent dimension")
    if dims.min() < 0 or dims.max() >= d or len(set(dims.tolist())) != dims.size:
        raise ValueError(f"dims {dims.tolist()} invalid for latent size {d}")
    return dims


def mi_from_posterior(post: GaussianPosterior, dims=None, mc_samples: int = 8,
                      seed: int = 0) -> Estimate:
    """I(x; s_dims) with x uniform over the observations behind ``post``."""
    d = post.latent_dim
    dims = np.arange(d) if dims is None else _check_dims(dims, d)
    mask = np.zeros((1, d))
    mask[0, dims] = 1.0
    own, agg = _mc_terms(post, mask, mc_samples, seed)
    value, se = _mean_se(own - agg)
    return Estimate(float(value[0]), float(se[0]))


def entropy_from_posterior(post: GaussianPosterior, dim: int, mc_samples: int = 8,
                           seed: int = 0) -> Estimate:
    """Differential entropy of one coordinate of the aggregate posterior.

    Flagged when the estimate falls below ``ENTROPY_FLOOR`` (near-deterministic
    dimension), which is where WSEPIN would divide by ~0.
    """
    _check_dims([dim], post.latent_dim)
    mask = np.zeros((1, post.latent_dim))
    mask[0, dim] = 1.0
    _, agg = _mc_terms(post, mask, mc_samples, seed)
    value, se = _mean_se(-agg)
    return Estimate(float(value[0]), float(se[0]), bool(value[0] < ENTROPY_FLOOR))


def wsepin_from_posterior(post: GaussianPosterior, mc_samples: int = 8,
                          seed: int = 0) -> WsepinResult:
    d = post.latent_dim
    if d < 2:
        raise ValueError("WSEPIN needs at least 2 latent dimensions")
    eye = np.eye(d)
    masks = np.vstack([np.ones((1, d)), 1.0 - eye, eye])
    own, agg = _mc_terms(post, masks, mc_samples, seed)
    mi, _ = _mean_se(own - agg)
    ent, _ = _mean_se(-agg[:, d + 1:])
    mi_joint, mi_without, mi_single = mi[0], mi[1:d + 1], mi[d + 1:]

    result = WsepinResult(0.0, False, float(mi_joint), mi_without.tolist(),
                          mi_single.tolist(), ent.tolist())
    informative = np.maximum(mi_single, 0.0)
    total = informative.sum()
    # exactly identical posteriors give |total| ~ 1e-16 from rounding alone
    if total <= 1e-9:
        result.flagged = True
        result.reasons.append("latents carry no information about x")
        return result
    # I(x; s) can never exceed log M; at the ceiling every conditional term
    # is squeezed to zero and the score says nothing about separability
    if mi_joint > math.log(len(post)) - SATURATION_TOL:
        result.flagged = True
        result.reasons.append("joint MI saturated at log(sample size); posteriors too "
                              "sharp for the number of points")
    ent_c = ent.copy()
    low = ent_c < ENTROPY_FLOOR
    if low.any():
        result.flagged = True
        result.reasons.append(f"entropy clamped for dims {np.flatnonzero(low).tolist()}")
        ent_c[low] = ENTROPY_FLOOR
    cond = np.maximum(mi_joint - mi_without, 0.0)
    result.value = float(np.sum(informative / total / ent_c * cond))
    return result


def _posterior(model, x, max_points: int | None, seed: int) -> GaussianPosterior:
    x = np.asarray(getattr(x, "X", x), dtype=np.float64)
    if max_points is not None and x.shape[0] > max_points:
        rows = np.sort(np.random.default_rng([seed, 7]).choice(x.shape[0], max_points,
                                                                replace=False))
        x = x[rows]
    return encode(model, x)


def estimate_mi(model, x, dims=None, mc_samples: int = 8, seed: int = 0,
                max_points: int | None = 2048) -> Estimate:
    return mi_from_posterior(_posterior(model, x, max_points, seed), dims, mc_samples, seed)


def estimate_entropy(model, x, dim: int, mc_samples: int = 8, seed: int = 0,
                     max_points: int | None = 2048) -> Estimate:
    return entropy_from_posterior(_posterior(model, x, max_points, seed), dim,
                                  mc_samples, seed)


def wsepin(model, x, mc_samples: int = 8, seed: int = 0,
           max_points: int | None = 2048) -> WsepinResult:
    return wsepin_from_posterior(_posterior(model, x, max_points, seed), mc_samples, seed)
