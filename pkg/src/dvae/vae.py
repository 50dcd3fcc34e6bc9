"""beta-VAE / TC-VAE objectives and the training loop.

The KL regulariser can be split into index-code mutual information, total
correlation and dimension-wise KL.  Those three terms are estimated on each
minibatch from the aggregate posterior, using stratified importance weights
(own sample 1/N, every other sample (N-1)/(N(B-1))) so that the minibatch
mixture is a normalised density.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .nn import DenseNetwork, ShapeError, adam_step, AdamState, backward, forward
from .nn import read_network, write_network

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_MIN, LOG_VAR_MAX = -12.0, 12.0
OBJECTIVES = ("beta_vae", "tcvae")


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""

    def __init__(self, iteration: int, breakdown: "LossBreakdown"):
        self.iteration = iteration
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        lv = np.atleast_2d(np.asarray(self.log_var, dtype=np.float64))
        if lv.shape != self.mu.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {lv.shape} differ")
        if not np.all(np.isfinite(lv)):
            raise ValueError("log_var must be finite")
        self.log_var = np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]

    def __len__(self):
        return self.mu.shape[0]

    def subset(self, rows) -> "GaussianPosterior":
        return GaussianPosterior(self.mu[rows], self.log_var[rows])


@dataclass
class VaeModel:
    encoder: DenseNetwork
    decoder: DenseNetwork

    def __post_init__(self):
        d = self.decoder.n_in
        if self.encoder.n_out != 2 * d:
            raise ShapeError(f"encoder output width {self.encoder.n_out} must be "
                             f"twice the latent size {d}")
        if self.decoder.n_out != self.encoder.n_in:
            raise ShapeError(f"decoder output width {self.decoder.n_out} differs from "
                             f"observation width {self.encoder.n_in}")

    @property
    def latent_dim(self) -> int:
        return self.decoder.n_in

    @property
    def x_dim(self) -> int:
        return self.encoder.n_in

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def copy(self) -> "VaeModel":
        return VaeModel(self.encoder.copy(), self.decoder.copy())

    @classmethod
    def init(cls, x_dim: int, latent_dim: int = 16,
             hidden: Sequence[int] = (256, 256, 256, 256),
             activation: str = "tanh", seed: int = 0) -> "VaeModel":
        hidden = tuple(hidden)
        enc = DenseNetwork.init((x_dim, *hidden, 2 * latent_dim), activation, seed=seed)
        dec = DenseNetwork.init((latent_dim, *hidden[::-1], x_dim), activation,
                                seed=seed + 1)
        return cls(enc, dec)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_network(buf, self.encoder)
        write_network(buf, self.decoder)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VaeModel":
        with open(path, "rb") as fh:
            enc = read_network(fh)
            dec = read_network(fh)
        return cls(enc, dec)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    beta_s: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "beta_s"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")

    @classmethod
    def tied(cls, beta: float) -> "LossWeights":
        """TC-VAE weights reproducing the beta-VAE: alpha = gamma = beta."""
        return cls(alpha=beta, beta=beta, gamma=beta, beta_s=beta)


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    eval_every: int = 100
    objective: str = "beta_vae"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")


@dataclass
class LossBreakdown:
    rec: float
    mi_hat: float
    tc_hat: float
    dkl_hat: float
    kl_analytic: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, iteration: int, breakdown: LossBreakdown) -> None:
        self.records.append({"iteration": iteration, **asdict(breakdown)})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainingLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])


# -- building blocks ---------------------------------------------------------

def _split_encoder_output(out: np.ndarray, d: int):
    raw_lv = out[:, d:]
    return out[:, :d], raw_lv


def encode(model: VaeModel, x: np.ndarray) -> GaussianPosterior:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ValueError("observations must be finite")
    mu, raw_lv = _split_encoder_output(forward(model.encoder, x), model.latent_dim)
    return GaussianPosterior(mu, raw_lv)


def decode(model: VaeModel, s: np.ndarray) -> np.ndarray:
    return forward(model.decoder, s)


def reconstruct(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """Decode the posterior mean, i.e. the noise-free reconstruction."""
    return decode(model, encode(model, x).mu)


def reparameterize(post: GaussianPosterior, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.mu.shape:
        raise ShapeError(f"noise {noise.shape} does not match posterior {post.mu.shape}")
    return post.mu + np.exp(0.5 * post.log_var) * noise


def reconstruction_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Batch mean of 0.5 * squared error (unit-variance Gaussian decoder)."""
    x = np.atleast_2d(x)
    x_hat = np.atleast_2d(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {x.shape} and x_hat {x_hat.shape} differ")
    return float(0.5 * np.mean(np.sum((x - x_hat) ** 2, axis=1)))


def kl_per_dim(post: GaussianPosterior) -> np.ndarray:
    """(B, D) closed-form KL of each posterior coordinate from N(0, 1)."""
    lv = post.log_var
    return 0.5 * (post.mu ** 2 + np.exp(lv) - 1.0 - lv)


def analytic_kl(post: GaussianPosterior) -> float:
    return float(np.mean(np.sum(kl_per_dim(post), axis=1)))


def tcvae_loss(rec: float, mi_hat: float, tc_hat: float, dkl_hat: float,
               w: LossWeights) -> float:
    return rec + w.alpha * mi_hat + w.beta * tc_hat + w.gamma * dkl_hat


def beta_vae_loss(rec: float, kl: float, beta_s: float) -> float:
    return rec + beta_s * kl


# -- decomposition estimator -------------------------------------------------

def _log_weights(batch_size: int, dataset_size: int) -> np.ndarray:
    n, b = dataset_size, batch_size
    other = math.log(n - 1) - math.log(n * (b - 1)) if n > 1 else -np.inf
    logw = np.full((b, b), other)
    np.fill_diagonal(logw, -math.log(n))
    return logw


def _decomposition(mu, lv, s, dataset_size, coef=None):
    """Estimator terms and, if ``coef=(a, b, g)`` is given, the gradient of
    ``a*mi + b*tc + g*dkl`` w.r.t. (mu, lv, s) with the other two held fixed.
    """
    bsz, _ = mu.shape
    if bsz < 2:
        raise ValueError("decomposition estimator needs a batch of at least 2")
    if dataset_size < bsz:
        raise ValueError(f"dataset_size {dataset_size} smaller than batch {bsz}")
    prec = np.exp(-lv)
    r = s[:, None, :] - mu[None, :, :]  # r[i, m, d] = s_id - mu_md
    pair = -0.5 * (LOG_2PI + lv[None, :, :] + r * r * prec[None, :, :])
    logw = _log_weights(bsz, dataset_size)

    own = np.einsum("iid->i", pair)
    joint_logits = logw + pair.sum(axis=2)
    log_qs = logsumexp(joint_logits, axis=1)
    marg_logits = logw[:, :, None] + pair
    log_qsj = logsumexp(marg_logits, axis=1)  # (B, D)
    log_p = -0.5 * (LOG_2PI + s * s)

    mi = float(np.mean(own - log_qs))
    tc = float(np.mean(log_qs - log_qsj.sum(axis=1)))
    dkl = float(np.mean(np.sum(log_qsj - log_p, axis=1)))
    if coef is None:
        return mi, tc, dkl, None

    a, b, g = coef
    G = ((b - a) / bsz) * softmax(joint_logits, axis=1)[:, :, None] \
        + ((g - b) / bsz) * softmax(marg_logits, axis=1)
    idx = np.arange(bsz)
    G[idx, idx, :] += a / bsz
    Grp = G * r * prec[None, :, :]
    g_s = -Grp.sum(axis=1) + (g / bsz) * s
    g_mu = Grp.sum(axis=0)
    g_lv = np.sum(G * (-0.5 + 0.5 * r * r * prec[None, :, :]), axis=0)
    return mi, tc, dkl, (g_mu, g_lv, g_s)


def estimate_decomposition(post: GaussianPosterior, s: np.ndarray, dataset_size: int):
    """Minibatch estimates ``(mi_hat, tc_hat, dkl_hat)`` of the KL split.

    ``s`` must be one reparameterised sample per posterior in the batch.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != post.mu.shape:
        raise ShapeError(f"samples {s.shape} do not match posterior {post.mu.shape}")
    mi, tc, dkl, _ = _decomposition(post.mu, post.log_var, s, dataset_size)
    return mi, tc, dkl


def loss_and_grads(model: VaeModel, x: np.ndarray, noise: np.ndarray,
                   weights: LossWeights, objective: str = "tcvae",
                   dataset_size: int | None = None):
    """Forward + backward pass of the full objective on one minibatch.

    Returns ``(LossBreakdown, grads)`` with grads aligned to
    ``model.parameters()``.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    bsz = x.shape[0]
    n = dataset_size if dataset_size is not None else bsz
    d = model.latent_dim

    enc_out, enc_cache = forward(model.encoder, x, return_cache=True)
    mu, raw_lv = _split_encoder_output(enc_out, d)
    lv = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    std = np.exp(0.5 * lv)
    s = mu + std * noise
    x_hat, dec_cache = forward(model.decoder, s, return_cache=True)

    rec = float(0.5 * np.mean(np.sum((x - x_hat) ** 2, axis=1)))
    kl_terms = 0.5 * (mu ** 2 + np.exp(lv) - 1.0 - lv)
    kl = float(np.mean(kl_terms.sum(axis=1)))

    dec_grads = backward(model.decoder, dec_cache, (x_hat - x) / bsz)
    g_s = dec_grads.d_input.copy()
    if objective == "tcvae":
        coef = (weights.alpha, weights.beta, weights.gamma)
        mi, tc, dkl, (g_mu, g_lv, g_s_est) = _decomposition(mu, lv, s, n, coef)
        g_s += g_s_est
        total = tcvae_loss(rec, mi, tc, dkl, weights)
    else:
        mi, tc, dkl, _ = _decomposition(mu, lv, s, n)
        g_mu = weights.beta_s * mu / bsz
        g_lv = weights.beta_s * 0.5 * (np.exp(lv) - 1.0) / bsz
        total = beta_vae_loss(rec, kl, weights.beta_s)

    # s = mu + exp(lv/2) * noise
    g_mu = g_mu + g_s
    g_lv = g_lv + g_s * 0.5 * std * noise
    g_lv = g_lv * ((raw_lv > LOG_VAR_MIN) & (raw_lv < LOG_VAR_MAX))
    enc_grads = backward(model.encoder, enc_cache, np.concatenate([g_mu, g_lv], axis=1))

    breakdown = LossBreakdown(rec=rec, mi_hat=mi, tc_hat=tc, dkl_hat=dkl,
                              kl_analytic=kl, total=float(total))
    return breakdown, list(enc_grads) + list(dec_grads)


def _observations(dataset) -> np.ndarray:
    x = getattr(dataset, "X", dataset)
    return np.asarray(x, dtype=np.float64)


def train(dataset, model_init: VaeModel, config: TrainConfig, weights: LossWeights,
          log_fn=None):
    """Minibatch Adam training; returns ``(model, TrainingLog)``.

    ``model_init`` is copied, never mutated.  Minibatches are drawn from a
    fresh permutation each epoch; everything is driven by ``config.seed``.
    """
    x_all = _observations(dataset)
    n = x_all.shape[0]
    if x_all.shape[1] != model_init.x_dim:
        raise ShapeError(f"dataset width {x_all.shape[1]} does not match model "
                         f"input width {model_init.x_dim}")
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} rows, fewer than batch_size {config.batch_size}")

    model = model_init.copy()
    params = model.parameters()
    state = AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    per_epoch = n // config.batch_size
    order = None
    for it in range(config.iterations):
        k = it % per_epoch
        if k == 0:
            order = rng.permutation(n)
        xb = x_all[order[k * config.batch_size:(k + 1) * config.batch_size]]
        noise = rng.standard_normal((config.batch_size, model.latent_dim))
        breakdown, grads = loss_and_grads(model, xb, noise, weights,
                                          config.objective, dataset_size=n)
        if not breakdown.is_finite():
            raise TrainingError(it, breakdown)
        if it % config.eval_every == 0 or it == config.iterations - 1:
            log.append(it, breakdown)
            if log_fn is not None:
                log_fn(it, breakdown)
        try:
            adam_step(params, grads, state)
        except FloatingPointError:
            raise TrainingError(it, breakdown) from None
    return model, log


def dataset_kl(model: VaeModel, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean analytic KL over ``x`` and its per-dimension breakdown."""
    per_dim = kl_per_dim(encode(model, x)).mean(axis=0)
    return float(per_dim.sum()), per_dim
