import math

import numpy as np
import pytest
from scipy import integrate, stats

from dvae.data import SyntheticConfig, generate_synthetic
from dvae.nn import DenseNetwork, Layer, finite_difference_check
from dvae.vae import (GaussianPosterior, LossWeights, TrainConfig, TrainingError, TrainingLog,
                      VaeModel, analytic_kl, beta_vae_loss, dataset_kl, encode,
                      estimate_decomposition, loss_and_grads, reconstruction_loss,
                      reparameterize, tcvae_loss, train)


def _zero_model(x_dim=3, d=2):
    enc = DenseNetwork([Layer(np.zeros((2 * d, x_dim)), np.zeros(2 * d))])
    dec = DenseNetwork([Layer(np.zeros((x_dim, d)), np.zeros(x_dim))])
    return VaeModel(enc, dec)


def _population(n, d, seed):
    rng = np.random.default_rng(seed)
    return GaussianPosterior(rng.normal(0, 1.0, (n, d)), rng.normal(-1.0, 0.5, (n, d)))


def test_zero_encoder_gives_prior():
    post = encode(_zero_model(), np.random.default_rng(0).standard_normal((5, 3)))
    assert np.all(post.mu == 0) and np.all(post.log_var == 0)


def test_encode_shapes_and_determinism():
    model = VaeModel.init(6, 3, hidden=(8,), seed=0)
    x = np.random.default_rng(1).standard_normal((4, 6))
    post = encode(model, np.vstack([x[:1], x[:1]]))
    np.testing.assert_array_equal(post.mu[0], post.mu[1])
    assert encode(model, x).mu.shape == (4, 3)
    assert model.encoder.n_out == 6


def test_log_var_clamped():
    post = GaussianPosterior(np.zeros((1, 3)), np.array([[-50.0, 0.0, 40.0]]))
    np.testing.assert_array_equal(post.log_var, [[-12.0, 0.0, 12.0]])


def test_reparameterize_cases():
    post = GaussianPosterior(np.array([[1.0, -2.0]]), np.zeros((1, 2)))
    np.testing.assert_array_equal(reparameterize(post, np.zeros((1, 2))), post.mu)
    n = np.array([[0.3, -0.7]])
    np.testing.assert_allclose(reparameterize(post, n), post.mu + n)


def test_reparameterize_monte_carlo_std():
    lv = np.array([[-1.3, 0.8]])
    post = GaussianPosterior(np.repeat([[0.5, -1.0]], 100_000, axis=0),
                             np.repeat(lv, 100_000, axis=0))
    s = reparameterize(post, np.random.default_rng(0).standard_normal(post.mu.shape))
    np.testing.assert_allclose(s.std(axis=0), np.exp(0.5 * lv[0]), rtol=0.02)


def test_reconstruction_loss_cases():
    assert reconstruction_loss(np.ones((2, 3)), np.ones((2, 3))) == 0.0
    assert reconstruction_loss(np.zeros((1, 2)), np.ones((1, 2))) == 1.0
    x = np.random.default_rng(0).standard_normal((4, 3))
    xh = np.random.default_rng(1).standard_normal((4, 3))
    assert math.isclose(reconstruction_loss(x, x + 2 * (xh - x)),
                        4 * reconstruction_loss(x, xh), rel_tol=1e-12)


def test_analytic_kl_cases():
    assert analytic_kl(GaussianPosterior(np.zeros((1, 3)), np.zeros((1, 3)))) == 0.0
    assert analytic_kl(GaussianPosterior([[1.0]], [[0.0]])) == pytest.approx(0.5, abs=1e-12)
    post = _population(1000, 4, 0)
    assert np.all(np.sum(0.5 * (post.mu ** 2 + np.exp(post.log_var) - 1 - post.log_var),
                         axis=1) >= 0)


def test_analytic_kl_numerical_integration():
    mu, var = 0.7, 0.4
    q = stats.norm(mu, math.sqrt(var))
    p = stats.norm(0, 1)
    numeric, _ = integrate.quad(lambda s: q.pdf(s) * (q.logpdf(s) - p.logpdf(s)), -15, 15)
    got = analytic_kl(GaussianPosterior([[mu]], [[math.log(var)]]))
    assert got == pytest.approx(numeric, abs=1e-9)


def test_tcvae_loss_hand_value():
    assert tcvae_loss(1, 2, 3, 4, LossWeights(0, 0.01, 0.1, 0)) == pytest.approx(1.43)
    assert tcvae_loss(1.5, 2, 3, 4, LossWeights(0, 0, 0, 0)) == 1.5


def test_beta_vae_loss_hand_value():
    assert beta_vae_loss(2, 3, 0.5) == 3.5
    assert beta_vae_loss(2, 3, 0) == 2
    assert beta_vae_loss(2, 3, 1) == 5


def test_tied_weights_equal_beta_vae_estimate():
    rec, mi, tc, dkl = 0.8, 0.3, 0.2, 1.1
    w = LossWeights.tied(0.25)
    assert tcvae_loss(rec, mi, tc, dkl, w) == pytest.approx(rec + 0.25 * (mi + tc + dkl))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(beta=float("nan"))


def test_decomposition_sums_to_analytic_kl():
    n, b, d = 1024, 64, 8
    pop = _population(n, d, 1)
    rng = np.random.default_rng(2)
    totals = []
    for _ in range(30):
        rows = rng.choice(n, b, replace=False)
        post = pop.subset(rows)
        s = reparameterize(post, rng.standard_normal((b, d)))
        totals.append(sum(estimate_decomposition(post, s, n)))
    totals = np.array(totals)
    se = totals.std(ddof=1) / math.sqrt(len(totals))
    assert abs(totals.mean() - analytic_kl(pop)) < 3 * se


def test_decomposition_collapsed_posterior_near_zero():
    n, b, d = 1024, 64, 4
    rng = np.random.default_rng(3)
    post = GaussianPosterior(np.zeros((b, d)), np.zeros((b, d)))
    draws = np.array([estimate_decomposition(post, rng.standard_normal((b, d)), n)
                      for _ in range(30)])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(mean) < 3 * se + 1e-12)


def test_decomposition_single_dimension_has_no_tc():
    pop = _population(512, 1, 4)
    rng = np.random.default_rng(5)
    post = pop.subset(np.arange(32))
    _, tc, _ = estimate_decomposition(post, reparameterize(post, rng.standard_normal((32, 1))),
                                      512)
    assert abs(tc) < 1e-12


@pytest.mark.parametrize("objective,weights", [
    ("tcvae", LossWeights(1.0, 1.0, 1.0, 0.0)),
    ("tcvae", LossWeights(0.0, 1e-2, 1e-1, 0.0)),
    ("tcvae", LossWeights(0.5, 6.0, 2.0, 0.0)),
    ("beta_vae", LossWeights(0, 0, 0, 0.7)),
])
def test_full_loss_gradients(objective, weights):
    model = VaeModel.init(5, 3, hidden=(6,), seed=11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 5))
    noise = rng.standard_normal((6, 3))

    def loss_fn(m, inputs):
        br, grads = loss_and_grads(m, inputs, noise, weights, objective, dataset_size=50)
        return br.total, grads

    assert finite_difference_check(model, loss_fn, x) < 1e-4


def test_training_is_deterministic():
    ds = generate_synthetic(SyntheticConfig(n_speakers=8, utterances_per_speaker=10,
                                            n_factors=3, x_dim=8, seed=1))
    init = VaeModel.init(8, 3, hidden=(8,), seed=2)
    cfg = TrainConfig(iterations=60, batch_size=16, learning_rate=1e-3, seed=3, eval_every=20,
                      objective="tcvae")
    a, log_a = train(ds, init, cfg, LossWeights(0.0, 1.0, 1.0, 0.0))
    b, log_b = train(ds, init, cfg, LossWeights(0.0, 1.0, 1.0, 0.0))
    assert a.to_bytes() == b.to_bytes()
    assert log_a.to_jsonl() == log_b.to_jsonl()
    assert [r["iteration"] for r in log_a.records] == [0, 20, 40, 59]


def test_training_log_round_trip(tmp_path):
    log = TrainingLog()
    model = VaeModel.init(4, 2, hidden=(4,), seed=0)
    x = np.random.default_rng(0).standard_normal((8, 4))
    br, _ = loss_and_grads(model, x, np.zeros((8, 2)), LossWeights(), "tcvae", 8)
    log.append(0, br)
    log.save(tmp_path / "log.jsonl")
    assert TrainingLog.load(tmp_path / "log.jsonl").to_jsonl() == log.to_jsonl()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    ds = generate_synthetic(SyntheticConfig(n_speakers=4, utterances_per_speaker=8,
                                            n_factors=2, x_dim=4, seed=0))
    model = VaeModel.init(4, 2, hidden=(4,), seed=0)
    model.decoder.layers[-1].bias[:] = np.inf
    with pytest.raises(TrainingError) as info:
        train(ds, model, TrainConfig(iterations=5, batch_size=8), LossWeights())
    assert info.value.iteration == 0


def _small_dataset():
    return generate_synthetic(SyntheticConfig(n_speakers=20, utterances_per_speaker=20,
                                              n_factors=4, x_dim=16, seed=0))


def test_autoencoder_reconstruction_drops_below_ten_percent():
    ds = _small_dataset()
    _, log = train(ds, VaeModel.init(16, 8, hidden=(32, 32), seed=0),
                   TrainConfig(iterations=10_000, batch_size=64, learning_rate=1e-4,
                               eval_every=500),
                   LossWeights(0, 0, 0, 0))
    rec = log.column("rec")
    assert rec[-1] < 0.1 * rec[0]


def test_large_beta_s_collapses_posterior():
    ds = _small_dataset()
    model, _ = train(ds, VaeModel.init(16, 8, hidden=(32, 32), seed=0),
                     TrainConfig(iterations=3000, batch_size=64, learning_rate=1e-3,
                                 eval_every=500),
                     LossWeights(0, 0, 0, 10.0))
    assert dataset_kl(model, ds.X)[0] < 0.1


def test_mi_hat_nonnegative_up_to_noise():
    n, b, d = 1024, 64, 4
    pop = _population(n, d, 7)
    rng = np.random.default_rng(8)
    mis = []
    for _ in range(30):
        post = pop.subset(rng.choice(n, b, replace=False))
        mis.append(estimate_decomposition(post, reparameterize(post, rng.standard_normal((b, d))),
                                          n)[0])
    mis = np.array(mis)
    assert mis.mean() >= -3 * mis.std(ddof=1) / math.sqrt(len(mis))
