import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from ivae import autodiff as ad
from ivae import likelihoods as lk
from ivae.models import (HIVAE, VAE, MixtureVAE, build_model, expert_sets, gaussian_poe, iw_bound, kl_normal,
                         normal_logpdf, normalized_weights)
from ivae.models.losses import std_normal_logpdf
from helpers import model_grads, tiny_tabular, tiny_trimodal

LOG_P0 = -0.5 * math.log(4 * math.pi)  # log N(0; 0, 2)


def toy_log_w(x, z, q_mu, q_sigma):
    """p(z) = N(0, 1), p(x|z) = N(z, 1)."""
    return normal_logpdf(z - x, 0.0, 1.0) + std_normal_logpdf(z) - normal_logpdf(z, q_mu, q_sigma)


def toy_bound(x, q_mu, q_sigma, K, seed, batches=200):
    with ad.Tape(seed=seed):
        mu = np.full((batches, 1), q_mu)
        sig = np.full((batches, 1), q_sigma)
        z = ad.reparam_normal(mu, sig, K)
        return iw_bound(toy_log_w(np.full((batches, 1), x), z, mu, sig), 0).data


# ---------------------------------------------------------------------------
# bounds on the linear-Gaussian toy


def test_elbo_at_optimal_posterior_is_exact():
    b = toy_bound(0.0, 0.0, math.sqrt(0.5), K=1, seed=0)
    np.testing.assert_allclose(b, LOG_P0, atol=1e-12)
    assert LOG_P0 == pytest.approx(-1.26551, abs=1e-5)


@pytest.mark.parametrize("q_mu,q_sigma", [(0.3, 0.7), (-1.0, 1.0), (0.0, 0.2), (0.5, 2.0)])
def test_bounds_below_marginal(q_mu, q_sigma):
    for K in (1, 20):
        b = toy_bound(0.0, q_mu, q_sigma, K, seed=1, batches=10 ** 4)
        assert b.mean() <= LOG_P0 + 1e-3


def test_iwae_paired_monotone_in_k():
    means = [toy_bound(0.0, 0.4, 1.2, K, seed=5, batches=400).mean() for K in (1, 5, 20)]
    assert means[0] < means[1] < means[2] <= LOG_P0 + 1e-3


def test_iw_bound_is_overflow_safe():
    lw = ad.Tensor(np.array([[300.0], [-300.0], [299.0]]))
    b = iw_bound(lw, 0).data
    assert np.isfinite(b).all()
    assert b[0] == pytest.approx(logsumexp([300.0, -300.0, 299.0]) - math.log(3))


def test_kl_of_prior_is_zero():
    assert kl_normal(np.zeros((2, 3)), np.ones((2, 3))).data == pytest.approx([0.0, 0.0])


def test_normalized_weights():
    w = normalized_weights(np.random.default_rng(0).standard_normal((7, 4)) * 50, axis=0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-15)
    np.testing.assert_allclose(normalized_weights(np.full((5, 2), -3.0)), 0.2)


def test_siwae_bimodal_toy_below_marginal():
    # x1, x2 | z ~ N(z, 1), experts are the unimodal exact posteriors
    x = np.array([0.7, -0.2])
    log_px = stats.multivariate_normal(np.zeros(2), [[2.0, 1.0], [1.0, 2.0]]).logpdf(x)
    n, K = 2000, 5
    experts = [(x[0] / 2, math.sqrt(0.5)), (x[1] / 2, math.sqrt(0.5))]
    with ad.Tape(seed=3):
        lws = []
        for mu, sig in experts:
            z = ad.reparam_normal(np.full((n, 1), mu), np.full((n, 1), sig), K).data
            log_q = logsumexp([stats.norm.logpdf(z[..., 0], m, s) for m, s in experts], axis=0) - math.log(2)
            log_joint = (stats.norm.logpdf(x[0], z[..., 0], 1) + stats.norm.logpdf(x[1], z[..., 0], 1)
                         + stats.norm.logpdf(z[..., 0]))
            lws.append(log_joint - log_q)
    b = iw_bound(np.stack(lws, axis=-1), (0, 2)).data
    assert b.mean() <= log_px + 1e-3


# ---------------------------------------------------------------------------
# product of experts


def test_gaussian_poe_two_experts():
    mu, sigma = gaussian_poe([ad.Tensor(np.array([0.0])), ad.Tensor(np.array([2.0]))],
                             [ad.Tensor(np.array([1.0])), ad.Tensor(np.array([1.0]))])
    assert mu.data[0] == pytest.approx(1.0)
    assert sigma.data[0] ** 2 == pytest.approx(0.5)


def test_gaussian_poe_matches_normalized_density_product():
    grid = np.linspace(-12, 12, 200001)
    rng = np.random.default_rng(0)
    for _ in range(5):
        mus, sigs = rng.normal(0, 2, 3), rng.uniform(0.3, 2.0, 3)
        prod = np.prod([stats.norm.pdf(grid, m, s) for m, s in zip(mus, sigs)], axis=0)
        prod /= np.trapezoid(prod, grid)
        mu, sigma = gaussian_poe([ad.Tensor(np.array([m])) for m in mus],
                                 [ad.Tensor(np.array([s])) for s in sigs])
        ref = stats.norm.pdf(grid, mu.data[0], sigma.data[0])
        assert np.max(np.abs(prod - ref)) < 1e-8


def test_expert_sets():
    assert expert_sets("mvae", 3) == [(0, 1, 2)]
    assert expert_sets("mmvae", 3) == [(0,), (1,), (2,)]
    assert len(expert_sets("mopoe", 3)) == 7
    with pytest.raises(ValueError):
        expert_sets("poe", 3)


# ---------------------------------------------------------------------------
# VAE


def test_vae_shapes_and_defaults():
    batch, schema, _ = tiny_tabular()
    m = VAE(schema, seed=0)
    assert m.latent_dim == math.ceil(schema.n_features / 2)
    with ad.Tape(seed=0, training=False):
        mu, _ = m.posterior(batch)
        etas = m.decode(mu)
    assert len(etas) == len(schema)
    for mod, eta in zip(schema, etas):
        assert eta.raw.shape == (batch.n, mod.spec.param_count * mod.dim)
    head_cols = sum(w.shape[1] for h in m.heads for w in h.parameters().values() if w.ndim == 2)
    assert head_cols == sum(mod.spec.n_columns for mod in schema)


def test_vae_errors():
    _, schema, _ = tiny_tabular()
    with pytest.raises(ValueError):
        VAE(schema, loss="dreg", K=1)
    with pytest.raises(ValueError):
        VAE(schema, loss="siwae")
    with pytest.raises(ValueError):
        build_model("vae", None)
    with pytest.raises(ValueError):
        build_model("transformer", schema)


def test_iwae_k1_equals_elbo_single_sample():
    batch, schema, _ = tiny_tabular()
    m = VAE(schema, seed=0)
    with ad.Tape(seed=4):
        e = m.objective(batch, "elbo", 1)
    with ad.Tape(seed=4):
        i = m.objective(batch, "iwae", 1)
    # ELBO uses the analytic KL, IWAE the single-sample log ratio; their gap is the KL estimator noise
    with ad.Tape(seed=4):
        mu, sigma = m.posterior(batch)
        z = ad.reparam_normal(mu, sigma, 1)
        kl_mc = (normal_logpdf(z, mu, sigma) - std_normal_logpdf(z)).data[0]
        kl = kl_normal(mu, sigma).data
    np.testing.assert_allclose(i.bound - e.bound, kl - kl_mc, atol=1e-10)


def test_dreg_decoder_gradients_equal_iwae():
    batch, schema, _ = tiny_tabular()
    dreg = VAE(schema, loss="dreg", K=4, seed=0)
    iwae = VAE(schema, loss="iwae", K=4, seed=0)
    _, gd = model_grads(dreg, batch, seed=7)
    _, gi = model_grads(iwae, batch, seed=7)
    dec = [k for k in gi if k.startswith(("decoder.", "head."))]
    assert dec
    for k in dec:
        np.testing.assert_allclose(gd[k], gi[k], atol=1e-10, rtol=0)
    enc = [k for k in gi if k.startswith("encoder.") and np.any(gi[k])]
    assert any(not np.allclose(gd[k], gi[k]) for k in enc)


def test_untrained_reconstructions_in_support():
    batch, schema, _ = tiny_tabular()
    for kind in ("vae", "hivae"):
        rec = build_model(kind, schema, seed=0).reconstruct(batch)
        for mod, x in zip(schema, rec):
            lk.check_support(mod.spec, x)


# ---------------------------------------------------------------------------
# HI-VAE


def test_hivae_normalization_round_trip():
    batch, schema, _ = tiny_tabular()
    m = HIVAE(schema)
    m.norm.fit(batch)
    for d, mod in enumerate(schema):
        if mod.family in ("normal", "lognormal"):
            x = batch.values[d]
            np.testing.assert_allclose(m.norm.denormalize_values(d, m.norm.normalize(d, x)), x, atol=1e-10)


def test_hivae_defaults_and_errors():
    _, schema, _ = tiny_tabular()
    m = HIVAE(schema)
    assert (m.d_z, m.d_s, m.hidden) == (10, 10, 5 * len(schema))
    with pytest.raises(ValueError):
        HIVAE(schema, d_s=1)


def test_hivae_objective_finite_and_encode_shape():
    batch, schema, _ = tiny_tabular()
    m = HIVAE(schema, seed=0)
    loss, grads = model_grads(m, batch)
    assert np.isfinite(loss)
    assert all(np.isfinite(g).all() for g in grads.values())
    assert m.encode(batch).shape == (batch.n, 10)


# ---------------------------------------------------------------------------
# mixtures


def test_mixture_denominator_is_uniform_mixture():
    batch, schema = tiny_trimodal()
    m = MixtureVAE(schema, "mmvae", hidden=8, latent_dim=3)
    post = m.expert_posteriors(batch)
    z = np.random.default_rng(0).standard_normal((2, batch.n, 3))
    got = m.mixture_log_density(ad.Tensor(z), post).data
    comps = [stats.norm.logpdf(z, mu.data, s.data).sum(-1) for mu, s in post]
    np.testing.assert_allclose(got, logsumexp(comps, axis=0) - math.log(3), atol=1e-10)


def test_single_expert_siwae_equals_loose():
    batch, schema = tiny_trimodal()
    m = MixtureVAE(schema, "mvae", hidden=8)
    for K in (1, 4):
        with ad.Tape(seed=2):
            a = m.objective(batch, "siwae", K)
        with ad.Tape(seed=2):
            b = m.objective(batch, "loose", K)
        np.testing.assert_allclose(a.bound, b.bound, atol=1e-12)


def test_loose_finite_with_k30():
    batch, schema = tiny_trimodal()
    for kind in ("mmvae", "mopoe"):
        with ad.Tape(seed=0):
            obj = build_model(kind, schema, hidden=8, K=30).objective(batch)
        assert np.isfinite(obj.loss.data)


def test_siwae_at_least_loose_on_shared_noise():
    batch, schema = tiny_trimodal()
    m = MixtureVAE(schema, "mmvae", hidden=8)
    with ad.Tape(seed=1):
        s = m.objective(batch, "siwae", 5).bound
    with ad.Tape(seed=1):
        lo = m.objective(batch, "loose", 5).bound
    assert np.all(s >= lo - 1e-12)


def test_mixture_validation():
    _, schema = tiny_trimodal()
    with pytest.raises(ValueError):
        MixtureVAE(schema, expert_list=[(0,), ()])
    with pytest.raises(ValueError):
        MixtureVAE(schema, expert_list=[(0,)] * 8)
    with pytest.raises(ValueError):
        MixtureVAE(schema, loss="dreg")


def test_conditional_generate_in_support():
    batch, schema = tiny_trimodal()
    m = MixtureVAE(schema, "mopoe", hidden=8)
    rng = np.random.default_rng(0)
    for evidence in [(0,), (1, 2), (0, 1, 2)]:
        for d, mod in enumerate(schema):
            lk.check_support(mod.spec, m.conditional_generate(batch, evidence, d))
            lk.check_support(mod.spec, m.conditional_generate(batch, evidence, d, rng, sample=True))
    assert len(m.reconstruct(batch)) == 3
