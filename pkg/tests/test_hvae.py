import math

import numpy as np
import pytest

from pnphvae.core_math import LOG_2PI, DiagGaussian
from pnphvae.hvae import (
    HvaeModel,
    TemperatureSchedule,
    as_schedule,
    decoder_log_likelihood,
    elbo,
    elbo_samples,
    encode_regularized,
    encoder_mean_chain,
    eval_J1,
    eval_J2_tilde,
    j2_decomposition,
    kl_to_prior,
    prior_mean_chain,
    reconstruct,
    sample_prior,
)
from pnphvae.linear_gaussian import (
    LinearGaussianHvae,
    brute_force_min_J2,
    build_random_model,
    marginal_tempered_prior,
)


class ScalarModel(HvaeModel):
    """One level, one coordinate, fixed conditionals."""

    x_shape = (1,)

    def __init__(self, q=(0.0, 0.5), p=(4.0, 1.0), gamma2=0.1):
        self.q, self.p, self.g2 = q, p, gamma2

    def latent_dims(self):
        return [1]

    def prior_conditional(self, level, prefix):
        return DiagGaussian([self.p[0]], [self.p[1]])

    def encoder_conditional(self, level, prefix, x):
        return DiagGaussian([self.q[0]], [self.q[1]])

    def decoder_mean(self, z):
        return np.asarray(z[0], dtype=float).reshape(1)

    def decoder_variance(self):
        return self.g2


class NanModel(ScalarModel):
    def latent_dims(self):
        return [1, 1]

    def encoder_conditional(self, level, prefix, x):
        if level == 1:
            return DiagGaussian([np.nan], [1.0])
        return super().encoder_conditional(level, prefix, x)

    def decoder_mean(self, z):
        return np.array([z[0][0] + z[1][0]])


@pytest.fixture(scope="module")
def lg():
    return build_random_model([4, 8], d_x=16, seed=7)


def test_schedule_validation_and_lambdas():
    s = TemperatureSchedule((1.0, 0.5))
    assert s.lambdas == (0.0, 3.0)
    assert TemperatureSchedule.constant(0.8, 3).taus == (0.8, 0.8, 0.8)
    for bad in [(0.0,), (1.5,), (-0.1,)]:
        with pytest.raises(ValueError):
            TemperatureSchedule(bad)
    with pytest.raises(ValueError):
        as_schedule((1.0, 1.0), 3)


def test_tau_one_is_encoder_mean_chain(lg):
    x = np.random.default_rng(0).standard_normal(16)
    z = encode_regularized(lg, x, 1.0)
    for a, b in zip(z, encoder_mean_chain(lg, x)):
        assert np.array_equal(a, b)


def test_single_level_hand_value():
    z = encode_regularized(ScalarModel(), np.zeros(1), 0.5)
    assert z[0][0] == pytest.approx(2.4)


def test_non_finite_conditional_names_level():
    with pytest.raises(FloatingPointError, match="level 1"):
        encode_regularized(NanModel(), np.zeros(1), 0.8)


def test_between_encoder_and_prior_means(lg):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(16)
    z = encode_regularized(lg, x, 0.7)
    for level in range(lg.n_levels):
        q = lg.encoder_conditional(level, z[:level], x)
        p = lg.prior_conditional(level, z[:level])
        lo, hi = np.minimum(q.mean, p.mean), np.maximum(q.mean, p.mean)
        assert np.all(z[level] >= lo - 1e-12) and np.all(z[level] <= hi + 1e-12)


@pytest.mark.parametrize("tau", [1.0, 0.8, 0.6])
def test_two_level_matches_dense_block_solve(lg, tau):
    x = np.random.default_rng(2).standard_normal(16)
    z = np.concatenate(encode_regularized(lg, x, tau))
    ref = np.concatenate(brute_force_min_J2(lg, x, tau))
    assert np.linalg.norm(z - ref) <= 1e-9 * np.linalg.norm(ref)


def test_reconstruct_is_affine_and_deterministic(lg):
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal(16), rng.standard_normal(16)
    r0 = reconstruct(lg, np.zeros(16), 0.8)
    lhs = reconstruct(lg, u + v, 0.8) - r0
    rhs = (reconstruct(lg, u, 0.8) - r0) + (reconstruct(lg, v, 0.8) - r0)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10
    assert np.array_equal(reconstruct(lg, u, 0.8), reconstruct(lg, u, 0.8))


def test_small_tau_approaches_prior_chain(lg):
    x = np.random.default_rng(4).standard_normal(16)
    r = reconstruct(lg, x, 1e-3)
    ref = lg.decoder_mean(prior_mean_chain(lg))
    assert np.linalg.norm(r - ref) <= 1e-3 * np.linalg.norm(ref)


def test_sample_prior_limits_and_determinism(lg):
    ref = lg.decoder_mean(prior_mean_chain(lg))
    s = sample_prior(lg, 1e-6, np.random.default_rng(0))
    assert np.max(np.abs(s - ref)) <= 1e-4
    a = sample_prior(lg, 0.8, np.random.default_rng(5))
    b = sample_prior(lg, 0.8, np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_prior(lg, 1.0, np.random.default_rng(0), shape=(3, 3))


def test_sample_prior_matches_marginal_moments():
    model = build_random_model([2, 3], d_x=6, seed=3)
    rng = np.random.default_rng(6)
    n = 10_000
    # decoded means: the marginal of mu(z) is the marginal of x minus gamma^2 I
    S = np.array([sample_prior(model, 1.0, rng) for _ in range(n)])
    marg = marginal_tempered_prior(model, 1.0)
    cov_mu = marg.cov - model.gamma2 * np.eye(6)
    se_mean = np.sqrt(np.diag(cov_mu) / n)
    assert np.all(np.abs(S.mean(axis=0) - marg.mean) <= 3 * se_mean + 1e-12)
    emp = np.cov(S.T)
    # standard error of a covariance entry: sqrt((s_ii s_jj + s_ij^2) / n)
    se_cov = np.sqrt((np.outer(np.diag(cov_mu), np.diag(cov_mu)) + cov_mu**2) / n)
    assert np.all(np.abs(emp - cov_mu) <= 4 * se_cov)


def test_decoder_likelihood_shape_check(lg):
    with pytest.raises(ValueError):
        decoder_log_likelihood(lg, np.zeros(5), prior_mean_chain(lg))


def test_J1_only_normalization_at_means(lg):
    z = prior_mean_chain(lg)
    x = lg.decoder_mean(z)
    expected = 0.5 * np.sum(np.log(2 * math.pi * lg.v_prior)) + 0.5 * 16 * math.log(2 * math.pi * lg.gamma2)
    assert eval_J1(lg, x, z, 1.0) == pytest.approx(expected, rel=1e-12)


def test_J1_increases_when_last_level_moves(lg):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(16)
    z = [rng.standard_normal(4), None]
    # J1 is quadratic in the last level: move away from its exact minimizer
    H = np.diag(1.0 / lg.v_prior[4:]) + lg.D[:, 4:].T @ lg.D[:, 4:] / lg.gamma2
    m = lg.prior_conditional(1, z[:1]).mean
    g = m / lg.v_prior[4:] + lg.D[:, 4:].T @ (x - lg.D[:, :4] @ z[0] - lg.c) / lg.gamma2
    z[1] = np.linalg.solve(H, g)
    base = eval_J1(lg, x, z, 1.0)
    for _ in range(20):
        zz = [z[0], z[1] + 0.1 * rng.standard_normal(8)]
        assert eval_J1(lg, x, zz, 1.0) > base


def test_J1_matches_dense_negative_log_joint(lg):
    rng = np.random.default_rng(8)
    x = rng.standard_normal(16)
    z = [rng.standard_normal(4), rng.standard_normal(8)]
    tau = 0.7
    joint = lg.joint_gaussian(1.0)
    u = np.concatenate(z + [x])
    # J1 reweights the prior by 1/tau^2; undo by adding the extra prior part
    prior = sum(-np.sum(-0.5 * ((zl - lg.prior_conditional(l, z[:l]).mean) ** 2 / lg.prior_conditional(l, z[:l]).variance
                                + np.log(lg.prior_conditional(l, z[:l]).variance) + LOG_2PI))
                for l, zl in enumerate(z))
    expected = -joint.logpdf(u) + (1 / tau**2 - 1) * prior
    assert eval_J1(lg, x, z, tau) == pytest.approx(expected, rel=1e-10)


def test_J2_tilde_at_encoder_means(lg):
    x = np.random.default_rng(9).standard_normal(16)
    z = encoder_mean_chain(lg, x)
    expected = sum(0.5 * np.sum(np.log(2 * math.pi * lg.encoder_conditional(l, z[:l], x).variance)) for l in range(2))
    assert eval_J2_tilde(lg, x, z, 1.0) == pytest.approx(expected, rel=1e-12)


def test_J2_tilde_differences_match_decomposition(lg):
    rng = np.random.default_rng(10)
    x = rng.standard_normal(16)
    for tau in (1.0, 0.8, 0.6):
        z1 = [rng.standard_normal(4), rng.standard_normal(8)]
        z2 = [rng.standard_normal(4), rng.standard_normal(8)]
        t1, t2 = j2_decomposition(lg, x, z1, tau), j2_decomposition(lg, x, z2, tau)
        dj = eval_J2_tilde(lg, x, z1, tau) - eval_J2_tilde(lg, x, z2, tau)
        assert dj == pytest.approx((t1.A.sum() + t1.B.sum()) - (t2.A.sum() + t2.B.sum()), abs=1e-9)
        assert t1.total() == pytest.approx(eval_J2_tilde(lg, x, z1, tau), rel=1e-12)


def test_greedy_beats_random_latents(lg):
    rng = np.random.default_rng(11)
    x = rng.standard_normal(16)
    z = encode_regularized(lg, x, 0.6)
    best = eval_J2_tilde(lg, x, z, 0.6)
    for _ in range(1000):
        zz = [zl + rng.standard_normal(zl.shape) * rng.uniform(0.01, 1) for zl in z]
        assert eval_J2_tilde(lg, x, zz, 0.6) >= best


def test_elbo_exact_posterior_equals_log_marginal():
    model = build_random_model([2, 3], d_x=8, seed=5)
    x = np.random.default_rng(12).standard_normal(8) + 0.5
    s = elbo_samples(model, x, np.random.default_rng(0), 10_000)
    logpx = marginal_tempered_prior(model, 1.0).logpdf(x)
    assert abs(s.mean() - logpx) <= 3 * s.std(ddof=1) / np.sqrt(s.size)


def test_kl_nonnegative_and_zero_when_encoder_is_prior(lg):
    x = np.random.default_rng(13).standard_normal(16)
    assert kl_to_prior(lg, x, np.random.default_rng(0), 5) >= 0
    m = ScalarModel(q=(4.0, 1.0), p=(4.0, 1.0))
    assert kl_to_prior(m, np.zeros(1), np.random.default_rng(0)) == 0.0
    assert np.isfinite(elbo(m, np.zeros(1), np.random.default_rng(0)))
    with pytest.raises(ValueError):
        elbo_samples(m, np.zeros(1), np.random.default_rng(0), 0)


def test_greedy_is_not_global_minimum_without_shared_slopes():
    """On a generic model the encoder and prior means depend differently on
    z_0, so the product-Gaussian mismatch term couples levels and the greedy
    point is not the global minimizer once tau < 1."""
    m = LinearGaussianHvae([1, 1], W=[[0, 0], [0.8, 0]], b=[0.1, 0.2], v_prior=[1, 0.7], D=[[1.0, 1.0]],
                           c=[0.0], gamma2=0.3)
    x = np.array([1.3])
    g1 = np.concatenate(encode_regularized(m, x, 1.0))
    assert np.allclose(g1, np.concatenate(brute_force_min_J2(m, x, 1.0)), atol=1e-12)
    g = np.concatenate(encode_regularized(m, x, 0.6))
    b = np.concatenate(brute_force_min_J2(m, x, 0.6))
    assert np.abs(g - b).max() > 0.05
    assert eval_J2_tilde(m, x, m.split(b), 0.6) < eval_J2_tilde(m, x, m.split(g), 0.6)
    Bm = [j2_decomposition(m, x, [np.array([z0]), np.zeros(1)], 0.6).B_mean[1] for z0 in (0.0, 1.0)]
    assert abs(Bm[0] - Bm[1]) > 1e-3
