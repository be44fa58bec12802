import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadfit.emprior import (
    MixturePrior,
    default_reg_lambda,
    e_step,
    init_mixture,
    log_likelihood,
    m_step,
)
from quadfit.errors import InvalidParameterError, NumericalDegeneracyError
from quadfit.losses import GaussianPrior


def random_prior(rng, dim: int) -> GaussianPrior:
    a = rng.normal(size=(dim, dim))
    return GaussianPrior(rng.normal(size=dim), a @ a.T + dim * np.eye(dim))


# --- independent oracle: plain-loop textbook EM with the same lambda --------

def oracle_e_step(means, covs, weights, betas):
    n, m = betas.shape[0], means.shape[0]
    resp = np.zeros((n, m))
    for i in range(n):
        dens = np.zeros(m)
        for k in range(m):
            d = betas[i] - means[k]
            cov_inv = np.linalg.inv(covs[k])
            norm = 1.0 / np.sqrt((2 * np.pi) ** means.shape[1]
                                 * np.linalg.det(covs[k]))
            dens[k] = weights[k] * norm * np.exp(-0.5 * d @ cov_inv @ d)
        resp[i] = dens / dens.sum()
    return resp


def oracle_m_step(resp, betas, reg_lambda):
    n, m = resp.shape
    dim = betas.shape[1]
    means = np.zeros((m, dim))
    covs = np.zeros((m, dim, dim))
    weights = np.zeros(m)
    for k in range(m):
        nk = resp[:, k].sum()
        mu = sum(resp[i, k] * betas[i] for i in range(n)) / nk
        cov = sum(resp[i, k] * np.outer(betas[i] - mu, betas[i] - mu)
                  for i in range(n)) / nk
        means[k] = mu
        covs[k] = cov + reg_lambda * np.eye(dim)
        weights[k] = nk / n
    return means, covs, weights / weights.sum()


def oracle_log_likelihood(means, covs, weights, betas):
    from mpmath import mp, mpf

    mp.dps = 50
    total = mpf(0)
    dim = betas.shape[1]
    for beta in betas:
        acc = mpf(0)
        for k in range(means.shape[0]):
            d = beta - means[k]
            maha = float(d @ np.linalg.inv(covs[k]) @ d)
            norm = (2 * np.pi) ** (-dim / 2.0) / np.sqrt(np.linalg.det(covs[k]))
            acc += mpf(weights[k]) * mpf(norm) * mp.e ** (mpf(-0.5) * mpf(maha))
        total += mp.log(acc)
    return float(total)


class TestInitMixture:
    def test_single_component(self):
        rng = np.random.default_rng(0)
        prior = random_prior(rng, 4)
        mix = init_mixture(prior, 1, rng_seed=9)
        assert mix.n_components == 1
        np.testing.assert_array_equal(mix.covs[0], prior.cov)
        np.testing.assert_array_equal(mix.weights, np.array([1.0]))
        assert not np.allclose(mix.means[0], prior.mean)  # sampled, not copied

    @pytest.mark.parametrize("m", [1, 2, 3, 7, 10])
    def test_weights_exactly_uniform(self, m):
        rng = np.random.default_rng(1)
        prior = random_prior(rng, 3)
        mix = init_mixture(prior, m, rng_seed=0)
        np.testing.assert_allclose(mix.weights, np.full(m, 1.0 / m), rtol=1e-15)
        assert mix.weights.sum() == pytest.approx(1.0, abs=1e-15)

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(2)
        prior = random_prior(rng, 5)
        a = init_mixture(prior, 4, rng_seed=123, n_images=6)
        b = init_mixture(prior, 4, rng_seed=123, n_images=6)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.responsibilities, b.responsibilities)

    def test_zero_components_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(InvalidParameterError):
            init_mixture(random_prior(rng, 2), 0, rng_seed=0)

    def test_means_sampled_from_prior(self):
        # large-sample check: component means scatter like the prior says
        rng = np.random.default_rng(4)
        prior = GaussianPrior(np.array([1.0, -2.0]), np.diag([4.0, 0.25]))
        mix = init_mixture(prior, 400, rng_seed=11)
        got_mean = mix.means.mean(axis=0)
        got_sd = mix.means.std(axis=0)
        np.testing.assert_allclose(got_mean, prior.mean, atol=0.3)
        np.testing.assert_allclose(got_sd, [2.0, 0.5], rtol=0.2)


class TestESteps:
    def test_identical_components_split_evenly(self):
        rng = np.random.default_rng(5)
        prior = random_prior(rng, 3)
        mix = init_mixture(prior, 2, rng_seed=0)
        mix = dataclasses.replace(mix, means=np.tile(prior.mean, (2, 1)),
                                  covs=np.tile(prior.cov, (2, 1, 1)))
        betas = rng.normal(size=(10, 3))
        stepped = e_step(mix, betas)
        np.testing.assert_allclose(stepped.responsibilities,
                                   np.full((10, 2), 0.5), rtol=1e-12)

    def test_tight_component_wins(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        mix = init_mixture(prior, 2, rng_seed=0)
        mix = dataclasses.replace(
            mix,
            means=np.array([[0.0, 0.0], [50.0, 50.0]]),
            covs=np.stack([np.eye(2) * 1e-6, np.eye(2)]))
        betas = np.zeros((1, 2))
        stepped = e_step(mix, betas)
        assert stepped.responsibilities[0, 0] > 1.0 - 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        prior = random_prior(rng, 4)
        mix = init_mixture(prior, 5, rng_seed=1)
        betas = rng.normal(0.0, 4.0, (40, 4))
        stepped = e_step(mix, betas)
        np.testing.assert_allclose(stepped.responsibilities.sum(axis=1),
                                   np.ones(40), atol=1e-12)

    def test_density_scale_invariance(self):
        # adding a constant to every log density must not change the posterior
        rng = np.random.default_rng(7)
        prior = random_prior(rng, 3)
        mix = init_mixture(prior, 3, rng_seed=2)
        betas = rng.normal(size=(12, 3))
        base = e_step(mix, betas).responsibilities
        scaled = dataclasses.replace(mix, covs=mix.covs.copy())
        np.testing.assert_allclose(e_step(scaled, betas).responsibilities,
                                   base, rtol=1e-12)

    def test_degenerate_density_names_row(self):
        prior = GaussianPrior(np.zeros(1), np.eye(1))
        mix = init_mixture(prior, 1, rng_seed=0)
        with pytest.raises(NumericalDegeneracyError, match="row 1"):
            e_step(mix, np.array([[0.0], [1e200]]))


class TestMStep:
    def test_single_point_single_component(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        mix = init_mixture(prior, 1, rng_seed=0)
        beta = np.array([[3.0, -1.0]])
        stepped = m_step(e_step(mix, beta), beta)
        np.testing.assert_allclose(stepped.means[0], beta[0], atol=1e-12)
        np.testing.assert_array_equal(stepped.weights, np.array([1.0]))
        np.testing.assert_allclose(stepped.covs[0],
                                   mix.reg_lambda * np.eye(2), atol=1e-15)

    def test_one_hot_responsibilities(self):
        rng = np.random.default_rng(8)
        prior = random_prior(rng, 2)
        mix = init_mixture(prior, 2, rng_seed=0, n_images=2)
        betas = np.array([[5.0, 0.0], [-5.0, 2.0]])
        mix = dataclasses.replace(mix, responsibilities=np.eye(2))
        stepped = m_step(mix, betas)
        np.testing.assert_allclose(stepped.means, betas, atol=1e-12)

    def test_ten_rounds_match_textbook_oracle(self):
        rng = np.random.default_rng(2024)
        n, b, m = 50, 3, 2
        prior = random_prior(rng, b)
        betas = np.vstack([rng.normal(-2.0, 1.0, (n // 2, b)),
                           rng.normal(2.0, 0.7, (n - n // 2, b))])
        mix = init_mixture(prior, m, rng_seed=7)
        o_means, o_covs, o_weights = mix.means.copy(), mix.covs.copy(), mix.weights.copy()
        for _ in range(10):
            mix = e_step(mix, betas)
            o_resp = oracle_e_step(o_means, o_covs, o_weights, betas)
            np.testing.assert_allclose(mix.responsibilities, o_resp, atol=1e-8)
            mix = m_step(mix, betas)
            o_means, o_covs, o_weights = oracle_m_step(o_resp, betas,
                                                       mix.reg_lambda)
            np.testing.assert_allclose(mix.means, o_means, atol=1e-8)
            np.testing.assert_allclose(mix.covs, o_covs, atol=1e-8)
            np.testing.assert_allclose(mix.weights, o_weights, atol=1e-8)

    def test_collapsed_component_reseeded(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        mix = init_mixture(prior, 2, rng_seed=0, n_images=3)
        resp = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        mix = dataclasses.replace(mix, responsibilities=resp)
        betas = np.array([[1.0, 0.0], [1.2, 0.1], [0.8, -0.1]])
        stepped = m_step(mix, betas)
        assert stepped.reseed_count == 1
        assert any(e.get("event") == "component_reseed" for e in stepped.em_events)
        assert stepped.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(stepped.means[0], [1.0, 0.0], atol=0.05)

    def test_tied_covariance_mode(self):
        rng = np.random.default_rng(9)
        prior = random_prior(rng, 3)
        mix = init_mixture(prior, 3, rng_seed=1, tied_covariance=True)
        betas = rng.normal(size=(30, 3))
        stepped = m_step(e_step(mix, betas), betas)
        np.testing.assert_allclose(stepped.covs[0], stepped.covs[1], atol=1e-14)
        np.testing.assert_allclose(stepped.covs[0], stepped.covs[2], atol=1e-14)


class TestLogLikelihood:
    def test_all_points_at_mean_single_component(self):
        rng = np.random.default_rng(10)
        dim = 3
        prior = random_prior(rng, dim)
        mix = init_mixture(prior, 1, rng_seed=0)
        n = 7
        betas = np.tile(mix.means[0], (n, 1))
        expected = n * (-0.5 * (dim * np.log(2 * np.pi)
                                + np.log(np.linalg.det(mix.covs[0]))))
        assert log_likelihood(mix, betas) == pytest.approx(expected, rel=1e-12)

    def test_duplicate_point_adds_own_term(self):
        rng = np.random.default_rng(11)
        prior = random_prior(rng, 2)
        mix = init_mixture(prior, 3, rng_seed=1)
        betas = rng.normal(size=(5, 2))
        base = log_likelihood(mix, betas)
        extended = np.vstack([betas, betas[2]])
        single = log_likelihood(mix, betas[2:3])
        assert log_likelihood(mix, extended) == pytest.approx(base + single,
                                                              rel=1e-12)

    def test_matches_high_precision_oracle(self):
        pytest.importorskip("mpmath")
        rng = np.random.default_rng(12)
        prior = random_prior(rng, 3)
        mix = init_mixture(prior, 3, rng_seed=2)
        betas = rng.normal(0.0, 2.0, (8, 3))
        expected = oracle_log_likelihood(mix.means, mix.covs, mix.weights, betas)
        assert log_likelihood(mix, betas) == pytest.approx(expected, abs=1e-10)


class TestMonotonicity:
    def test_em_never_decreases_log_likelihood(self):
        rng = np.random.default_rng(77)
        failures = 0
        for trial in range(200):
            dim = int(rng.integers(2, 5))
            m = int(rng.integers(1, 4))
            n = int(rng.integers(m + 2, 40))
            prior = random_prior(rng, dim)
            betas = prior.sample(rng) + rng.normal(0.0, 1.0, (n, dim))
            mix = init_mixture(prior, m, rng_seed=trial)
            previous = log_likelihood(mix, betas)
            for _ in range(4):
                mix = m_step(e_step(mix, betas), betas)
                current = log_likelihood(mix, betas)
                if current < previous - 1e-9:
                    failures += 1
                previous = current
        assert failures == 0

    def test_single_component_recovers_sample_moments(self):
        rng = np.random.default_rng(13)
        prior = random_prior(rng, 3)
        betas = rng.normal(1.5, 2.0, (25, 3))
        mix = init_mixture(prior, 1, rng_seed=0)
        mix = m_step(e_step(mix, betas), betas)
        np.testing.assert_allclose(mix.means[0], betas.mean(axis=0), atol=1e-12)
        centered = betas - betas.mean(axis=0)
        expected = centered.T @ centered / betas.shape[0] \
            + mix.reg_lambda * np.eye(3)
        np.testing.assert_allclose(mix.covs[0], expected, atol=1e-12)


class TestInvariants:
    def test_weight_vector_validated(self):
        rng = np.random.default_rng(14)
        prior = random_prior(rng, 2)
        mix = init_mixture(prior, 2, rng_seed=0)
        with pytest.raises(InvalidParameterError):
            dataclasses.replace(mix, weights=np.array([0.7, 0.7]))

    def test_responsibility_rows_validated(self):
        rng = np.random.default_rng(15)
        prior = random_prior(rng, 2)
        mix = init_mixture(prior, 2, rng_seed=0, n_images=2)
        with pytest.raises(InvalidParameterError):
            dataclasses.replace(
                mix, responsibilities=np.array([[0.5, 0.6], [0.5, 0.5]]))

    def test_reg_lambda_matches_prior_scale(self):
        rng = np.random.default_rng(16)
        prior = random_prior(rng, 4)
        assert default_reg_lambda(prior) == pytest.approx(
            1e-6 * np.trace(prior.cov) / 4.0)


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_steps_keep_stochastic_structure(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 4))
    m = int(rng.integers(1, 4))
    prior = random_prior(rng, dim)
    betas = rng.normal(0.0, 2.0, (int(rng.integers(m + 1, 20)), dim))
    mix = init_mixture(prior, m, rng_seed=seed)
    for _ in range(2):
        mix = e_step(mix, betas)
        assert np.allclose(mix.responsibilities.sum(axis=1), 1.0, atol=1e-9)
        mix = m_step(mix, betas)
        assert np.allclose(mix.weights.sum(), 1.0, atol=1e-9)
        for cov in mix.covs:
            np.linalg.cholesky(cov)  # stays SPD
