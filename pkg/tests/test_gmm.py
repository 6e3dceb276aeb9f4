import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import kstest

from dimgmm.gmm import (
    DegenerateCovarianceError,
    GaussianComponent,
    Gmm,
    InvalidModelError,
    Mixture1D,
    block_view,
    cdf_1d,
    cholesky,
    component_density,
    condition_centralized,
    inverse,
    mahalanobis_sq,
    marginal,
    mixture_density,
    pdf_1d,
    posterior,
    repair_covariance,
)

from conftest import random_gmm, random_spd
from oracles import bayes_posterior, dense_condition, dense_density, dense_mahalanobis, naive_mixture_density

seeds = st.integers(0, 2**32 - 1)


# densities ---------------------------------------------------------------


def test_standard_normal_at_mean():
    comp = GaussianComponent(1.0, np.zeros(2), np.eye(2), 1.0)
    assert component_density(comp, [0, 0]) == pytest.approx(1 / (2 * np.pi), rel=1e-12)
    assert component_density(comp, [0, 0]) == pytest.approx(0.159155, abs=5e-7)


def test_standard_normal_off_mean():
    comp = GaussianComponent(1.0, np.zeros(2), np.eye(2), 1.0)
    assert component_density(comp, [1, 1]) == pytest.approx(np.exp(-1) / (2 * np.pi), rel=1e-12)
    assert component_density(comp, [1, 1]) == pytest.approx(0.058550, abs=5e-7)


@given(seeds, st.integers(1, 6))
def test_density_matches_dense_formula(seed, dim):
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(dim)
    cov = random_spd(rng, dim)
    u = mean + rng.standard_normal(dim)
    comp = GaussianComponent(1.0, mean, cov, 1.0)
    assert component_density(comp, u) == pytest.approx(dense_density(mean, cov, u), rel=1e-12)


def test_single_component_mixture_equals_component(rng):
    g = random_gmm(rng, 1, 3)
    u = rng.standard_normal(3)
    assert mixture_density(g, u) == pytest.approx(component_density(g.component(0), u), rel=1e-14)


def test_identical_components_mixture(rng):
    cov = random_spd(rng, 2)
    g = Gmm([0.5, 0.5], np.zeros((2, 2)), np.stack([cov, cov]))
    u = np.array([0.3, -0.2])
    assert mixture_density(g, u) == pytest.approx(component_density(g.component(0), u), rel=1e-14)


@given(seeds)
def test_mixture_density_matches_term_sum(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3, 4)
    u = rng.standard_normal(4)
    assert mixture_density(g, u) == pytest.approx(naive_mixture_density(g, u), rel=1e-12, abs=1e-300)


def test_density_finite_and_positive_on_finite_input(rng):
    g = random_gmm(rng, 3, 5)
    pts = rng.standard_normal((50, 5)) * 3
    vals = mixture_density(g, pts)
    assert np.all(np.isfinite(vals)) and np.all(vals > 0)


# distances -----------------------------------------------------------------


def test_mahalanobis_zero_displacement(rng):
    cov = random_spd(rng, 4)
    mean = rng.standard_normal(4)
    assert mahalanobis_sq(GaussianComponent(1.0, mean, cov, 1.0), mean) == 0.0


def test_mahalanobis_euclidean_case():
    comp = GaussianComponent(1.0, np.zeros(6), np.eye(6), 1.0)
    assert mahalanobis_sq(comp, [3, 4, 0, 0, 0, 0]) == pytest.approx(25.0, rel=1e-15)


@given(seeds, st.integers(1, 8))
def test_mahalanobis_matches_dense(seed, dim):
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(dim)
    cov = random_spd(rng, dim)
    u = rng.standard_normal(dim)
    comp = GaussianComponent(1.0, mean, cov, 1.0)
    assert mahalanobis_sq(comp, u) == pytest.approx(dense_mahalanobis(mean, cov, u), rel=1e-12)


@given(seeds, st.integers(1, 8))
def test_whitening_property(seed, dim):
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(dim)
    cov = random_spd(rng, dim)
    s = rng.standard_normal(dim)
    u = mean + np.linalg.cholesky(cov) @ s
    comp = GaussianComponent(1.0, mean, cov, 1.0)
    assert mahalanobis_sq(comp, u) == pytest.approx(s @ s, rel=1e-10)


# posteriors -----------------------------------------------------------------


def test_single_component_posterior(rng):
    g = random_gmm(rng, 1, 3)
    assert posterior(g, rng.standard_normal(3)).tolist() == [1.0]


def test_identical_components_posterior_equals_weights(rng):
    cov = random_spd(rng, 3)
    g = Gmm([0.3, 0.7], np.zeros((2, 3)), np.stack([cov, cov]))
    for _ in range(5):
        np.testing.assert_allclose(posterior(g, rng.standard_normal(3)), [0.3, 0.7], rtol=1e-12)


@given(seeds)
def test_posterior_matches_bayes(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3, 3, scale=0.5)
    u = 0.5 * rng.standard_normal(3)
    post = posterior(g, u)
    np.testing.assert_allclose(post, bayes_posterior(g, u), atol=1e-12)
    assert post.sum() == pytest.approx(1.0, abs=1e-12)


def test_posterior_far_point_stays_normalised(rng):
    g = random_gmm(rng, 3, 4)
    post = posterior(g, np.full(4, 1e3))
    assert np.all(np.isfinite(post))
    assert post.sum() == pytest.approx(1.0, abs=1e-12)


# blocks and conditioning ---------------------------------------------------


def test_identity_partition():
    b = block_view(GaussianComponent(1.0, np.zeros(4), np.eye(4), 1.0), 2)
    np.testing.assert_array_equal(b.a_block, np.eye(2))
    np.testing.assert_array_equal(b.b_block, np.zeros((2, 2)))
    np.testing.assert_array_equal(b.c_block, np.eye(2))
    np.testing.assert_allclose(b.c_inverse, np.eye(2))


def test_blocks_are_literal_submatrices(rng):
    cov = random_spd(rng, 4)
    b = block_view(GaussianComponent(1.0, np.zeros(4), cov, 1.0), 2)
    np.testing.assert_array_equal(b.a_block, cov[:2, :2])
    np.testing.assert_array_equal(b.b_block, cov[:2, 2:])
    np.testing.assert_array_equal(b.c_block, cov[2:, 2:])


@given(seeds, st.integers(1, 6))
def test_forecast_block_inverse(seed, M):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, 2 * M)
    b = block_view(GaussianComponent(1.0, np.zeros(2 * M), cov, 1.0), M)
    np.testing.assert_allclose(b.c_block @ b.c_inverse, np.eye(M), atol=1e-8)


def test_bivariate_conditioning_example():
    g = Gmm([1.0], np.zeros((1, 2)), np.array([[[2.0, 1.0], [1.0, 1.0]]]))
    c = condition_centralized(g, [1.0])
    assert c.alpha[0, 0] == 1.0
    assert c.lam[0, 0] == pytest.approx(1.0, rel=1e-14)
    assert c.delta[0, 0] == pytest.approx(1.0, rel=1e-14)


def test_independent_blocks_keep_marginal(rng):
    M = 3
    A, C = random_spd(rng, M), random_spd(rng, M)
    cov = np.block([[A, np.zeros((M, M))], [np.zeros((M, M)), C]])
    mean = rng.standard_normal(2 * M)
    g = Gmm([1.0], mean[None], cov[None])
    c = condition_centralized(g, rng.standard_normal(M))
    np.testing.assert_allclose(c.lam[0], mean[:M], atol=1e-14)
    np.testing.assert_allclose(c.delta[0], np.diag(A), atol=1e-14)


@given(seeds)
def test_conditioning_matches_dense(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 2, 6, scale=0.5)
    y0 = 0.5 * rng.standard_normal(3)
    c = condition_centralized(g, y0)
    alpha, lam, delta = dense_condition(g, y0)
    np.testing.assert_allclose(c.alpha[:, 0], alpha, atol=1e-10)
    np.testing.assert_allclose(c.lam, lam, atol=1e-10)
    np.testing.assert_allclose(c.delta, delta, atol=1e-10)
    np.testing.assert_allclose(c.alpha.sum(axis=0), 1.0, atol=1e-12)
    diag_a = np.stack([np.diag(s[:3, :3]) for s in g.covariances])
    assert np.all(c.delta < diag_a)


def test_error_mixture_shifts_by_own_forecast():
    g = Gmm([1.0], np.zeros((1, 2)), np.array([[[2.0, 1.0], [1.0, 1.0]]]))
    mix = condition_centralized(g, [1.0]).error_mixture(0)
    assert mix.means[0] == pytest.approx(0.0, abs=1e-15)


# marginals and 1-D mixtures ----------------------------------------------


def test_full_marginal_is_identity(rng):
    g = random_gmm(rng, 2, 4)
    m = marginal(g, range(4))
    np.testing.assert_array_equal(m.means, g.means)
    np.testing.assert_array_equal(m.covariances, g.covariances)


def test_diagonal_single_component_marginal():
    g = Gmm([1.0], np.array([[1.0, 2.0, 3.0]]), np.diag([4.0, 5.0, 6.0])[None])
    m = marginal(g, [1])
    assert m.means[0, 0] == 2.0 and m.covariances[0, 0, 0] == 5.0


@given(seeds)
def test_marginal_of_marginal(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 2, 6)
    first = [5, 0, 3, 2]
    second = [1, 3]
    a = marginal(marginal(g, first), second)
    b = marginal(g, [first[i] for i in second])
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.covariances, b.covariances)


def test_sampled_projection_matches_marginal():
    rng = np.random.default_rng(7)
    g = random_gmm(rng, 3, 4)
    samples = g.sample(100_000, rng)[:, 2]
    mix = Mixture1D.from_gmm(marginal(g, [2]))
    assert kstest(samples, mix.cdf).statistic < 0.02


def test_standard_normal_cdf_at_zero():
    assert cdf_1d(Mixture1D([1.0], [0.0], [1.0]), [0.0])[0] == pytest.approx(0.5, abs=1e-15)


def test_pdf_integrates_to_one(rng):
    mix = Mixture1D(rng.dirichlet(np.ones(3)), rng.standard_normal(3), rng.uniform(0.1, 2, 3))
    grid = np.linspace(-30, 30, 200_001)
    assert trapezoid(pdf_1d(mix, grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_mixture_cdf_is_weighted_sum(rng):
    w = rng.dirichlet(np.ones(3))
    mu = rng.standard_normal(3)
    var = rng.uniform(0.1, 2, 3)
    grid = np.linspace(-4, 4, 101)
    total = sum(w[j] * cdf_1d(Mixture1D([1.0], [mu[j]], [var[j]]), grid) for j in range(3))
    np.testing.assert_allclose(cdf_1d(Mixture1D(w, mu, var), grid), total, atol=1e-12)


def test_grid_spans_six_sd():
    grid = Mixture1D([1.0], [1.0], [4.0]).grid()
    assert grid.size == 2001
    assert grid[0] == pytest.approx(-11.0) and grid[-1] == pytest.approx(13.0)


# validation and numerics ---------------------------------------------------


def test_check_rejects_bad_weights():
    with pytest.raises(InvalidModelError):
        Gmm([0.5, 0.4], np.zeros((2, 2)), np.stack([np.eye(2)] * 2)).check()
    with pytest.raises(InvalidModelError):
        Gmm([1.5, -0.5], np.zeros((2, 2)), np.stack([np.eye(2)] * 2)).check()
    with pytest.raises(InvalidModelError):
        Gmm.empty(2).check()


def test_cholesky_jitter_rescues_semidefinite():
    v = np.array([1.0, 1.0])
    chol = cholesky(np.outer(v, v))
    assert np.all(np.isfinite(chol))


def test_cholesky_raises_on_indefinite():
    with pytest.raises(DegenerateCovarianceError):
        cholesky(np.diag([1.0, -1.0]))


def test_repair_clips_indefinite_matrix():
    fixed = repair_covariance(np.diag([1.0, -0.5]))
    assert np.all(np.linalg.eigvalsh(fixed) > 0)
    assert fixed[0, 0] == pytest.approx(1.0)
    with pytest.raises(DegenerateCovarianceError):
        repair_covariance(np.diag([1.0, -0.5]), clip=False)


def test_repair_leaves_pd_matrix_alone(rng):
    cov = random_spd(rng, 4)
    np.testing.assert_array_equal(repair_covariance(cov), 0.5 * (cov + cov.T))


def test_inverse_is_symmetric(rng):
    cov = random_spd(rng, 5)
    inv = inverse(cov)
    np.testing.assert_array_equal(inv, inv.T)
    np.testing.assert_allclose(inv @ cov, np.eye(5), atol=1e-10)


def test_dict_round_trip(rng):
    g = random_gmm(rng, 3, 4)
    back = Gmm.from_dict(g.to_dict())
    np.testing.assert_array_equal(back.means, g.means)
    np.testing.assert_array_equal(back.covariances, g.covariances)
    np.testing.assert_array_equal(back.accumulators, g.accumulators)
