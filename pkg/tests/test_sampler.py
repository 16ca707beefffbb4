"""
Tests for the Gibbs sampler: full conditionals, range selection, chain
runs and chain files.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import make_grid, scalar_bundle, exact_bundle
from kernels import make_bundle
from models import ChainConfig, ChainState, Hyperpriors, PhiGrid, WardTable
from sampler import (
    gaussian_likelihood, lambda_conditional, update_lambda_star, beta_conditional, update_beta,
    sigma2_conditional, update_sigma2, phi_log_weights, update_phi, initial_state, gibbs_sweep,
    run_chain, write_chain, read_chain, summarize_chain, phi_distribution, batch_means_se,
    order_bundles, write_trace,
)
from validators import ValidationError

ONE = np.array([[1.0]])


def single_ward(population, size=1):
    return WardTable(ward_ids=[0], population=[population], pixel_count=[size],
                     x_bar=ONE, pixel_ward_index=np.zeros(size, dtype=np.int64))


def priors(*phis, **kw):
    return Hyperpriors(phi_grid=PhiGrid(phis or (1.0,)), **kw)


def test_gaussian_likelihood_weights():
    lam, w = gaussian_likelihood(single_ward(100, 100))
    assert lam[0] == 0.0 and w[0] == 100.0

    _, w = gaussian_likelihood(single_ward(1, 3))
    assert w[0] == 1.0, "Y = 1 gives the widest working likelihood"


def test_working_precision_is_poisson_curvature():
    """-d2/dlam2 of Y lam - |A| exp(lam) at lam_hat equals Y."""
    Y, A = 37, 5
    lam_hat = gaussian_likelihood(single_ward(Y, A))[0][0]
    f = lambda x: Y * x - A * math.exp(x)
    h = 1e-4
    second = (f(lam_hat + h) - 2 * f(lam_hat) + f(lam_hat - h)) / h ** 2
    assert -second == pytest.approx(Y, rel=1e-5)


def test_lambda_conditional_scalar():
    mu, cov = lambda_conditional(np.zeros(1), 1.0, scalar_bundle(1.0), ONE,
                                 np.array([1.0]), np.array([4.0]))
    assert mu[0] == pytest.approx(4 / 5)
    assert cov[0, 0] == pytest.approx(1 / 5)


def test_lambda_conditional_data_dominance(toy_20):
    grid, wards = toy_20
    bundle = exact_bundle(grid, wards, 2.0)
    lam_hat = np.array([0.3, -1.2, 2.0, 0.7])
    mu, _ = lambda_conditional(np.array([0.5, 0.1]), 1.0, bundle, wards.x_bar, lam_hat,
                               np.full(4, 1e8))
    assert np.max(np.abs(mu - lam_hat)) < 1e-3


def test_lambda_conditional_flat_prior(toy_20):
    grid, wards = toy_20
    bundle = exact_bundle(grid, wards, 2.0)
    lam_hat = np.array([0.3, -1.2, 2.0, 0.7])
    # sigma2 = 1e12 scales the prior precision by 1e-12
    mu, _ = lambda_conditional(np.array([0.5, 0.1]), 1e12, bundle, wards.x_bar, lam_hat,
                               np.array([3.0, 5.0, 8.0, 2.0]))
    assert np.allclose(mu, lam_hat, atol=1e-8)


def test_beta_conditional_examples():
    mu, _ = beta_conditional(np.array([2.0]), 1.0, scalar_bundle(1.0), ONE, priors())
    assert mu[0] == pytest.approx(2 / (1 + 1e-4), rel=1e-12)
    assert mu[0] == pytest.approx(1.99980, abs=1e-5)

    mu, _ = beta_conditional(np.zeros(1), 1.0, scalar_bundle(1.0), ONE, priors())
    assert mu[0] == 0.0

    rng = np.random.default_rng(3)
    draw = update_beta(np.array([2.0]), 1.0, scalar_bundle(1.0), ONE, priors(beta_sd=1e-9), rng)
    assert abs(draw[0]) < 1e-6, "a vanishing prior sd pins beta at zero"


def test_sigma2_conditional_examples():
    bundle = scalar_bundle(1.0)
    shape, rate = sigma2_conditional(np.array([0.7]), np.array([0.7]), bundle, ONE, priors())
    assert rate == 0.01, "zero residual leaves the prior rate"

    identity = make_bundle(1.0, np.eye(2), jitter=0.0)
    shape, rate = sigma2_conditional(np.array([1.0, 1.0]), np.zeros(1), identity, np.ones((2, 1)), priors())
    assert shape == pytest.approx(1.01)
    assert rate == pytest.approx(1.01)


def test_sigma2_shape_for_198_wards():
    L = 198
    bundle = make_bundle(1.0, np.eye(L), jitter=0.0)
    shape, _ = sigma2_conditional(np.zeros(L), np.zeros(1), bundle, np.ones((L, 1)), priors())
    assert shape == pytest.approx(99.01, abs=1e-12)


def test_update_beta_matches_conditional(toy_20):
    """Empirical moments of 100,000 draws match (mu_1, Sigma_1)."""
    grid, wards = toy_20
    bundle = exact_bundle(grid, wards, 2.0)
    lam = np.array([0.4, -0.3, 1.1, 0.2])
    pri = priors(2.0)
    mu, cov = beta_conditional(lam, 0.8, bundle, wards.x_bar, pri)

    rng = np.random.default_rng(11)
    n = 100_000
    draws = np.array([update_beta(lam, 0.8, bundle, wards.x_bar, pri, rng) for _ in range(n)])

    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - mu) < 4 * se_mean)
    emp_cov = np.cov(draws, rowvar=False)
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    assert np.all(np.abs(emp_cov - cov) < 4 * se_cov)


def test_update_sigma2_matches_inverse_gamma():
    L = 10
    bundle = make_bundle(1.0, np.eye(L), jitter=0.0)
    lam = np.linspace(-1, 1, L)
    x_tilde = np.ones((L, 1))
    beta = np.array([0.1])
    pri = priors()
    A, B = sigma2_conditional(lam, beta, bundle, x_tilde, pri)
    assert A == pytest.approx(0.01 + L / 2)

    rng = np.random.default_rng(12)
    n = 100_000
    draws = np.array([update_sigma2(lam, beta, bundle, x_tilde, pri, rng) for _ in range(n)])
    assert np.all(draws > 0)

    mean = B / (A - 1)
    var = B ** 2 / ((A - 1) ** 2 * (A - 2))
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / n)


def test_phi_weights_examples():
    # two identical candidates: equal probabilities
    same = [scalar_bundle(1.0, 1.0), scalar_bundle(1.0, 2.0)]
    logp = phi_log_weights(np.array([0.3]), np.zeros(1), 1.0, same, ONE)
    assert np.allclose(np.exp(logp), [0.5, 0.5])

    # log-densities {0, log 3} through the prior
    logp = phi_log_weights(np.array([0.3]), np.zeros(1), 1.0, same, ONE, log_prior=[0.0, math.log(3)])
    assert np.allclose(np.exp(logp), [0.25, 0.75])

    # Sigma_00 values {1, 4}, zero residual: densities proportional to {1, 1/2}
    pair = [scalar_bundle(1.0, 1.0), scalar_bundle(4.0, 2.0)]
    logp = phi_log_weights(np.zeros(1), np.zeros(1), 1.0, pair, ONE)
    assert np.allclose(np.exp(logp), [2 / 3, 1 / 3])
    assert logsumexp(logp) == pytest.approx(0.0, abs=1e-12)


def test_update_phi_frequencies():
    pair = [scalar_bundle(1.0, 1.0), scalar_bundle(4.0, 2.0)]
    rng = np.random.default_rng(13)
    n = 100_000
    picks = np.array([update_phi(np.zeros(1), np.zeros(1), 1.0, pair, ONE, rng)[1] for _ in range(n)])
    freq = np.bincount(picks, minlength=2) / n
    assert abs(freq[0] - 2 / 3) < 0.005 and abs(freq[1] - 1 / 3) < 0.005


def test_order_bundles_requires_every_phi():
    bundles = [scalar_bundle(1.0, 2.0), scalar_bundle(1.0, 1.0)]
    assert [b.phi for b in order_bundles(bundles, [1.0, 2.0])] == [1.0, 2.0]
    with pytest.raises(ValidationError, match="phi=3"):
        order_bundles(bundles, [1.0, 2.0, 3.0])


def _gp_setup(toy_20, phis=(1.5, 3.0)):
    grid, wards = toy_20
    bundles = [exact_bundle(grid, wards, phi) for phi in phis]
    return grid, wards, bundles, priors(*phis)


def test_run_chain_is_deterministic(toy_20):
    grid, wards, bundles, pri = _gp_setup(toy_20)
    cfg = ChainConfig(seed=42, burn_in=20, samples=50, thin=2)
    a = run_chain(grid, wards, bundles, pri, cfg)
    b = run_chain(grid, wards, bundles, pri, cfg)
    assert np.array_equal(a.lambda_star, b.lambda_star)
    assert np.array_equal(a.beta, b.beta)
    assert np.array_equal(a.sigma2, b.sigma2)
    assert np.array_equal(a.phi_index, b.phi_index)


def test_run_chain_support_and_positivity(toy_20):
    grid, wards, bundles, pri = _gp_setup(toy_20)
    chain = run_chain(grid, wards, bundles, pri, ChainConfig(seed=5, burn_in=10, samples=200))
    assert chain.B == 200 and chain.L == 4
    assert np.all(chain.sigma2 > 0), "sigma2 draws must be positive"
    assert set(np.unique(chain.phi)) <= {1.5, 3.0}, "phi draws must be grid members"
    assert chain.is_valid()


def test_single_draw_equals_one_sweep(toy_20):
    grid, wards, bundles, pri = _gp_setup(toy_20)
    chain = run_chain(grid, wards, bundles, pri, ChainConfig(seed=9, burn_in=0, samples=1))

    lam_hat, weights = gaussian_likelihood(wards)
    state = initial_state(wards, lam_hat, pri)
    assert state.phi_index == 0, "lower median of a two-value grid"
    state = gibbs_sweep(state, bundles, wards.x_bar, lam_hat, weights, pri, np.random.default_rng(9))
    assert np.array_equal(chain.lambda_star[0], state.lambda_star)
    assert np.array_equal(chain.beta[0], state.beta)
    assert chain.sigma2[0] == state.sigma2
    assert chain.phi_index[0] == state.phi_index


def test_run_chain_rejects_bad_grid(toy_20):
    grid, wards, bundles, _ = _gp_setup(toy_20)
    with pytest.raises(ValidationError):
        run_chain(grid, wards, bundles, priors(3.0, 1.5), ChainConfig(seed=1, samples=5))


def test_gibbs_matches_grid_integration():
    """Intercept-only, one ward: Gibbs marginal of beta against dense quadrature."""
    Y, beta_sd, a0, b0 = 20, 1.0, 3.0, 2.0
    grid, wards = make_grid([(0, 0)], [0], population=[Y])
    bundle = scalar_bundle(1.0, 5.0)
    pri = Hyperpriors(phi_grid=PhiGrid((5.0,)), beta_sd=beta_sd, ig_shape=a0, ig_rate=b0)
    chain = run_chain(grid, wards, [bundle], pri, ChainConfig(seed=2024, burn_in=1000, samples=50_000))

    # lam_hat | beta, s2 ~ N(beta, s2 + 1/Y) after integrating out lambda*
    lam_hat = math.log(Y)
    b = np.linspace(-6.0, 10.0, 2001)
    log_s2 = np.linspace(math.log(1e-4), math.log(200.0), 2001)
    s2 = np.exp(log_s2)
    B, S2 = np.meshgrid(b, s2, indexing='ij')
    v = S2 + 1.0 / Y
    logpost = (-0.5 * np.log(v) - 0.5 * (lam_hat - B) ** 2 / v
               - 0.5 * B ** 2 / beta_sd ** 2
               - (a0 + 1) * np.log(S2) - b0 / S2
               + np.log(S2))  # Jacobian of the log-s2 grid
    w = np.exp(logpost - logpost.max()).sum(axis=1)
    w /= w.sum()
    mean = float(np.sum(w * b))
    sd = float(np.sqrt(np.sum(w * (b - mean) ** 2)))

    draws = chain.beta[:, 0]
    assert draws.mean() == pytest.approx(mean, rel=0.02), f"{draws.mean():.4f} vs {mean:.4f}"
    assert draws.std(ddof=1) == pytest.approx(sd, rel=0.02), f"{draws.std():.4f} vs {sd:.4f}"


def test_chain_file_round_trip(tmp_path, toy_20):
    grid, wards, bundles, pri = _gp_setup(toy_20)
    chain = run_chain(grid, wards, bundles, pri, ChainConfig(seed=8, burn_in=5, samples=30, thin=3))
    path = tmp_path / 'chain.bin'
    write_chain(path, chain)
    back = read_chain(path)

    assert back.model == 'gp'
    assert back.phi_grid == (1.5, 3.0)
    assert (back.burn_in, back.thin, back.seed) == (5, 3, 8)
    assert np.array_equal(back.lambda_star, chain.lambda_star)
    assert np.array_equal(back.sigma2, chain.sigma2)
    assert np.array_equal(back.phi_index, chain.phi_index)


def test_chain_file_rejects_garbage(tmp_path):
    path = tmp_path / 'chain.bin'
    path.write_bytes(b'not a chain file at all, definitely not' * 4)
    with pytest.raises(ValidationError, match="not a chain file"):
        read_chain(path)


def test_summary_and_phi_distribution(tmp_path, toy_20):
    grid, wards, bundles, pri = _gp_setup(toy_20)
    chain = run_chain(grid, wards, bundles, pri, ChainConfig(seed=4, burn_in=10, samples=100))

    summary = summarize_chain(chain, ['intercept', 'beta_cov_1'], wards.ward_ids)
    assert list(summary.columns) == ['parameter', 'mean', 'sd', 'q2.5', 'q97.5', 'mcse']
    assert list(summary['parameter'][:4]) == ['intercept', 'beta_cov_1', 'sigma2', 'phi']
    assert len(summary) == 4 + wards.L
    assert np.all(summary['q2.5'] <= summary['q97.5'])

    dist = phi_distribution(chain)
    assert list(dist['phi']) == [1.5, 3.0]
    assert dist['probability'].sum() == pytest.approx(1.0)

    trace = tmp_path / 'trace.csv'
    write_trace(trace, chain, [0, 3], ['intercept', 'beta_cov_1'])
    header = trace.read_text().splitlines()[0]
    assert header == 'iteration,intercept,beta_cov_1,sigma2,phi,lambda_star_0,lambda_star_3'
    with pytest.raises(ValidationError):
        write_trace(trace, chain, [4])


def test_batch_means_se_iid():
    x = np.random.default_rng(0).standard_normal(40_000)
    se = batch_means_se(x)
    assert se == pytest.approx(1 / math.sqrt(40_000), rel=0.25)


def test_update_lambda_star_scalar_moments():
    rng = np.random.default_rng(14)
    n = 40_000
    draws = np.array([
        update_lambda_star(np.zeros(1), 1.0, scalar_bundle(1.0), ONE, np.array([1.0]), np.array([4.0]), rng)[0]
        for _ in range(n)
    ])
    assert abs(draws.mean() - 0.8) < 4 * math.sqrt(0.2 / n)
    assert draws.var() == pytest.approx(0.2, rel=0.03)


def test_start_point_does_not_matter(wards_20):
    grid, wards = wards_20
    phis = (2.0, 4.0, 8.0)
    bundles = [exact_bundle(grid, wards, phi) for phi in phis]
    pri = priors(*phis)
    cfg = dict(burn_in=200, samples=2000)

    from_data = run_chain(grid, wards, bundles, pri, ChainConfig(seed=11, **cfg))
    at_prior = ChainState(lambda_star=np.zeros(wards.L), beta=np.zeros(2), sigma2=1.0,
                          phi_index=pri.phi_grid.median_index)
    from_prior = run_chain(grid, wards, bundles, pri, ChainConfig(seed=12, **cfg), initial=at_prior)

    for k in range(2):
        a, b = from_data.beta[:, k], from_prior.beta[:, k]
        mcse = math.hypot(batch_means_se(a), batch_means_se(b))
        assert abs(a.mean() - b.mean()) < 3 * mcse, f"beta_{k}: {a.mean():.4f} vs {b.mean():.4f}"
