#!/usr/bin/env python3
"""
Comparison models and the exploratory Poisson regression.

  glm       - maximum likelihood Poisson regression with offset log|A_i|
  laplace   - no latent field: lambda* = X_tilde beta, conjugate in beta
  wn        - white-noise latent field, run through the main sampler
  bayesglm  - exact Poisson likelihood, normal priors, random-walk Metropolis
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import xlogy
from scipy.stats import norm
from tqdm import tqdm

from config import (
    config, DEFAULT_RW_ACCEPT_LOW, DEFAULT_RW_ACCEPT_HIGH, DEFAULT_RW_ADAPT_EVERY,
)
from kernels import make_bundle
from models import (
    BaselineKind, ChainConfig, CovarianceBundle, GlmFit, Hyperpriors, PhiGrid,
    PixelGrid, PosteriorChain, WardTable,
)
from sampler import gaussian_likelihood, run_chain
from validators import NumericalError, ValidationError

logger = logging.getLogger(__name__)

# Nominal range recorded for the white-noise model, which has no range parameter
WN_PHI = 0.0


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


def poisson_irls(
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray,
    ridge: float = 0.0,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
    names: Sequence[str] = (),
) -> GlmFit:
    """
    Poisson log-link regression by iteratively reweighted least squares.

    ridge adds ridge * ||beta||^2 / 2 to the negative log-likelihood, which
    gives the posterior mode under independent N(0, 1/ridge) priors.
    Convergence is declared when the relative change in (penalized)
    deviance drops below tol.
    """
    max_iter = max_iter or config.glm_max_iter
    tol = config.glm_tol if tol is None else tol
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    n, p = X.shape

    if np.any(y < 0):
        raise ValidationError("Poisson counts cannot be negative")
    if ridge == 0 and np.linalg.matrix_rank(X) < p:
        raise ValidationError(f"rank-deficient design: {p} columns, rank {np.linalg.matrix_rank(X)}")

    mu = y + 0.1
    eta = np.log(mu)
    beta = np.zeros(p)
    penalty = ridge * np.eye(p)
    dev_old = np.inf
    converged = False
    it = 0

    with np.errstate(over='raise', invalid='raise'):
        try:
            for it in range(1, max_iter + 1):
                z = eta - offset + (y - mu) / mu
                XtW = X.T * mu
                beta = cho_solve(cho_factor(XtW @ X + penalty), XtW @ z)
                eta = X @ beta + offset
                mu = np.exp(eta)
                dev = poisson_deviance(y, mu) + ridge * float(beta @ beta)
                if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
                    converged = True
                    break
                dev_old = dev
        except (FloatingPointError, LinAlgError) as e:
            raise NumericalError(f"Poisson IRLS failed at iteration {it}: {e}")

    if not converged:
        raise NumericalError(f"Poisson IRLS did not converge in {max_iter} iterations")

    info = (X.T * mu) @ X + penalty
    cov = cho_solve(cho_factor(info), np.eye(p))
    se = np.sqrt(np.diag(cov))
    z_val = beta / se
    logger.debug("IRLS converged in %d iterations, deviance %.6g", it, poisson_deviance(y, mu))
    return GlmFit(
        coef=beta,
        se=se,
        z=z_val,
        p=2.0 * norm.sf(np.abs(z_val)),
        converged=True,
        iterations=it,
        deviance=poisson_deviance(y, mu),
        names=tuple(names),
    )


def fit_poisson_glm(wards: WardTable, names: Sequence[str] = ()) -> GlmFit:
    """Y_i ~ Poisson(|A_i| exp(X_tilde_i beta)) by maximum likelihood."""
    return poisson_irls(wards.x_bar, wards.population, np.log(wards.pixel_count), names=names)


def bayes_glm_map(wards: WardTable, beta_sd: float) -> GlmFit:
    """Posterior mode of the Poisson regression under N(0, beta_sd^2) priors."""
    return poisson_irls(wards.x_bar, wards.population, np.log(wards.pixel_count),
                        ridge=1.0 / beta_sd ** 2)


def laplace_posterior(wards: WardTable, priors: Hyperpriors,
                      correction: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form N(mean, cov) of beta when lambda* = X_tilde beta exactly."""
    lambda_hat, weights = gaussian_likelihood(wards, correction)
    X = wards.x_bar
    XtW = X.T * weights
    Q = XtW @ X + np.eye(X.shape[1]) / priors.beta_sd ** 2
    try:
        factor = cho_factor(Q, lower=True)
    except LinAlgError as e:
        raise NumericalError(f"Laplace posterior precision is singular: {e}")
    return cho_solve(factor, XtW @ lambda_hat), cho_solve(factor, np.eye(X.shape[1]))


def _regression_chain(model: str, beta_draws: np.ndarray, wards: WardTable,
                      chain_config: ChainConfig) -> PosteriorChain:
    return PosteriorChain(
        model=model,
        lambda_star=beta_draws @ wards.x_bar.T,
        beta=beta_draws,
        sigma2=None,
        phi_index=np.zeros(beta_draws.shape[0], dtype=np.int64),
        phi_grid=(),
        burn_in=chain_config.burn_in,
        thin=chain_config.thin,
        seed=chain_config.seed,
    )


def fit_laplace(wards: WardTable, priors: Hyperpriors, chain_config: ChainConfig,
                correction: Optional[float] = None) -> PosteriorChain:
    """Independent draws from the closed-form Laplace posterior."""
    mean, cov = laplace_posterior(wards, priors, correction)
    rng = np.random.default_rng(chain_config.seed)
    draws = rng.multivariate_normal(mean, cov, size=chain_config.samples, method='cholesky')
    return _regression_chain(BaselineKind.LAPLACE.value, draws, wards, chain_config)


class IndicatorCrossCovariance:
    """
    Pixel-to-ward cross-covariance of ward-averaged white noise:
    entry (j, i) is 1/|A_i| when pixel j lies in ward i and 0 otherwise.
    Rows are produced on request, indexed like a P x L array.
    """

    def __init__(self, wards: WardTable):
        self._ward = wards.pixel_ward_index
        self._inv_size = 1.0 / wards.pixel_count.astype(np.float64)
        self.shape = (len(self._ward), wards.L)

    def __getitem__(self, rows) -> np.ndarray:
        rows = np.atleast_1d(np.arange(self.shape[0])[rows])
        out = np.zeros((len(rows), self.shape[1]))
        ward = self._ward[rows]
        out[np.arange(len(rows)), ward] = self._inv_size[ward]
        return out


def wn_bundle(grid: PixelGrid, wards: WardTable) -> CovarianceBundle:
    """Sigma_00 = diag(1/|A_i|) with the indicator cross-covariance."""
    sigma00 = np.diag(1.0 / wards.pixel_count.astype(np.float64))
    return make_bundle(WN_PHI, sigma00, IndicatorCrossCovariance(wards), jitter=0.0)


def fit_laplace_wn(grid: PixelGrid, wards: WardTable, priors: Hyperpriors, chain_config: ChainConfig,
                   correction: Optional[float] = None, progress: bool = False) -> PosteriorChain:
    wn_priors = Hyperpriors(
        phi_grid=PhiGrid((WN_PHI,)),
        beta_sd=priors.beta_sd,
        ig_shape=priors.ig_shape,
        ig_rate=priors.ig_rate,
    )
    return run_chain(grid, wards, [wn_bundle(grid, wards)], wn_priors, chain_config,
                     correction=correction, model=BaselineKind.LAPLACE_WN.value, progress=progress)


def poisson_log_posterior(beta: np.ndarray, X: np.ndarray, y: np.ndarray, offset: np.ndarray,
                          beta_sd: float) -> float:
    eta = X @ beta + offset
    return float(y @ eta - np.sum(np.exp(eta)) - 0.5 * (beta @ beta) / beta_sd ** 2)


def fit_bayes_glm(wards: WardTable, priors: Hyperpriors, chain_config: ChainConfig,
                  progress: bool = False) -> PosteriorChain:
    """
    Random-walk Metropolis on beta from the MLE, with proposals shaped by
    the inverse Fisher information. During burn-in the step scale is
    shrunk or grown every DEFAULT_RW_ADAPT_EVERY iterations to keep the
    acceptance rate between 0.23 and 0.44; it is frozen afterwards.
    """
    X = wards.x_bar
    y = wards.population.astype(np.float64)
    offset = np.log(wards.pixel_count)
    p = X.shape[1]

    try:
        start = fit_poisson_glm(wards)
    except (NumericalError, ValidationError) as e:
        logger.warning("MLE unavailable (%s); starting from the posterior mode", e)
        start = bayes_glm_map(wards, priors.beta_sd)

    chol = np.linalg.cholesky(_information_inverse(X, start.coef, offset, priors.beta_sd))
    scale = 2.38 / np.sqrt(p)
    rng = np.random.default_rng(chain_config.seed)

    beta = start.coef.copy()
    logp = poisson_log_posterior(beta, X, y, offset, priors.beta_sd)
    B = chain_config.samples
    draws = np.empty((B, p))
    accepted_window = 0
    accepted_total = 0
    kept = 0
    total = chain_config.burn_in + B * chain_config.thin

    for it in tqdm(range(total), desc="gibbs[bayesglm]", disable=not progress):
        proposal = beta + scale * (chol @ rng.standard_normal(p))
        logp_new = poisson_log_posterior(proposal, X, y, offset, priors.beta_sd)
        if np.log(rng.uniform()) < logp_new - logp:
            beta, logp = proposal, logp_new
            accepted_window += 1
            accepted_total += 1

        if it < chain_config.burn_in and (it + 1) % DEFAULT_RW_ADAPT_EVERY == 0:
            rate = accepted_window / DEFAULT_RW_ADAPT_EVERY
            if rate < DEFAULT_RW_ACCEPT_LOW:
                scale *= 0.8
            elif rate > DEFAULT_RW_ACCEPT_HIGH:
                scale *= 1.2
            accepted_window = 0

        after = it + 1 - chain_config.burn_in
        if after > 0 and after % chain_config.thin == 0:
            draws[kept] = beta
            kept += 1

    logger.info("BayesGLM: acceptance %.3f, final scale %.3g", accepted_total / total, scale)
    return _regression_chain(BaselineKind.BAYES_GLM.value, draws, wards, chain_config)


def _information_inverse(X: np.ndarray, beta: np.ndarray, offset: np.ndarray, beta_sd: float) -> np.ndarray:
    mu = np.exp(X @ beta + offset)
    p = X.shape[1]
    return cho_solve(cho_factor((X.T * mu) @ X + np.eye(p) / beta_sd ** 2), np.eye(p))


def fit_baseline(
    kind: BaselineKind,
    grid: PixelGrid,
    wards: WardTable,
    priors: Hyperpriors,
    chain_config: ChainConfig,
    correction: Optional[float] = None,
    progress: bool = False,
) -> PosteriorChain:
    """Fit one comparison model; the result plugs into predict and metrics unchanged."""
    if kind is BaselineKind.LAPLACE:
        return fit_laplace(wards, priors, chain_config, correction)
    if kind is BaselineKind.LAPLACE_WN:
        return fit_laplace_wn(grid, wards, priors, chain_config, correction, progress)
    if kind is BaselineKind.BAYES_GLM:
        return fit_bayes_glm(wards, priors, chain_config, progress)
    raise ValidationError(f"unknown baseline {kind}")
