#!/usr/bin/env python3
"""
Gibbs sampler for the latent Gaussian disaggregation model.

The Poisson ward likelihood is replaced by its Laplace approximation
N(lambda_hat_i; lambda*_i, 1/Y_i), which makes the full conditionals of
lambda*, beta and sigma2 conjugate. The range phi takes values on a
fixed grid and is drawn with probability proportional to the Gaussian
density of lambda* under each candidate covariance.
"""

import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, cholesky, solve_triangular, LinAlgError
from scipy.special import logsumexp
from tqdm import tqdm

from config import CSV_FLOAT_FORMAT
from grid_io import empirical_log_intensity, ols_residuals
from models import (
    ChainConfig, ChainState, CovarianceBundle, Hyperpriors, PosteriorChain,
    PixelGrid, WardTable,
)
from validators import NumericalError, ValidationError

logger = logging.getLogger(__name__)

CHAIN_MAGIC = b'DSGS'
CHAIN_VERSION = 1
# magic, version, L, m, B, n_phi, burn_in, thin, has_sigma2, seed, model
CHAIN_HEADER = struct.Struct('<4sIIIIIIIIQ16s')


def gaussian_likelihood(wards: WardTable, correction: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Working likelihood: (lambda_hat, weights) with weights Y_i."""
    eli = empirical_log_intensity(wards, correction)
    return eli.lambda_hat, eli.precision


def _factor(Q: np.ndarray, what: str) -> np.ndarray:
    try:
        return cholesky(Q, lower=True)
    except LinAlgError as e:
        raise NumericalError(f"{what} precision is not positive definite: {e}")


def _draw(mean: np.ndarray, chol_precision: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(mean.shape[0])
    return mean + solve_triangular(chol_precision.T, z, lower=False)


def _lambda_precision(beta, sigma2, bundle, x_tilde, lambda_hat, weights):
    Sinv = bundle.sigma00_inv
    Q = Sinv / sigma2 + np.diag(weights)
    b = Sinv @ (x_tilde @ beta) / sigma2 + weights * lambda_hat
    R = _factor(Q, "lambda*")
    return cho_solve((R, True), b), R


def lambda_conditional(beta, sigma2, bundle, x_tilde, lambda_hat, weights) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of lambda* given beta, sigma2, phi and the data."""
    mu, R = _lambda_precision(beta, sigma2, bundle, x_tilde, lambda_hat, weights)
    return mu, cho_solve((R, True), np.eye(len(mu)))


def update_lambda_star(beta, sigma2, bundle: CovarianceBundle, x_tilde, lambda_hat, weights,
                       rng: np.random.Generator) -> np.ndarray:
    mu, R = _lambda_precision(beta, sigma2, bundle, x_tilde, lambda_hat, weights)
    return _draw(mu, R, rng)


def _beta_precision(lambda_star, sigma2, bundle, x_tilde, priors):
    Sinv = bundle.sigma00_inv
    XtS = x_tilde.T @ Sinv
    Q = XtS @ x_tilde / sigma2 + np.eye(x_tilde.shape[1]) / priors.beta_sd ** 2
    b = XtS @ lambda_star / sigma2
    R = _factor(Q, "beta")
    return cho_solve((R, True), b), R


def beta_conditional(lambda_star, sigma2, bundle, x_tilde, priors: Hyperpriors) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of beta given lambda*, sigma2 and phi."""
    mu, R = _beta_precision(lambda_star, sigma2, bundle, x_tilde, priors)
    return mu, cho_solve((R, True), np.eye(len(mu)))


def update_beta(lambda_star, sigma2, bundle: CovarianceBundle, x_tilde, priors: Hyperpriors,
                rng: np.random.Generator) -> np.ndarray:
    mu, R = _beta_precision(lambda_star, sigma2, bundle, x_tilde, priors)
    return _draw(mu, R, rng)


def _quad_form(residual: np.ndarray, bundle: CovarianceBundle) -> float:
    z = solve_triangular(bundle.chol00, residual, lower=True)
    return float(z @ z)


def sigma2_conditional(lambda_star, beta, bundle, x_tilde, priors: Hyperpriors) -> Tuple[float, float]:
    """Inverse-Gamma (shape, rate) of sigma2 given lambda*, beta and phi."""
    residual = lambda_star - x_tilde @ beta
    shape = priors.ig_shape + 0.5 * len(residual)
    rate = priors.ig_rate + 0.5 * _quad_form(residual, bundle)
    return shape, rate


def update_sigma2(lambda_star, beta, bundle: CovarianceBundle, x_tilde, priors: Hyperpriors,
                  rng: np.random.Generator) -> float:
    shape, rate = sigma2_conditional(lambda_star, beta, bundle, x_tilde, priors)
    if not (np.isfinite(rate) and rate > 0):
        raise NumericalError(f"Inverse-Gamma rate must be positive, got {rate}")
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def phi_log_weights(lambda_star, beta, sigma2, bundles: Sequence[CovarianceBundle], x_tilde,
                    log_prior: Optional[Sequence[float]] = None) -> np.ndarray:
    """Normalized log selection probabilities over the candidate bundles."""
    residual = lambda_star - x_tilde @ beta
    L = len(residual)
    logw = np.array([
        -0.5 * (L * np.log(sigma2) + b.logdet00) - 0.5 * _quad_form(residual, b) / sigma2
        for b in bundles
    ])
    if log_prior is not None:
        logw = logw + np.asarray(log_prior, dtype=float)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise NumericalError("phi weights are not finite")
    return logw - total


def update_phi(lambda_star, beta, sigma2, bundles: Sequence[CovarianceBundle], x_tilde,
               rng: np.random.Generator, log_prior=None) -> Tuple[float, int]:
    logp = phi_log_weights(lambda_star, beta, sigma2, bundles, x_tilde, log_prior)
    p = np.exp(logp)
    k = int(rng.choice(len(p), p=p / p.sum()))
    return bundles[k].phi, k


def order_bundles(bundles: Sequence[CovarianceBundle], phi_grid) -> List[CovarianceBundle]:
    """Bundles in grid order; every grid value needs exactly one bundle."""
    by_phi = {}
    for b in bundles:
        by_phi[round(b.phi, 9)] = b
    ordered = []
    for phi in phi_grid:
        key = round(float(phi), 9)
        if key not in by_phi:
            raise ValidationError(f"no covariance bundle for phi={phi:g}")
        ordered.append(by_phi[key])
    return ordered


def initial_state(wards: WardTable, lambda_hat: np.ndarray, priors: Hyperpriors) -> ChainState:
    """lambda_hat, OLS coefficients, mean squared residual, grid median."""
    beta, residual = ols_residuals(wards, lambda_hat)
    sigma2 = float(np.mean(residual ** 2))
    if sigma2 <= 0:
        logger.warning("OLS residuals are all zero; starting sigma2 at 1e-6")
        sigma2 = 1e-6
    return ChainState(lambda_star=lambda_hat.copy(), beta=beta, sigma2=sigma2,
                      phi_index=priors.phi_grid.median_index)


def gibbs_sweep(state: ChainState, bundles, x_tilde, lambda_hat, weights, priors: Hyperpriors,
                rng: np.random.Generator) -> ChainState:
    """One sweep in the order lambda*, beta, sigma2, phi."""
    bundle = bundles[state.phi_index]
    lam = update_lambda_star(state.beta, state.sigma2, bundle, x_tilde, lambda_hat, weights, rng)
    beta = update_beta(lam, state.sigma2, bundle, x_tilde, priors, rng)
    sigma2 = update_sigma2(lam, beta, bundle, x_tilde, priors, rng)
    if len(bundles) > 1:
        _, k = update_phi(lam, beta, sigma2, bundles, x_tilde, rng, priors.phi_log_prior)
    else:
        k = 0
    return ChainState(lambda_star=lam, beta=beta, sigma2=sigma2, phi_index=k)


def run_chain(
    grid: PixelGrid,
    wards: WardTable,
    bundles: Sequence[CovarianceBundle],
    priors: Hyperpriors,
    chain_config: ChainConfig,
    initial: Optional[ChainState] = None,
    correction: Optional[float] = None,
    model: str = 'gp',
    progress: bool = False,
) -> PosteriorChain:
    """Run burn-in plus samples * thin sweeps and keep every thin-th draw."""
    errors = priors.validate() + chain_config.validate()
    if model == 'gp':
        errors += priors.phi_grid.validate()
    if errors:
        raise ValidationError("; ".join(errors))

    bundles = order_bundles(bundles, priors.phi_grid)
    lambda_hat, weights = gaussian_likelihood(wards, correction)
    x_tilde = wards.x_bar
    rng = np.random.default_rng(chain_config.seed)

    state = initial if initial is not None else initial_state(wards, lambda_hat, priors)

    B, L, p = chain_config.samples, wards.L, x_tilde.shape[1]
    lam_draws = np.empty((B, L))
    beta_draws = np.empty((B, p))
    sigma2_draws = np.empty(B)
    phi_draws = np.empty(B, dtype=np.int64)

    total = chain_config.burn_in + B * chain_config.thin
    kept = 0
    for it in tqdm(range(total), desc=f"gibbs[{model}]", disable=not progress):
        state = gibbs_sweep(state, bundles, x_tilde, lambda_hat, weights, priors, rng)
        after = it + 1 - chain_config.burn_in
        if after > 0 and after % chain_config.thin == 0:
            lam_draws[kept] = state.lambda_star
            beta_draws[kept] = state.beta
            sigma2_draws[kept] = state.sigma2
            phi_draws[kept] = state.phi_index
            kept += 1
        if it % 500 == 0:
            logger.debug("sweep %d: sigma2=%.4g phi=%g", it, state.sigma2, bundles[state.phi_index].phi)

    logger.info("Chain finished: %d sweeps, %d draws kept", total, B)
    return PosteriorChain(
        model=model,
        lambda_star=lam_draws,
        beta=beta_draws,
        sigma2=sigma2_draws,
        phi_index=phi_draws,
        phi_grid=tuple(priors.phi_grid.values),
        burn_in=chain_config.burn_in,
        thin=chain_config.thin,
        seed=chain_config.seed,
    )


def _chain_blocks(chain: PosteriorChain) -> Iterable[bytes]:
    """The chain file contents in write order: header, phi grid, then row-major draw blocks."""
    m = chain.beta.shape[1] - 1
    yield CHAIN_HEADER.pack(
        CHAIN_MAGIC, CHAIN_VERSION, chain.L, m, chain.B, len(chain.phi_grid),
        chain.burn_in, chain.thin, int(chain.has_latent_field), int(chain.seed),
        chain.model.encode('ascii')[:16],
    )
    yield np.asarray(chain.phi_grid, dtype='<f8').tobytes()
    yield np.ascontiguousarray(chain.lambda_star, dtype='<f8').tobytes()
    yield np.ascontiguousarray(chain.beta, dtype='<f8').tobytes()
    if chain.has_latent_field:
        yield np.ascontiguousarray(chain.sigma2, dtype='<f8').tobytes()
    yield np.ascontiguousarray(chain.phi_index, dtype='<i8').tobytes()


def chain_checksum(chain: PosteriorChain) -> str:
    """sha256 of the chain as write_chain stores it; equals the file's digest."""
    h = hashlib.sha256()
    for block in _chain_blocks(chain):
        h.update(block)
    return h.hexdigest()


def write_chain(path, chain: PosteriorChain) -> None:
    """Binary chain file, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as fh:
        for block in _chain_blocks(chain):
            fh.write(block)
    os.replace(tmp, path)


def read_chain(path) -> PosteriorChain:
    raw = Path(path).read_bytes()
    if len(raw) < CHAIN_HEADER.size:
        raise ValidationError(f"{path}: not a chain file (truncated header)")
    magic, version, L, m, B, n_phi, burn_in, thin, has_sigma2, seed, model = \
        CHAIN_HEADER.unpack_from(raw)
    if magic != CHAIN_MAGIC:
        raise ValidationError(f"{path}: not a chain file")
    if version != CHAIN_VERSION:
        raise ValidationError(f"{path}: unsupported chain version {version}")

    p = m + 1
    counts = [n_phi, B * L, B * p, B if has_sigma2 else 0]
    expected = CHAIN_HEADER.size + 8 * (sum(counts) + B)
    if len(raw) != expected:
        raise ValidationError(f"{path}: chain payload is truncated or oversized")

    offset = CHAIN_HEADER.size
    blocks = []
    for n in counts:
        blocks.append(np.frombuffer(raw, dtype='<f8', count=n, offset=offset).copy())
        offset += 8 * n
    phi_index = np.frombuffer(raw, dtype='<i8', count=B, offset=offset).copy()

    return PosteriorChain(
        model=model.rstrip(b'\x00').decode('ascii'),
        lambda_star=blocks[1].reshape(B, L),
        beta=blocks[2].reshape(B, p),
        sigma2=blocks[3] if has_sigma2 else None,
        phi_index=phi_index,
        phi_grid=tuple(blocks[0].tolist()),
        burn_in=burn_in,
        thin=thin,
        seed=seed,
    )


def batch_means_se(x) -> float:
    """Monte Carlo standard error by non-overlapping batch means of size floor(sqrt(n))."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    b = int(np.floor(np.sqrt(n)))
    a = n // b if b else 0
    if a < 2:
        return float('nan')
    means = x[:a * b].reshape(a, b).mean(axis=1)
    return float(np.sqrt(b * np.var(means, ddof=1) / n))


def _parameter_columns(chain: PosteriorChain, beta_names: Sequence[str],
                       ward_ids: Optional[Sequence[int]]) -> Dict[str, np.ndarray]:
    cols = {}
    for k in range(chain.beta.shape[1]):
        name = beta_names[k] if k < len(beta_names) else f"beta_{k}"
        cols[name] = chain.beta[:, k]
    if chain.has_latent_field:
        cols['sigma2'] = chain.sigma2
        cols['phi'] = chain.phi
    ids = ward_ids if ward_ids is not None else range(chain.L)
    for i, wid in enumerate(ids):
        cols[f"lambda_star[{wid}]"] = chain.lambda_star[:, i]
    return cols


def beta_labels(covariate_names: Sequence[str]) -> List[str]:
    return ['intercept'] + [f"beta_{name}" for name in covariate_names]


def summarize_chain(chain: PosteriorChain, beta_names: Sequence[str] = (),
                    ward_ids: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Posterior mean, sd, equal-tailed 95% interval and MCSE per parameter."""
    rows = []
    for name, x in _parameter_columns(chain, beta_names, ward_ids).items():
        lo, hi = np.quantile(x, [0.025, 0.975])
        rows.append({
            'parameter': name,
            'mean': float(np.mean(x)),
            'sd': float(np.std(x, ddof=1)) if len(x) > 1 else 0.0,
            'q2.5': float(lo),
            'q97.5': float(hi),
            'mcse': batch_means_se(x),
        })
    return pd.DataFrame(rows, columns=['parameter', 'mean', 'sd', 'q2.5', 'q97.5', 'mcse'])


def phi_distribution(chain: PosteriorChain) -> pd.DataFrame:
    """Discrete posterior of phi over its grid; the mean is the 'phi' row of the summary."""
    counts = np.bincount(chain.phi_index, minlength=len(chain.phi_grid))
    return pd.DataFrame({'phi': list(chain.phi_grid), 'probability': counts / chain.B})


def write_trace(path, chain: PosteriorChain, lambda_indices: Iterable[int] = (),
                beta_names: Sequence[str] = ()) -> None:
    """Iteration-indexed hyperparameter draws plus selected lambda* columns."""
    iteration = chain.burn_in + chain.thin * (np.arange(chain.B) + 1)
    df = pd.DataFrame({'iteration': iteration})
    for k in range(chain.beta.shape[1]):
        df[beta_names[k] if k < len(beta_names) else f"beta_{k}"] = chain.beta[:, k]
    if chain.has_latent_field:
        df['sigma2'] = chain.sigma2
        df['phi'] = chain.phi
    for i in lambda_indices:
        if not 0 <= i < chain.L:
            raise ValidationError(f"--trace-lambda index {i} outside 0..{chain.L - 1}")
        df[f"lambda_star_{i}"] = chain.lambda_star[:, i]
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
