#!/usr/bin/env python3
"""
Pixel-level posterior moments of the log-intensity.

For every stored draw b the pixel field is Gaussian given the ward
values, with mean m_j(b) = x_j beta + S_j Sigma_00^-1 (lambda* - X_tilde beta)
and variance sigma2 (1 - S_j Sigma_00^-1 S_j'). The posterior mean is the
average of m_j(b); the variance adds the average v_j(b) to the spread of
m_j(b) across draws.

Work is blocked by ward: each tile of one ward's pixels is streamed
through all draws, grouped by phi so each Sigma_p0 row is read once, and
the between-draw spread is merged draw block by draw block. No P x B
buffer is ever formed.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp
from tqdm import tqdm

from config import config, CSV_FLOAT_FORMAT
from models import CovarianceBundle, PixelGrid, PixelPosterior, PosteriorChain, WardCheck, WardTable
from sampler import chain_checksum
from validators import NumericalError, ValidationError

logger = logging.getLogger(__name__)

POSTERIOR_COLUMNS = ['pixel_id', 'row', 'col', 'ward_id', 'post_mean', 'post_sd']

PIXEL_TILE = 256
DRAW_BLOCK = 64


def ward_residual_weights(bundle: CovarianceBundle, lambda_star, beta, x_tilde) -> np.ndarray:
    """Sigma_00^-1 (lambda* - X_tilde beta); lambda_star and beta may hold several draws as rows."""
    residual = np.atleast_2d(lambda_star) - np.atleast_2d(beta) @ x_tilde.T
    return cho_solve((bundle.chol00, True), residual.T).T


def conditional_pixel_mean(beta, lambda_star, bundle: CovarianceBundle, x_tilde,
                           X_rows: np.ndarray, S_rows: np.ndarray) -> np.ndarray:
    """Conditional mean of the pixels in a block for one draw."""
    alpha = ward_residual_weights(bundle, lambda_star, beta, x_tilde)[0]
    return X_rows @ beta + S_rows @ alpha


def explained_fraction(bundle: CovarianceBundle, S_rows: np.ndarray) -> np.ndarray:
    """S_j Sigma_00^-1 S_j' for every row of S_rows."""
    Z = solve_triangular(bundle.chol00, np.asarray(S_rows, dtype=np.float64).T, lower=True)
    return np.einsum('ij,ij->j', Z, Z)


def conditional_pixel_var(sigma2: float, bundle: CovarianceBundle, S_rows: np.ndarray) -> np.ndarray:
    """sigma2 (1 - S_j Sigma_00^-1 S_j'), clamped at zero."""
    return sigma2 * np.maximum(1.0 - explained_fraction(bundle, S_rows), 0.0)


def _bundle_lookup(bundles: Sequence[CovarianceBundle], chain: PosteriorChain) -> Dict[int, CovarianceBundle]:
    by_phi = {round(b.phi, 9): b for b in bundles}
    lookup = {}
    for k in np.unique(chain.phi_index):
        phi = chain.phi_grid[k]
        bundle = by_phi.get(round(phi, 9))
        if bundle is None:
            raise ValidationError(f"no covariance bundle for phi={phi:g} used by the chain")
        lookup[int(k)] = bundle
    return lookup


class _RunningMoments:
    """Per-pixel mean and sum of squared deviations, merged block by block in draw order."""

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def add(self, values: np.ndarray) -> None:
        """Merge a (pixels, draws) block. values is overwritten."""
        k = values.shape[1]
        block_mean = values.mean(axis=1)
        np.subtract(values, block_mean[:, None], out=values)
        np.square(values, out=values)
        block_m2 = values.sum(axis=1)
        total = self.count + k
        delta = block_mean - self.mean
        self.mean += delta * (k / total)
        self.m2 += block_m2 + delta ** 2 * (self.count * k / total)
        self.count = total


def tile_bytes(n_wards: int, n_coef: int) -> int:
    """Working memory of one pixel tile: Sigma_p0 rows and their triangular solve, two draw blocks."""
    return 8 * PIXEL_TILE * (3 * n_wards + n_coef + 2 * DRAW_BLOCK + 8)


def _pixel_tiles(wards: WardTable) -> List[np.ndarray]:
    tiles = []
    for i in range(wards.L):
        idx = wards.members(i)
        tiles.extend(idx[s:s + PIXEL_TILE] for s in range(0, len(idx), PIXEL_TILE))
    return tiles


def _draw_groups(chain: PosteriorChain, lookup) -> list:
    if chain.has_latent_field:
        return [(k, np.flatnonzero(chain.phi_index == k)) for k in sorted(lookup)]
    return [(None, np.arange(chain.B))]


def _tile_moments(idx, X_rows, chain, lookup, alpha, groups):
    n = len(idx)
    moments = _RunningMoments(n)
    within = np.zeros(n)

    for k, draws in groups:
        S_rows = None
        if k is not None:
            bundle = lookup[k]
            S_rows = np.asarray(bundle.sigma_p0[idx], dtype=np.float64)
            within += chain.sigma2[draws].sum() * np.maximum(1.0 - explained_fraction(bundle, S_rows), 0.0)
        for start in range(0, len(draws), DRAW_BLOCK):
            d = draws[start:start + DRAW_BLOCK]
            M = X_rows @ chain.beta[d].T
            if S_rows is not None:
                M += S_rows @ alpha[d].T
            moments.add(M)

    return moments.mean, within / chain.B + moments.m2 / (chain.B - 1)


def pixel_posterior(
    chain: PosteriorChain,
    bundles: Sequence[CovarianceBundle],
    grid: PixelGrid,
    wards: WardTable,
    threads: Optional[int] = None,
    block_bytes: Optional[int] = None,
    progress: bool = False,
) -> PixelPosterior:
    """
    Posterior mean and sd of the log-intensity at every pixel.

    Pixels are cut into tiles of at most PIXEL_TILE members of one ward and
    draws into blocks of DRAW_BLOCK, so every reduction has the same shape
    whatever the budget or thread count. block_bytes caps the working memory
    of the tiles in flight at once; it never changes the result.
    """
    if chain.B < 2:
        raise ValidationError("pixel_posterior needs at least 2 draws")
    if chain.L != wards.L:
        raise ValidationError(f"chain has {chain.L} wards, ward table has {wards.L}")
    if chain.beta.shape[1] != grid.X.shape[1]:
        raise ValidationError("chain coefficients do not match the grid covariates")

    x_tilde = wards.x_bar
    budget = block_bytes or config.block_bytes
    per_tile = tile_bytes(wards.L, grid.X.shape[1])
    n_workers = max(1, min(config.get_threads(threads), budget // per_tile))
    if budget < per_tile:
        logger.warning("Block budget of %d bytes is below one pixel tile (%d bytes); running one tile at a time",
                       budget, per_tile)

    lookup, alpha = {}, None
    if chain.has_latent_field:
        lookup = _bundle_lookup(bundles, chain)
        alpha = np.empty((chain.B, chain.L))
        for k, bundle in lookup.items():
            d = np.flatnonzero(chain.phi_index == k)
            alpha[d] = ward_residual_weights(bundle, chain.lambda_star[d], chain.beta[d], x_tilde)
    groups = _draw_groups(chain, lookup)

    mean = np.empty(grid.n_pixels)
    var = np.empty(grid.n_pixels)

    def run(idx):
        m, v = _tile_moments(idx, grid.X[idx], chain, lookup, alpha, groups)
        mean[idx] = m
        var[idx] = v

    tiles = _pixel_tiles(wards)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for _ in tqdm(pool.map(run, tiles), total=len(tiles), desc="pixel tiles", disable=not progress):
            pass

    if np.any(var < 0):
        raise NumericalError("negative posterior variance after summing both terms")
    np.sqrt(var, out=var)

    meta = {
        'B': chain.B,
        'seed': chain.seed,
        'model': chain.model,
        'phi_grid': list(chain.phi_grid),
        'chain_sha256': chain_checksum(chain),
    }
    logger.info("Pixel posterior computed for %d pixels from %d draws on %d worker(s)",
                grid.n_pixels, chain.B, n_workers)
    return PixelPosterior(mean=mean, sd=var, meta=meta)


def aggregate_check(post: PixelPosterior, grid: PixelGrid, wards: WardTable,
                    chain: PosteriorChain) -> List[WardCheck]:
    """Re-aggregate exp(mean_j) over each ward and compare with the chain mean of lambda*_i."""
    chain_mean = chain.lambda_star.mean(axis=0)
    checks = []
    for i in range(wards.L):
        idx = wards.members(i)
        pixel_log_mean = float(logsumexp(post.mean[idx]) - np.log(len(idx)))
        checks.append(WardCheck(
            ward_id=int(wards.ward_ids[i]),
            pixel_log_mean=pixel_log_mean,
            chain_mean=float(chain_mean[i]),
        ))
    return checks


def write_ward_report(path, checks: List[WardCheck]) -> None:
    df = pd.DataFrame({
        'ward_id': [c.ward_id for c in checks],
        'pixel_log_mean': [c.pixel_log_mean for c in checks],
        'chain_mean': [c.chain_mean for c in checks],
        'difference': [c.difference for c in checks],
    })
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def write_posterior_csv(path, grid: PixelGrid, post: PixelPosterior) -> None:
    df = pd.DataFrame({
        'pixel_id': grid.pixel_ids,
        'row': grid.rows,
        'col': grid.cols,
        'ward_id': grid.ward_ids,
        'post_mean': post.mean,
        'post_sd': post.sd,
    }, columns=POSTERIOR_COLUMNS)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def read_posterior_csv(path) -> PixelPosterior:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"cannot read posterior file {path}: {e}")
    missing = [c for c in POSTERIOR_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    df = df.sort_values('pixel_id')
    return PixelPosterior(mean=df['post_mean'].to_numpy(float), sd=df['post_sd'].to_numpy(float))


def write_pgm(path, grid: PixelGrid, values: np.ndarray) -> None:
    """
    8-bit binary PGM of a per-pixel statistic with linear min-max scaling.
    The scaling range goes to a sidecar <path>.txt; uncovered cells are 0.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo if hi > lo else 1.0

    rows, cols = grid.shape
    raster = np.zeros((rows, cols), dtype=np.uint8)
    raster[grid.rows, grid.cols] = np.round(255.0 * (values - lo) / span).astype(np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode('ascii'))
        fh.write(raster.tobytes())
    Path(str(path) + '.txt').write_text(f"min {lo:.9g}\nmax {hi:.9g}\n")
