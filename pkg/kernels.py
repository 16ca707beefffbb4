#!/usr/bin/env python3
"""
Exponential kernel and ward-aggregated correlation matrices.

Distances are Euclidean on (row, col) scaled by the pixel side. Both
assemblies run on a thread pool where every task owns a disjoint set
of output cells, so results do not depend on the schedule.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import cholesky, LinAlgError
from scipy.spatial.distance import cdist
from tqdm import tqdm

from config import config
from cov_cache import CovarianceCache
from models import CovarianceBundle, PixelGrid, WardTable
from validators import NumericalError

logger = logging.getLogger(__name__)


def exp_corr(d, phi: float):
    """exp(-d / phi); d may be a scalar or an array of distances."""
    return np.exp(-np.asarray(d, dtype=np.float64) / phi)


def _pair_mean(a: np.ndarray, b: np.ndarray, phi: float, chunk: int) -> float:
    """Mean of exp(-|a_k - b_l| / phi) over all pairs, with compensated accumulation."""
    step = max(1, chunk // max(1, len(b)))
    partial = []
    for start in range(0, len(a), step):
        block = exp_corr(cdist(a[start:start + step], b), phi)
        partial.extend(block.sum(axis=1).tolist())
    return math.fsum(partial) / (len(a) * len(b))


def build_sigma00(
    grid: PixelGrid,
    wards: WardTable,
    phi: float,
    threads: Optional[int] = None,
    chunk: Optional[int] = None,
) -> np.ndarray:
    """L x L matrix of ward-pair average correlations; upper triangle mirrored."""
    chunk = chunk or config.kernel_chunk
    coords = grid.coords
    members = [coords[wards.members(i)] for i in range(wards.L)]
    L = wards.L
    S = np.empty((L, L))

    def fill(pair):
        i, j = pair
        value = _pair_mean(members[i], members[j], phi, chunk)
        S[i, j] = value
        S[j, i] = value

    pairs = [(i, j) for i in range(L) for j in range(i, L)]
    with ThreadPoolExecutor(max_workers=config.get_threads(threads)) as pool:
        list(pool.map(fill, pairs))
    return S


def build_sigma_p0(
    grid: PixelGrid,
    wards: WardTable,
    phi: float,
    out: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
    chunk: Optional[int] = None,
) -> np.ndarray:
    """
    P x L pixel-to-ward average correlations written into out (an ndarray
    or writable memmap); allocated when out is None.
    """
    chunk = chunk or config.kernel_chunk
    coords = grid.coords
    P, L = grid.n_pixels, wards.L
    members = [coords[wards.members(i)] for i in range(L)]
    if out is None:
        out = np.empty((P, L))

    largest = int(wards.pixel_count.max())
    block_rows = max(1, chunk // largest)

    def fill(start):
        stop = min(start + block_rows, P)
        block = coords[start:stop]
        for i, ward_coords in enumerate(members):
            out[start:stop, i] = exp_corr(cdist(block, ward_coords), phi).mean(axis=1)

    with ThreadPoolExecutor(max_workers=config.get_threads(threads)) as pool:
        list(pool.map(fill, range(0, P, block_rows)))
    return out


def make_bundle(
    phi: float,
    sigma00: np.ndarray,
    sigma_p0=None,
    jitter: Optional[float] = None,
) -> CovarianceBundle:
    """Factorize sigma00 + jitter * I and wrap everything in a bundle."""
    jitter = config.jitter if jitter is None else float(jitter)
    sigma00 = np.array(sigma00, dtype=np.float64)
    try:
        chol = cholesky(sigma00 + jitter * np.eye(sigma00.shape[0]), lower=True)
    except LinAlgError as e:
        raise NumericalError(f"Cholesky of Sigma_00 failed for phi={phi}: {e}")

    diag = np.diag(chol)
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise NumericalError(f"Sigma_00 is not positive definite for phi={phi}")

    sigma00.setflags(write=False)
    chol.setflags(write=False)
    return CovarianceBundle(
        phi=float(phi),
        sigma00=sigma00,
        chol00=chol,
        logdet00=2.0 * float(np.sum(np.log(diag))),
        sigma_p0=sigma_p0,
        jitter=jitter,
    )


def prepare_bundles(
    grid: PixelGrid,
    wards: WardTable,
    phi_grid: Sequence[float],
    cache_dir=None,
    jitter: Optional[float] = None,
    threads: Optional[int] = None,
    cache: Optional[CovarianceCache] = None,
    progress: bool = False,
) -> List[CovarianceBundle]:
    """
    One bundle per phi, sorted by phi. With a cache directory (or an
    explicit cache) valid files are reused and new ones persisted;
    otherwise everything stays in memory.
    """
    jitter = config.jitter if jitter is None else float(jitter)
    if cache is None and cache_dir is not None:
        cache = CovarianceCache(cache_dir, grid, wards, jitter)

    bundles = []
    for phi in tqdm(sorted(float(p) for p in phi_grid), desc="phi", disable=not progress):
        if cache is not None:
            bundle = cache.load(phi)
            if bundle is not None:
                logger.info("phi=%g: cache hit", phi)
                bundles.append(bundle)
                continue

        sigma00 = build_sigma00(grid, wards, phi, threads=threads)
        bundle = make_bundle(phi, sigma00, jitter=jitter)

        if cache is not None:
            sink = cache.open_sigma_p0(phi)
            try:
                build_sigma_p0(grid, wards, phi, out=sink, threads=threads)
                bundle = cache.store(CovarianceBundle(
                    phi=bundle.phi, sigma00=bundle.sigma00, chol00=bundle.chol00,
                    logdet00=bundle.logdet00, sigma_p0=sink, jitter=jitter,
                ))
            except BaseException:
                del sink
                cache.discard_sigma_p0(phi)
                raise
            del sink
        else:
            sigma_p0 = build_sigma_p0(grid, wards, phi, threads=threads)
            sigma_p0.setflags(write=False)
            bundle = CovarianceBundle(
                phi=bundle.phi, sigma00=bundle.sigma00, chol00=bundle.chol00,
                logdet00=bundle.logdet00, sigma_p0=sigma_p0, jitter=jitter,
            )
        logger.info("phi=%g: computed Sigma_00 (%d wards) and Sigma_p0 (%d pixels)",
                    phi, wards.L, grid.n_pixels)
        bundles.append(bundle)

    return bundles
