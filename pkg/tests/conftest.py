"""
Shared fixtures for the disaggregation test suite.

Run with: python3 -m pytest tests/
Slow tests (full simulation study) run only with DISAGG_RUN_SLOW=1.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pathlib import Path

import numpy as np
import pytest

from config import config as settings
from grid_io import build_ward_table
from kernels import build_sigma00, build_sigma_p0, make_bundle
from models import CovarianceBundle, PixelGrid
from simulation import simulate_ward_counts, synthetic_grid, with_counts

FIXTURES = Path(__file__).parent / 'fixtures'


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running study tests (set DISAGG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if settings.run_slow:
        return
    skip = pytest.mark.skip(reason="set DISAGG_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def make_grid(coords, ward_ids, covariates=None, population=None, pixel_side=1.0):
    """PixelGrid and WardTable from (row, col) pairs; covariates exclude the intercept."""
    coords = np.asarray(coords, dtype=np.int64)
    P = len(coords)
    cov = np.empty((P, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(P, -1)
    grid = PixelGrid(
        rows=coords[:, 0],
        cols=coords[:, 1],
        ward_ids=ward_ids,
        X=np.column_stack([np.ones(P), cov]),
        covariate_names=tuple(f"cov_{k + 1}" for k in range(cov.shape[1])),
        pixel_side=pixel_side,
    )
    ids = np.unique(ward_ids)
    population = np.zeros(len(ids), dtype=np.int64) if population is None else population
    return grid, build_ward_table(grid, ids, population)


def exact_bundle(grid, wards, phi):
    """Bundle without jitter, for comparisons against dense arithmetic."""
    bundle = make_bundle(phi, build_sigma00(grid, wards, phi, threads=1), jitter=0.0)
    return CovarianceBundle(phi=bundle.phi, sigma00=bundle.sigma00, chol00=bundle.chol00,
                            logdet00=bundle.logdet00,
                            sigma_p0=build_sigma_p0(grid, wards, phi, threads=1), jitter=0.0)


def scalar_bundle(value, phi=1.0):
    """1 x 1 bundle with Sigma_00 = value."""
    return make_bundle(phi, np.array([[float(value)]]), jitter=0.0)


@pytest.fixture
def two_ward_toy():
    """P=3, L=2: ward 0 = {(0,0), (0,1)}, ward 1 = {(0,3)}."""
    return make_grid([(0, 0), (0, 1), (0, 3)], [0, 0, 1],
                     covariates=[[0.2], [0.8], [0.5]], population=[40, 25])


@pytest.fixture
def toy_20():
    """P=20 on a 4x5 raster, L=4 wards, one covariate."""
    r, c = np.divmod(np.arange(20), 5)
    ward_ids = (r // 2) * 2 + (c >= 3)
    cov = (r * 0.3 - c * 0.1)[:, None]
    return make_grid(np.column_stack([r, c]), ward_ids, covariates=cov,
                     population=[30, 18, 45, 22])


@pytest.fixture
def toy_files():
    """Bundled 20x20 toy grid: 4 wards, two covariates."""
    return FIXTURES / 'toy20_pixels.csv', FIXTURES / 'toy20_wards.csv'


@pytest.fixture(scope='module')
def wards_20():
    """20x20 raster in 20 wards of 4x5 pixels; counts drawn from the model at sigma2=1, phi=4."""
    rng = np.random.default_rng(2024)
    grid, wards = synthetic_grid(20, 20, 5, 4, n_covariates=1, rng=rng)
    bundle = exact_bundle(grid, wards, 4.0)
    counts = simulate_ward_counts(np.array([2.0, 0.3]), 1.0, bundle, wards, 1, rng)[0]
    return grid, with_counts(grid, wards, counts)
