"""
Tests for the exponential kernel, ward-aggregated correlations and the
covariance cache.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from conftest import make_grid
from cov_cache import CovarianceCache, read_matrix, write_matrix, CacheFormatError, HEADER_SIZE
from kernels import exp_corr, build_sigma00, build_sigma_p0, make_bundle, prepare_bundles
from validators import NumericalError


def test_exp_corr_identities():
    assert exp_corr(0.0, 7.0) == 1.0
    assert exp_corr(2.5, 2.5) == pytest.approx(math.exp(-1))
    assert exp_corr(10.0, 10.0) == pytest.approx(0.367879, abs=1e-6)


def test_sigma00_single_pixel_wards():
    grid, wards = make_grid([(0, 0), (0, 3)], [0, 1])
    S = build_sigma00(grid, wards, phi=2.0, threads=1)
    assert S[0, 0] == 1.0 and S[1, 1] == 1.0
    assert S[0, 1] == pytest.approx(math.exp(-3 / 2.0), rel=1e-14)


def test_sigma00_double_sum():
    """Ward A = {(0,0),(0,1)}, ward B = {(1,0)}, phi = 1."""
    grid, wards = make_grid([(0, 0), (0, 1), (1, 0)], [0, 0, 1])
    S = build_sigma00(grid, wards, phi=1.0, threads=2)
    expected = (math.exp(-1) + math.exp(-math.sqrt(2))) / 2
    assert S[0, 1] == pytest.approx(expected, rel=1e-14)
    assert S[0, 0] == pytest.approx((2 + 2 * math.exp(-1)) / 4, rel=1e-14)
    assert np.array_equal(S, S.T), "Sigma_00 must be exactly symmetric"


def test_sigma00_pixel_side_scales_distance():
    grid, wards = make_grid([(0, 0), (0, 1)], [0, 1], pixel_side=2.0)
    S = build_sigma00(grid, wards, phi=2.0, threads=1)
    assert S[0, 1] == pytest.approx(math.exp(-1))


def test_sigma00_independent_of_chunking(toy_20):
    grid, wards = toy_20
    a = build_sigma00(grid, wards, 3.0, threads=1, chunk=7)
    b = build_sigma00(grid, wards, 3.0, threads=4, chunk=10_000)
    assert np.allclose(a, b, rtol=1e-14, atol=0)


def test_sigma_p0_examples():
    # ward 0 = {(0,0)}, ward 1 = {(0,2), (2,0)}, ward 2 = {(3,3)}
    grid, wards = make_grid([(0, 0), (0, 2), (2, 0), (3, 3)], [0, 1, 1, 2])
    S = build_sigma_p0(grid, wards, phi=1.5, threads=1)
    assert S.shape == (4, 3)
    # pixel 0 is the sole member of ward 0
    assert S[0, 0] == 1.0
    # pixel 3 at distance sqrt(18) from the one-pixel ward 0
    assert S[3, 0] == pytest.approx(math.exp(-math.sqrt(18) / 1.5))
    # pixel 0 is equidistant (2) from both pixels of ward 1
    assert S[0, 1] == pytest.approx(math.exp(-2 / 1.5))


def test_sigma_p0_rows_average_to_sigma00(toy_20):
    """Averaging Sigma_p0 rows over a ward reproduces the Sigma_00 row."""
    grid, wards = toy_20
    S00 = build_sigma00(grid, wards, 2.0, threads=1)
    Sp0 = build_sigma_p0(grid, wards, 2.0, threads=3, chunk=5)
    for i in range(wards.L):
        assert np.allclose(Sp0[wards.members(i)].mean(axis=0), S00[i], rtol=1e-12)


def test_sigma00_grows_with_phi(toy_20):
    grid, wards = toy_20
    stack = np.array([build_sigma00(grid, wards, phi, threads=1) for phi in (1.0, 2.0, 4.0, 8.0)])
    off = ~np.eye(wards.L, dtype=bool)
    assert np.all(np.diff(stack[:, off], axis=0) > 0), "off-diagonal entries must shrink as phi shrinks"


@pytest.mark.parametrize('phi', [1.5, 4.0])
def test_sigma_p0_own_ward_dominates(toy_20, phi):
    """toy_20 wards are separated rectangles, so a pixel correlates most with its own ward."""
    grid, wards = toy_20
    S = build_sigma_p0(grid, wards, phi, threads=1)
    own = S[np.arange(grid.n_pixels), wards.pixel_ward_index]
    assert np.all(own >= S.max(axis=1))


def test_make_bundle_logdet_and_failure():
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    bundle = make_bundle(3.0, S, jitter=0.0)
    assert bundle.logdet00 == pytest.approx(math.log(0.75))
    assert np.allclose(bundle.sigma00_inv @ S, np.eye(2))

    with pytest.raises(NumericalError, match="phi=4"):
        make_bundle(4.0, np.array([[1.0, 2.0], [2.0, 1.0]]), jitter=0.0)


def test_gp_draws_match_sigma00():
    """Empirical covariance of ward means of unit-variance GP draws matches Sigma_00."""
    r, c = np.divmod(np.arange(100), 10)
    ward_ids = (r >= 5) * 2 + (c >= 5)
    grid, wards = make_grid(np.column_stack([r, c]), ward_ids)
    phi = 3.0
    S00 = build_sigma00(grid, wards, phi, threads=2)

    d = np.hypot(r[:, None] - r[None, :], c[:, None] - c[None, :])
    chol = np.linalg.cholesky(exp_corr(d, phi) + 1e-10 * np.eye(100))
    rng = np.random.default_rng(20240611)
    n = 50_000
    W = np.zeros((100, wards.L))
    W[np.arange(100), wards.pixel_ward_index] = 1.0 / wards.pixel_count[wards.pixel_ward_index]
    means = (rng.standard_normal((n, 100)) @ chol.T) @ W

    emp = means.T @ means / n
    se = np.sqrt((np.outer(np.diag(S00), np.diag(S00)) + S00 ** 2) / n)
    # 10 distinct entries: 4 standard errors keeps the family-wise error small
    assert np.all(np.abs(emp - S00) < 4 * se), f"max z = {np.max(np.abs(emp - S00) / se):.2f}"


def test_prepare_bundles_in_memory(toy_20):
    grid, wards = toy_20
    bundles = prepare_bundles(grid, wards, [4.0, 2.0], threads=1)
    assert [b.phi for b in bundles] == [2.0, 4.0], "bundles must be sorted by phi"
    assert np.allclose(bundles[0].sigma00, build_sigma00(grid, wards, 2.0, threads=1), rtol=1e-14)
    assert bundles[0].sigma_p0.shape == (20, 4)


def test_warm_cache_is_bit_identical(tmp_path, toy_20):
    grid, wards = toy_20
    cold = prepare_bundles(grid, wards, [2.5], cache_dir=tmp_path, threads=1)

    cache = CovarianceCache(tmp_path, grid, wards, cold[0].jitter)
    warm = prepare_bundles(grid, wards, [2.5], cache=cache, threads=1)

    assert cache.hits == 1 and cache.misses == 0, "second run must not recompute"
    assert np.array_equal(cold[0].sigma00, warm[0].sigma00)
    assert np.array_equal(cold[0].chol00, warm[0].chol00)
    assert np.array_equal(np.asarray(cold[0].sigma_p0), np.asarray(warm[0].sigma_p0))
    assert cold[0].logdet00 == warm[0].logdet00


def test_corrupted_cache_is_recomputed(tmp_path, toy_20):
    grid, wards = toy_20
    cold = prepare_bundles(grid, wards, [2.5], cache_dir=tmp_path, threads=1)
    reference = np.array(cold[0].sigma_p0)
    del cold

    path = tmp_path / 'sigmap0_phi2.5.bin'
    raw = bytearray(path.read_bytes())
    raw[HEADER_SIZE + 5] ^= 0xFF
    path.write_bytes(bytes(raw))

    cache = CovarianceCache(tmp_path, grid, wards, 1e-8)
    again = prepare_bundles(grid, wards, [2.5], cache=cache, threads=1)
    assert cache.misses == 1, "checksum failure must count as a miss"
    assert np.array_equal(np.asarray(again[0].sigma_p0), reference)


def test_cache_discarded_for_different_grid(tmp_path, toy_20, two_ward_toy):
    grid, wards = toy_20
    prepare_bundles(grid, wards, [2.5], cache_dir=tmp_path, threads=1)
    assert (tmp_path / 'sigma00_phi2.5.bin').exists()

    other_grid, other_wards = two_ward_toy
    CovarianceCache(tmp_path, other_grid, other_wards, 1e-8)
    assert not (tmp_path / 'sigma00_phi2.5.bin').exists(), "stale files must be removed"


def test_failed_fill_leaves_no_partial_file(tmp_path, toy_20, monkeypatch):
    grid, wards = toy_20

    def broken(grid, wards, phi, out=None, threads=None, **kwargs):
        out[:3] = 1.0
        raise RuntimeError("worker died")

    monkeypatch.setattr('kernels.build_sigma_p0', broken)
    with pytest.raises(RuntimeError, match="worker died"):
        prepare_bundles(grid, wards, [2.5], cache_dir=tmp_path, threads=1)
    assert not list(tmp_path.glob('*.tmp'))
    assert not (tmp_path / 'sigmap0_phi2.5.bin').exists()

    monkeypatch.undo()
    cache = CovarianceCache(tmp_path, grid, wards, 1e-8)
    bundles = prepare_bundles(grid, wards, [2.5], cache=cache, threads=1)
    assert cache.misses == 1
    assert np.allclose(bundles[0].sigma_p0, build_sigma_p0(grid, wards, 2.5, threads=1), rtol=1e-14)


def test_failed_store_leaves_no_partial_file(tmp_path, toy_20, monkeypatch):
    grid, wards = toy_20

    def full_disk(self, bundle):
        raise OSError("No space left on device")

    monkeypatch.setattr(CovarianceCache, 'store', full_disk)
    with pytest.raises(OSError):
        prepare_bundles(grid, wards, [2.5], cache_dir=tmp_path, threads=1)
    assert not list(tmp_path.glob('*.tmp'))


def test_matrix_file_checks(tmp_path):
    path = tmp_path / 'm.bin'
    write_matrix(path, np.arange(6.0).reshape(2, 3), phi=1.25)
    assert np.array_equal(read_matrix(path, 1.25), np.arange(6.0).reshape(2, 3))

    with pytest.raises(CacheFormatError, match="phi"):
        read_matrix(path, 2.0)

    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CacheFormatError, match="size"):
        read_matrix(path)
