"""
Tests for pixel/ward ingest and the empirical ward log-intensity.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from grid_io import load_grid, write_grid, empirical_log_intensity, ward_centroids, standardize
from validators import ValidationError


def write_csvs(tmp_path, pixels: str, wards: str):
    pixel_file = tmp_path / 'pixels.csv'
    ward_file = tmp_path / 'wards.csv'
    pixel_file.write_text(pixels)
    ward_file.write_text(wards)
    return pixel_file, ward_file


PIXELS = (
    "pixel_id,row,col,ward_id,cov_1,cov_2\n"
    "0,0,0,3,1,0\n"
    "1,0,1,3,3,0\n"
    "2,1,0,5,2,4\n"
)
WARDS = "ward_id,population\n5,12\n3,20\n"


def test_load_grid_basic(tmp_path):
    """Intercept prepended, wards sorted by id, x_bar is the member mean."""
    grid, wards = load_grid(*write_csvs(tmp_path, PIXELS, WARDS))

    assert grid.n_pixels == 3
    assert grid.covariate_names == ('cov_1', 'cov_2')
    assert np.all(grid.X[:, 0] == 1.0), "first column must be the intercept"
    assert list(wards.ward_ids) == [3, 5]
    assert list(wards.population) == [20, 12]
    assert list(wards.pixel_count) == [2, 1]
    # ward 3 has members with cov_1 = {1, 3}
    assert wards.x_bar[0, 1] == 2.0, f"x_bar should be 2, got {wards.x_bar[0, 1]}"


def test_x_bar_times_size_equals_member_sum(tmp_path):
    grid, wards = load_grid(*write_csvs(tmp_path, PIXELS, WARDS))
    for i in range(wards.L):
        members = wards.members(i)
        total = grid.X[members].sum(axis=0)
        assert np.allclose(wards.pixel_count[i] * wards.x_bar[i], total, rtol=1e-10, atol=0)


def test_log1p_transform(tmp_path):
    grid, _ = load_grid(*write_csvs(tmp_path, PIXELS, WARDS), log1p=['cov_2'])
    assert grid.X[0, 2] == 0.0, "log(1 + 0) must be 0"
    assert grid.X[2, 2] == pytest.approx(math.log(5.0))
    assert grid.X[1, 1] == 3.0, "untransformed covariate must be unchanged"


def test_log1p_unknown_name(tmp_path):
    with pytest.raises(ValidationError, match="unknown covariate"):
        load_grid(*write_csvs(tmp_path, PIXELS, WARDS), log1p=['cov_9'])


def test_empty_ward(tmp_path):
    """A ward listed in the ward file with no pixels is rejected."""
    wards = WARDS + "7,4\n"
    with pytest.raises(ValidationError, match="empty ward 7"):
        load_grid(*write_csvs(tmp_path, PIXELS, wards))


def test_ward_missing_from_ward_file(tmp_path):
    with pytest.raises(ValidationError, match="absent from the ward file"):
        load_grid(*write_csvs(tmp_path, PIXELS, "ward_id,population\n3,20\n"))


def test_duplicate_pixel_id(tmp_path):
    pixels = PIXELS + "2,1,1,5,0,0\n"
    with pytest.raises(ValidationError, match="duplicate pixel_id 2"):
        load_grid(*write_csvs(tmp_path, pixels, WARDS))


def test_non_numeric_covariate(tmp_path):
    pixels = PIXELS.replace("2,1,0,5,2,4", "2,1,0,5,abc,4")
    with pytest.raises(ValidationError, match="non-numeric"):
        load_grid(*write_csvs(tmp_path, pixels, WARDS))


def test_negative_population(tmp_path):
    with pytest.raises(ValidationError, match="negative population"):
        load_grid(*write_csvs(tmp_path, PIXELS, "ward_id,population\n3,20\n5,-1\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="missing file"):
        load_grid(tmp_path / 'nope.csv', tmp_path / 'nope2.csv')


def test_write_then_reload_is_identical(tmp_path):
    grid, wards = load_grid(*write_csvs(tmp_path, PIXELS, WARDS), log1p=['cov_1'])

    out_pixels, out_wards = tmp_path / 'out' / 'p.csv', tmp_path / 'out' / 'w.csv'
    write_grid(grid, wards, out_pixels, out_wards)
    grid2, wards2 = load_grid(out_pixels, out_wards)

    assert np.array_equal(grid.X, grid2.X)
    assert np.array_equal(grid.rows, grid2.rows)
    assert np.array_equal(grid.ward_ids, grid2.ward_ids)
    assert np.array_equal(wards.population, wards2.population)
    assert np.array_equal(wards.x_bar, wards2.x_bar)


def test_toy_fixture_loads(toy_files):
    grid, wards = load_grid(*toy_files)
    assert grid.n_pixels == 400
    assert wards.L == 4
    assert list(wards.pixel_count) == [100, 100, 100, 100]
    centroids = ward_centroids(grid, wards)
    assert np.allclose(centroids[0], [4.5, 4.5])


def test_standardize_keeps_intercept():
    X = np.column_stack([np.ones(4), [1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]])
    Z = standardize(X)
    assert np.all(Z[:, 0] == 1.0)
    assert abs(Z[:, 1].mean()) < 1e-12
    assert Z[:, 1].std() == pytest.approx(1.0)
    assert np.all(Z[:, 2] == 0.0), "constant column is centred only"


def _wards_with(population, pixel_count):
    from models import WardTable
    index = np.repeat(np.arange(len(pixel_count)), pixel_count)
    return WardTable(
        ward_ids=np.arange(len(pixel_count)),
        population=population,
        pixel_count=pixel_count,
        x_bar=np.ones((len(pixel_count), 1)),
        pixel_ward_index=index,
    )


def test_empirical_log_intensity_examples():
    eli = empirical_log_intensity(_wards_with([100], [100]))
    assert eli.lambda_hat[0] == 0.0
    assert eli.precision[0] == 100.0

    eli = empirical_log_intensity(_wards_with([0], [10]), correction=0.5)
    assert eli.lambda_hat[0] == pytest.approx(math.log(0.05))
    assert eli.lambda_hat[0] == pytest.approx(-2.9957, abs=1e-4)


def test_empirical_log_intensity_recovers_counts():
    wards = _wards_with([7, 130, 1], [3, 50, 8])
    eli = empirical_log_intensity(wards, correction=0.25)
    recovered = np.exp(eli.lambda_hat) * wards.pixel_count
    assert np.allclose(recovered, wards.population + 0.25, rtol=1e-12)


def test_zero_count_needs_correction():
    with pytest.raises(ValidationError, match="zero count ward 1"):
        empirical_log_intensity(_wards_with([5, 0], [2, 2]))
