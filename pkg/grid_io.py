#!/usr/bin/env python3
"""
Pixel and ward CSV ingest for the disaggregation toolkit.

Pixel file: pixel_id,row,col,ward_id,cov_1,...,cov_m
Ward file:  ward_id,population
"""

import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from models import PixelGrid, WardTable, EmpiricalLogIntensity
from validators import ValidationError, validate_file

logger = logging.getLogger(__name__)

PIXEL_KEY_COLUMNS = ['pixel_id', 'row', 'col', 'ward_id']
WARD_COLUMNS = ['ward_id', 'population']

# Enough digits that a written grid reloads bit-for-bit
_ROUND_TRIP_FORMAT = '%.17g'


def _read_csv(path, required) -> pd.DataFrame:
    ok, msg = validate_file(path)
    if not ok:
        raise ValidationError(msg)

    try:
        df = pd.read_csv(path, encoding='utf-8')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ValidationError(f"cannot parse {path}: {e}")

    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


def _numeric(df: pd.DataFrame, columns, path, integer: bool = False) -> np.ndarray:
    out = []
    for name in columns:
        values = pd.to_numeric(df[name], errors='coerce')
        if values.isna().any():
            bad = int(values.isna().idxmax())
            raise ValidationError(f"{path}: non-numeric value in column '{name}' (row {bad + 2})")
        arr = values.to_numpy(dtype=np.float64)
        if integer:
            if not np.all(arr == np.round(arr)):
                raise ValidationError(f"{path}: column '{name}' must hold integers")
            arr = arr.astype(np.int64)
        out.append(arr)
    return np.column_stack(out) if len(out) > 1 else out[0]


def standardize(X: np.ndarray) -> np.ndarray:
    """z-score every non-intercept column; constant columns are only centred."""
    Z = np.array(X, dtype=np.float64, copy=True)
    if Z.shape[1] <= 1:
        return Z
    cov = Z[:, 1:]
    mean = cov.mean(axis=0)
    sd = cov.std(axis=0)
    sd[sd == 0] = 1.0
    Z[:, 1:] = (cov - mean) / sd
    return Z


def build_ward_table(grid: PixelGrid, ward_ids: np.ndarray, population: np.ndarray) -> WardTable:
    """Aggregate pixels into wards; wards are ordered by ward id."""
    ward_ids = np.asarray(ward_ids, dtype=np.int64)
    population = np.asarray(population, dtype=np.int64)

    order = np.argsort(ward_ids, kind='stable')
    ward_ids = ward_ids[order]
    population = population[order]

    if len(np.unique(ward_ids)) != len(ward_ids):
        dup = ward_ids[np.flatnonzero(np.diff(ward_ids) == 0)[0]]
        raise ValidationError(f"duplicate ward_id {dup}")

    if np.any(population < 0):
        bad = ward_ids[np.flatnonzero(population < 0)[0]]
        raise ValidationError(f"negative population for ward {bad}")

    index = np.searchsorted(ward_ids, grid.ward_ids)
    index = np.clip(index, 0, len(ward_ids) - 1)
    unknown = ward_ids[index] != grid.ward_ids
    if np.any(unknown):
        bad = grid.ward_ids[np.flatnonzero(unknown)[0]]
        raise ValidationError(f"ward {bad} referenced by a pixel but absent from the ward file")

    counts = np.bincount(index, minlength=len(ward_ids))
    if np.any(counts == 0):
        bad = ward_ids[np.flatnonzero(counts == 0)[0]]
        raise ValidationError(f"empty ward {bad}: no pixels carry this ward_id")

    sums = np.zeros((len(ward_ids), grid.X.shape[1]))
    np.add.at(sums, index, grid.X)
    x_bar = sums / counts[:, None]

    wards = WardTable(
        ward_ids=ward_ids,
        population=population,
        pixel_count=counts,
        x_bar=x_bar,
        pixel_ward_index=index,
    )
    errors = wards.validate()
    if errors:
        raise ValidationError("; ".join(errors))
    return wards


def load_grid(
    pixel_file,
    ward_file,
    log1p: Iterable[str] = (),
    standardize_covariates: bool = False,
    pixel_side: float = 1.0,
) -> Tuple[PixelGrid, WardTable]:
    """
    Load and validate a pixel grid and its ward table.

    Covariates named in log1p are replaced by log(1 + x); an intercept
    column is prepended. With standardize_covariates the non-intercept
    columns are z-scored after the transform.
    """
    pixels = _read_csv(pixel_file, PIXEL_KEY_COLUMNS)
    ward_df = _read_csv(ward_file, WARD_COLUMNS)

    cov_names = [c for c in pixels.columns if c not in PIXEL_KEY_COLUMNS]
    log1p = list(log1p)
    unknown = [name for name in log1p if name not in cov_names]
    if unknown:
        raise ValidationError(f"--log1p names unknown covariate(s): {', '.join(unknown)}")

    keys = _numeric(pixels, PIXEL_KEY_COLUMNS, pixel_file, integer=True)
    pixel_ids, rows, cols, ward_of = keys.T

    if len(np.unique(pixel_ids)) != len(pixel_ids):
        ids, counts = np.unique(pixel_ids, return_counts=True)
        raise ValidationError(f"duplicate pixel_id {ids[counts > 1][0]}")

    order = np.argsort(pixel_ids, kind='stable')
    if not np.array_equal(pixel_ids[order], np.arange(len(pixel_ids))):
        raise ValidationError("pixel_id values must be contiguous 0..P-1")

    if cov_names:
        cov = np.atleast_2d(_numeric(pixels, cov_names, pixel_file))
        cov = cov.reshape(len(pixel_ids), len(cov_names))
    else:
        cov = np.empty((len(pixel_ids), 0))

    for name in log1p:
        k = cov_names.index(name)
        if np.any(cov[:, k] <= -1):
            raise ValidationError(f"log1p undefined for covariate '{name}' values <= -1")
        cov[:, k] = np.log1p(cov[:, k])

    X = np.column_stack([np.ones(len(pixel_ids)), cov])[order]
    if standardize_covariates:
        X = standardize(X)

    grid = PixelGrid(
        rows=rows[order],
        cols=cols[order],
        ward_ids=ward_of[order],
        X=X,
        covariate_names=tuple(cov_names),
        pixel_side=pixel_side,
    )
    errors = grid.validate()
    if errors:
        raise ValidationError("; ".join(errors))

    ward_keys = _numeric(ward_df, WARD_COLUMNS, ward_file, integer=True)
    wards = build_ward_table(grid, ward_keys[:, 0], ward_keys[:, 1])

    logger.info("Loaded %d pixels in %d wards with %d covariate(s)",
                grid.n_pixels, wards.L, grid.n_covariates)
    return grid, wards


def write_grid(grid: PixelGrid, wards: WardTable, pixel_file, ward_file) -> None:
    """Write the canonical CSV pair; covariates are written as stored."""
    pixels = pd.DataFrame({
        'pixel_id': grid.pixel_ids,
        'row': grid.rows,
        'col': grid.cols,
        'ward_id': grid.ward_ids,
    })
    for k, name in enumerate(grid.covariate_names):
        pixels[name] = grid.X[:, k + 1]

    ward_df = pd.DataFrame({'ward_id': wards.ward_ids, 'population': wards.population})

    for path in (pixel_file, ward_file):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    pixels.to_csv(pixel_file, index=False, float_format=_ROUND_TRIP_FORMAT)
    ward_df.to_csv(ward_file, index=False)


def empirical_log_intensity(wards: WardTable, correction: Optional[float] = None) -> EmpiricalLogIntensity:
    """lambda_hat_i = log((Y_i + c) / |A_i|) with Fisher information Y_i + c."""
    c = 0.0 if correction is None else float(correction)
    if c < 0:
        raise ValidationError("continuity correction cannot be negative")

    y = wards.population.astype(np.float64) + c
    if np.any(y <= 0):
        bad = wards.ward_ids[np.flatnonzero(y <= 0)[0]]
        raise ValidationError(f"zero count ward {bad}; pass a continuity correction")

    lambda_hat = np.log(y / wards.pixel_count)
    return EmpiricalLogIntensity(lambda_hat=lambda_hat, precision=y, correction=c)


def ward_centroids(grid: PixelGrid, wards: WardTable) -> np.ndarray:
    """Mean pixel coordinate of each ward, shape (L, 2)."""
    sums = np.zeros((wards.L, 2))
    np.add.at(sums, wards.pixel_ward_index, grid.coords)
    return sums / wards.pixel_count[:, None]


def ols_residuals(wards: WardTable, lambda_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares regression of lambda_hat on X_tilde: (coefficients, residuals)."""
    coef, *_ = np.linalg.lstsq(wards.x_bar, lambda_hat, rcond=None)
    return coef, lambda_hat - wards.x_bar @ coef


def read_residuals(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a ward residual file (ward_id,x,y,residual): (residuals, centroids)."""
    df = _read_csv(path, ['x', 'y', 'residual'])
    values = _numeric(df, ['x', 'y', 'residual'], path)
    values = np.atleast_2d(values)
    return values[:, 2], values[:, :2]


def write_residuals(path, ward_ids, centroids, residuals) -> None:
    df = pd.DataFrame({
        'ward_id': ward_ids,
        'x': centroids[:, 0],
        'y': centroids[:, 1],
        'residual': residuals,
    })
    df.to_csv(path, index=False, float_format='%.9g')
