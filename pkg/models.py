#!/usr/bin/env python3
"""
Shared models for the disaggregation toolkit.

Arrays held by the grid, ward and bundle types are made read-only on
construction so the structures can be shared across worker threads.
"""

from dataclasses import dataclass, field, asdict
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve


def _readonly(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Pixel coordinates, covariates (intercept first) and ward membership."""
    rows: np.ndarray
    cols: np.ndarray
    ward_ids: np.ndarray
    X: np.ndarray
    covariate_names: Tuple[str, ...] = ()
    pixel_side: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'rows', _readonly(self.rows, np.int64))
        object.__setattr__(self, 'cols', _readonly(self.cols, np.int64))
        object.__setattr__(self, 'ward_ids', _readonly(self.ward_ids, np.int64))
        object.__setattr__(self, 'X', _readonly(np.atleast_2d(self.X), np.float64))
        object.__setattr__(self, 'covariate_names', tuple(self.covariate_names))

    @property
    def n_pixels(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_covariates(self) -> int:
        """Number of covariates m, excluding the intercept."""
        return int(self.X.shape[1]) - 1

    @property
    def pixel_ids(self) -> np.ndarray:
        return np.arange(self.n_pixels, dtype=np.int64)

    @cached_property
    def coords(self) -> np.ndarray:
        """Pixel centres in distance units, shape (P, 2)."""
        xy = np.column_stack([self.rows, self.cols]).astype(np.float64) * self.pixel_side
        xy.setflags(write=False)
        return xy

    @property
    def shape(self) -> Tuple[int, int]:
        """Raster extent (rows, cols) covering every pixel."""
        return int(self.rows.max()) + 1, int(self.cols.max()) + 1

    def validate(self) -> list[str]:
        """Return list of validation errors."""
        errors = []
        P = self.n_pixels

        if P == 0:
            errors.append("Grid has no pixels")
            return errors

        if self.cols.shape[0] != P or self.ward_ids.shape[0] != P or self.X.shape[0] != P:
            errors.append("Pixel columns have inconsistent lengths")

        if self.X.shape[1] < 1 or not np.all(self.X[:, 0] == 1.0):
            errors.append("First covariate column must be the intercept (all ones)")

        if not np.all(np.isfinite(self.X)):
            errors.append("Covariates must be finite numbers")

        if len(self.covariate_names) != self.n_covariates:
            errors.append("Covariate names do not match the covariate matrix")

        if self.pixel_side <= 0:
            errors.append("Pixel side must be positive")

        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True, eq=False)
class WardTable:
    """Ward counts, sizes and averaged covariates; ward i is row i."""
    ward_ids: np.ndarray
    population: np.ndarray
    pixel_count: np.ndarray
    x_bar: np.ndarray
    pixel_ward_index: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'ward_ids', _readonly(self.ward_ids, np.int64))
        object.__setattr__(self, 'population', _readonly(self.population, np.int64))
        object.__setattr__(self, 'pixel_count', _readonly(self.pixel_count, np.int64))
        object.__setattr__(self, 'x_bar', _readonly(np.atleast_2d(self.x_bar), np.float64))
        object.__setattr__(self, 'pixel_ward_index', _readonly(self.pixel_ward_index, np.int64))

    @property
    def L(self) -> int:
        return int(self.ward_ids.shape[0])

    @cached_property
    def _member_order(self) -> Tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.pixel_ward_index, kind='stable')
        offsets = np.concatenate([[0], np.cumsum(np.bincount(self.pixel_ward_index, minlength=self.L))])
        order.setflags(write=False)
        return order, offsets

    def members(self, i: int) -> np.ndarray:
        """Pixel ids of ward i, ascending."""
        order, offsets = self._member_order
        return order[offsets[i]:offsets[i + 1]]

    def index_of(self, ward_id: int) -> int:
        hits = np.flatnonzero(self.ward_ids == ward_id)
        if hits.size == 0:
            raise KeyError(ward_id)
        return int(hits[0])

    def validate(self) -> list[str]:
        """Return list of validation errors."""
        errors = []
        L = self.L

        if L == 0:
            errors.append("Ward table is empty")
            return errors

        if len(np.unique(self.ward_ids)) != L:
            errors.append("Ward ids must be unique")

        if np.any(self.population < 0):
            errors.append("Population cannot be negative")

        if np.any(self.pixel_count <= 0):
            errors.append("Every ward needs at least one pixel")

        counts = np.bincount(self.pixel_ward_index, minlength=L)
        if counts.shape[0] != L or not np.array_equal(counts, self.pixel_count):
            errors.append("Pixel counts disagree with ward membership")

        if self.x_bar.shape[0] != L:
            errors.append("Averaged covariates must have one row per ward")

        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True)
class EmpiricalLogIntensity:
    """Ward log-intensity estimates and their Fisher information."""
    lambda_hat: np.ndarray
    precision: np.ndarray
    correction: float = 0.0


@dataclass(frozen=True)
class KernelParams:
    """Exponential kernel K(s, s') = sigma2 * exp(-d / phi)."""
    sigma2: float
    phi: float

    def validate(self) -> list[str]:
        errors = []
        if not self.sigma2 > 0:
            errors.append("sigma2 must be positive")
        if not self.phi > 0:
            errors.append("phi must be positive")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True)
class PhiGrid:
    """Support of the discrete prior on the range parameter."""
    values: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'values', tuple(float(v) for v in self.values))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, k: int) -> float:
        return self.values[k]

    @property
    def median_index(self) -> int:
        """Lower median, so the value is always a grid member."""
        return (len(self.values) - 1) // 2

    def index_of(self, phi: float) -> int:
        for k, v in enumerate(self.values):
            if np.isclose(v, phi, rtol=0, atol=1e-9):
                return k
        raise KeyError(phi)

    def validate(self) -> list[str]:
        errors = []
        arr = np.asarray(self.values, dtype=float)
        if arr.size == 0:
            errors.append("phi grid cannot be empty")
        elif np.any(arr <= 0):
            errors.append("phi grid values must be positive")
        elif np.any(np.diff(arr) <= 0):
            errors.append("phi grid must be strictly increasing")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True, eq=False)
class CovarianceBundle:
    """
    Per-phi correlation aggregates.

    sigma_p0 is anything indexable by an array of pixel ids returning the
    corresponding (n, L) rows: an ndarray, a np.memmap, or an on-the-fly
    provider. The Cholesky factor and log-determinant are of
    sigma00 + jitter * I.
    """
    phi: float
    sigma00: np.ndarray
    chol00: np.ndarray
    logdet00: float
    sigma_p0: Any = None
    jitter: float = 0.0

    @property
    def L(self) -> int:
        return int(self.sigma00.shape[0])

    @cached_property
    def sigma00_inv(self) -> np.ndarray:
        inv = cho_solve((self.chol00, True), np.eye(self.L))
        inv = 0.5 * (inv + inv.T)
        inv.setflags(write=False)
        return inv

    def validate(self) -> list[str]:
        errors = []
        S = self.sigma00
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            errors.append("sigma00 must be square")
            return errors
        if not np.array_equal(S, S.T):
            errors.append("sigma00 must be exactly symmetric")
        diag = np.diag(S)
        if np.any(diag <= 0) or np.any(diag > 1.0):
            errors.append("sigma00 diagonal must lie in (0, 1]")
        if self.sigma_p0 is not None and self.sigma_p0.shape[1] != S.shape[0]:
            errors.append("sigma_p0 must have one column per ward")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True)
class Hyperpriors:
    """Priors of the hierarchical model."""
    phi_grid: PhiGrid
    beta_sd: float = 100.0
    ig_shape: float = 0.01
    ig_rate: float = 0.01
    phi_log_prior: Optional[Tuple[float, ...]] = None  # uniform when None

    def validate(self) -> list[str]:
        errors = []
        for name in ('beta_sd', 'ig_shape', 'ig_rate'):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        if len(self.phi_grid) == 0:
            errors.append("phi grid cannot be empty")
        if self.phi_log_prior is not None and len(self.phi_log_prior) != len(self.phi_grid):
            errors.append("phi prior must have one weight per grid value")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(frozen=True)
class ChainConfig:
    """Chain length, thinning and seed."""
    seed: int
    burn_in: int = 500
    samples: int = 1500
    thin: int = 1

    def validate(self) -> list[str]:
        errors = []
        if self.burn_in < 0:
            errors.append("burn-in cannot be negative")
        if self.samples < 1:
            errors.append("samples must be at least 1")
        if self.thin < 1:
            errors.append("thin must be at least 1")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass
class ChainState:
    """Current values of a Gibbs sweep."""
    lambda_star: np.ndarray
    beta: np.ndarray
    sigma2: float
    phi_index: int


@dataclass(eq=False)
class PosteriorChain:
    """
    Stored draws. Regression-only models (laplace, bayesglm) have no
    latent variance: sigma2 is None and lambda_star holds X_tilde @ beta.
    """
    model: str
    lambda_star: np.ndarray
    beta: np.ndarray
    sigma2: Optional[np.ndarray]
    phi_index: np.ndarray
    phi_grid: Tuple[float, ...]
    burn_in: int = 0
    thin: int = 1
    seed: int = 0

    @property
    def B(self) -> int:
        return int(self.beta.shape[0])

    @property
    def L(self) -> int:
        return int(self.lambda_star.shape[1])

    @property
    def phi(self) -> np.ndarray:
        if len(self.phi_grid) == 0:
            return np.zeros(self.B)
        return np.asarray(self.phi_grid, dtype=float)[self.phi_index]

    @property
    def has_latent_field(self) -> bool:
        return self.sigma2 is not None

    def validate(self) -> list[str]:
        errors = []
        B = self.B
        if self.lambda_star.shape[0] != B or self.phi_index.shape[0] != B:
            errors.append("All draw arrays must have B rows")
        if self.sigma2 is not None:
            if self.sigma2.shape[0] != B:
                errors.append("All draw arrays must have B rows")
            if np.any(self.sigma2 <= 0):
                errors.append("sigma2 draws must be positive")
        if len(self.phi_grid) and (np.any(self.phi_index < 0) or np.any(self.phi_index >= len(self.phi_grid))):
            errors.append("phi draws must be members of the grid")
        return errors

    def is_valid(self) -> bool:
        return len(self.validate()) == 0


@dataclass(eq=False)
class PixelPosterior:
    """Per-pixel posterior mean and standard deviation of the log-intensity."""
    mean: np.ndarray
    sd: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> list[str]:
        errors = []
        if self.mean.shape != self.sd.shape:
            errors.append("mean and sd must have equal length")
        if np.any(self.sd < 0):
            errors.append("sd cannot be negative")
        return errors


@dataclass
class GlmFit:
    """Poisson regression fit in the usual coefficient-table layout."""
    coef: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    converged: bool
    iterations: int
    deviance: float = float('nan')
    names: Tuple[str, ...] = ()

    def validate(self) -> list[str]:
        errors = []
        if self.converged and np.any(self.se <= 0):
            errors.append("standard errors must be positive")
        if np.any((self.p < 0) | (self.p > 1)):
            errors.append("p-values must lie in [0, 1]")
        return errors


class BaselineKind(Enum):
    BAYES_GLM = 'bayesglm'
    LAPLACE = 'laplace'
    LAPLACE_WN = 'wn'


# CLI model names; 'gp' is the spatial model fitted by the sampler itself
MODEL_NAMES = ('gp', 'wn', 'laplace', 'bayesglm')


SETTING_AMPLITUDES = {'S1': 0.0, 'S2': 0.05, 'S3': 0.1}


@dataclass(frozen=True)
class SimSetting:
    """A data-generating setting: linear predictor plus a sinusoidal surface."""
    kind: str
    amplitude: float
    beta_true: Tuple[float, ...]
    seed: int = 0

    @classmethod
    def named(cls, kind: str, beta_true, seed: int = 0) -> 'SimSetting':
        kind = kind.upper()
        if kind not in SETTING_AMPLITUDES:
            raise KeyError(kind)
        return cls(kind, SETTING_AMPLITUDES[kind], tuple(beta_true), seed)

    def validate(self) -> list[str]:
        errors = []
        if self.kind in SETTING_AMPLITUDES:
            if self.amplitude != SETTING_AMPLITUDES[self.kind]:
                errors.append(f"{self.kind} requires amplitude {SETTING_AMPLITUDES[self.kind]}")
        elif self.kind != 'CUSTOM':
            errors.append(f"Unknown setting {self.kind}")
        if len(self.beta_true) == 0:
            errors.append("beta_true cannot be empty")
        return errors


@dataclass
class MetricReport:
    """Accuracy, uncertainty and information-criterion summary of one fit."""
    rmse: float
    mad: float
    pos_sd: float
    cover: float
    dic: float
    waic: float
    time_seconds: float = 0.0

    def validate(self) -> list[str]:
        errors = []
        if self.rmse < 0 or self.mad < 0:
            errors.append("rmse and mad cannot be negative")
        if not 0.0 <= self.cover <= 1.0:
            errors.append("cover must lie in [0, 1]")
        return errors

    def as_row(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class VariogramFit:
    """Exponential model nugget + sill * (1 - exp(-h / range))."""
    sill: float
    range: float
    nugget: float
    spatial_structure: bool = True
    cost: float = 0.0


@dataclass
class Variogram:
    """Binned empirical semivariance, optionally with a fitted model."""
    h: np.ndarray
    gamma: np.ndarray
    n_pairs: np.ndarray
    dropped_bins: int = 0
    fit: Optional[VariogramFit] = None

    def validate(self) -> list[str]:
        errors = []
        if np.any(self.n_pairs < 1):
            errors.append("every retained bin needs at least one pair")
        if self.fit is not None:
            if self.fit.spatial_structure and (self.fit.sill <= 0 or self.fit.range <= 0):
                errors.append("fitted sill and range must be positive")
            if self.fit.nugget < 0:
                errors.append("fitted nugget cannot be negative")
        return errors


@dataclass
class WardCheck:
    """Pixel estimates re-aggregated to a ward, against the ward chain mean."""
    ward_id: int
    pixel_log_mean: float
    chain_mean: float

    @property
    def difference(self) -> float:
        return self.pixel_log_mean - self.chain_mean


@dataclass
class RunManifest:
    """Provenance record written next to every output artifact."""
    command_line: List[str]
    config_digest: str
    input_checksums: Dict[str, str]
    seed: Optional[int]
    started_at: str
    finished_at: str = ""
    tool_version: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
