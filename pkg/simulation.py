#!/usr/bin/env python3
"""
Synthetic data, comparison metrics, variograms and the simulation study.
"""

import logging
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError
from scipy.optimize import least_squares
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import poisson
from tqdm import tqdm

from baselines import fit_baseline, wn_bundle
from config import (
    config, CSV_FLOAT_FORMAT, DEFAULT_BETA_TRUE, DEFAULT_N_COVARIATES, DEFAULT_SIM_PHI,
)
from grid_io import build_ward_table
from kernels import prepare_bundles
from models import (
    BaselineKind, ChainConfig, CovarianceBundle, Hyperpriors, MetricReport, PhiGrid,
    PixelGrid, PixelPosterior, PosteriorChain, SETTING_AMPLITUDES, SimSetting,
    Variogram, VariogramFit, WardTable, MODEL_NAMES,
)
from predict import pixel_posterior
from sampler import run_chain
from validators import NumericalError, ValidationError, parse_ward_shape

logger = logging.getLogger(__name__)

# log of the largest Poisson mean numpy will sample from comfortably
_MAX_LOG_MEAN = np.log(1e15)

METRIC_COLUMNS = ['rmse', 'mad', 'pos_sd', 'cover', 'dic', 'waic']


def ward_tiling(rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int,
                ward_rows: int, ward_cols: int) -> np.ndarray:
    """Rectangular tiling into ward_rows x ward_cols near-equal blocks; ids are row-major."""
    if ward_rows > n_rows or ward_cols > n_cols:
        raise ValidationError(f"cannot tile a {n_rows}x{n_cols} grid into {ward_rows}x{ward_cols} wards")
    return (rows * ward_rows // n_rows) * ward_cols + cols * ward_cols // n_cols


def smooth_covariates(rows: np.ndarray, cols: np.ndarray, n_covariates: int, rng: np.random.Generator,
                      n_waves: int = 6, noise_sd: float = 0.02) -> np.ndarray:
    """Low-frequency random Fourier surfaces scaled to [0, 1] plus a little pixel noise."""
    extent = max(rows.max(), cols.max()) + 1
    out = np.empty((len(rows), n_covariates))
    for k in range(n_covariates):
        freq = rng.uniform(-2.0, 2.0, size=(n_waves, 2)) * 2 * np.pi / extent
        phase = rng.uniform(0, 2 * np.pi, size=n_waves)
        amp = rng.uniform(0.5, 1.0, size=n_waves)
        field = np.cos(np.outer(rows, freq[:, 0]) + np.outer(cols, freq[:, 1]) + phase) @ amp
        field = (field - field.min()) / (np.ptp(field) or 1.0)
        out[:, k] = field + rng.normal(0.0, noise_sd, size=len(rows))
    return out


def synthetic_grid(rows: int, cols: int, ward_rows: int, ward_cols: int,
                   n_covariates: int = DEFAULT_N_COVARIATES,
                   rng: Optional[np.random.Generator] = None,
                   pixel_side: float = 1.0) -> Tuple[PixelGrid, WardTable]:
    """Rectangular grid with smooth synthetic covariates; ward populations are zero."""
    rng = rng if rng is not None else np.random.default_rng(0)
    r, c = np.divmod(np.arange(rows * cols), cols)
    ward_ids = ward_tiling(r, c, rows, cols, ward_rows, ward_cols)
    cov = smooth_covariates(r, c, n_covariates, rng)

    grid = PixelGrid(
        rows=r,
        cols=c,
        ward_ids=ward_ids,
        X=np.column_stack([np.ones(len(r)), cov]),
        covariate_names=tuple(f"cov_{k + 1}" for k in range(n_covariates)),
        pixel_side=pixel_side,
    )
    ids = np.arange(ward_rows * ward_cols)
    return grid, build_ward_table(grid, ids, np.zeros(len(ids), dtype=np.int64))


def with_counts(grid: PixelGrid, wards: WardTable, counts: np.ndarray) -> WardTable:
    return build_ward_table(grid, wards.ward_ids, counts)


def surface_term(grid: PixelGrid, amplitude: float) -> np.ndarray:
    """a sin(2 pi s1) + a cos(2 pi s2) with s1, s2 the row and column scaled by their maxima."""
    s1 = grid.rows / max(int(grid.rows.max()), 1)
    s2 = grid.cols / max(int(grid.cols.max()), 1)
    return amplitude * np.sin(2 * np.pi * s1) + amplitude * np.cos(2 * np.pi * s2)


def simulate(setting: SimSetting, grid: PixelGrid, wards: WardTable,
             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """True pixel log-intensity and Poisson ward counts for one setting."""
    beta = np.asarray(setting.beta_true, dtype=np.float64)
    if len(beta) != grid.X.shape[1]:
        raise ValidationError(f"beta_true has {len(beta)} entries, grid needs {grid.X.shape[1]}")

    truth = grid.X @ beta + surface_term(grid, setting.amplitude)
    if np.max(truth) + np.log(wards.pixel_count.max()) > _MAX_LOG_MEAN:
        raise NumericalError("simulated intensity overflows; reduce beta_true")

    means = np.bincount(wards.pixel_ward_index, weights=np.exp(truth), minlength=wards.L)
    return truth, rng.poisson(means)


def marginal_moments(beta: np.ndarray, sigma2: float, bundle: CovarianceBundle,
                     wards: WardTable) -> Tuple[np.ndarray, np.ndarray]:
    """
    E(Y_i) and Var(Y_i) after integrating out lambda*_i ~ N(X_tilde_i beta, sigma2 Sigma_00,ii).
    With psi_i = sigma2 Sigma_00,ii / 2 the intensity is lognormal, so
    Var(Y_i) = E(Y_i) + |A_i|^2 exp(2 mu_i + 2 psi_i)(exp(2 psi_i) - 1).
    """
    mu = wards.x_bar @ beta
    psi = 0.5 * sigma2 * np.diag(bundle.sigma00)
    size = wards.pixel_count.astype(np.float64)
    mean = size * np.exp(mu + psi)
    var = mean + size ** 2 * np.exp(2 * mu + 2 * psi) * np.expm1(2 * psi)
    return mean, var


def simulate_ward_counts(beta: np.ndarray, sigma2: float, bundle: CovarianceBundle, wards: WardTable,
                         n_replicates: int, rng: np.random.Generator) -> np.ndarray:
    """Counts drawn from the hierarchical model, shape (n_replicates, L)."""
    mu = wards.x_bar @ beta
    z = rng.standard_normal((n_replicates, wards.L))
    lam = mu + np.sqrt(sigma2) * z @ np.asarray(bundle.chol00).T
    log_mean = lam + np.log(wards.pixel_count)
    if np.max(log_mean) > _MAX_LOG_MEAN:
        raise NumericalError("simulated ward intensity overflows")
    return rng.poisson(np.exp(log_mean))


def ward_log_likelihood(chain: PosteriorChain, wards: WardTable) -> np.ndarray:
    """B x L Poisson log-likelihood of the ward counts under every draw."""
    rate = wards.pixel_count * np.exp(chain.lambda_star)
    return poisson.logpmf(wards.population[None, :], rate)


def information_criteria(chain: PosteriorChain, wards: WardTable) -> Tuple[float, float]:
    """(DIC, WAIC) from the ward-level Poisson likelihood."""
    if chain.B < 2:
        raise ValidationError("WAIC needs at least 2 draws")
    ll = ward_log_likelihood(chain, wards)
    deviance = -2.0 * ll.sum(axis=1)

    theta_bar = chain.lambda_star.mean(axis=0)
    d_bar = -2.0 * float(np.sum(poisson.logpmf(wards.population, wards.pixel_count * np.exp(theta_bar))))
    p_d = float(np.mean(deviance)) - d_bar
    dic = d_bar + 2.0 * p_d

    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(chain.B)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    waic = -2.0 * (lppd - p_waic)
    return dic, waic


def metrics(estimated: PixelPosterior, truth: np.ndarray, chain: PosteriorChain, wards: WardTable,
            time_seconds: float = 0.0) -> MetricReport:
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != estimated.mean.shape:
        raise ValidationError(f"truth has {truth.shape[0]} pixels, posterior has {estimated.mean.shape[0]}")

    err = estimated.mean - truth
    P = len(truth)
    dic, waic = information_criteria(chain, wards)
    return MetricReport(
        rmse=float(np.linalg.norm(err) / np.sqrt(P)),
        mad=float(np.sum(np.abs(err)) / P),
        pos_sd=float(np.mean(estimated.sd)),
        cover=float(np.mean(np.abs(err) <= 1.96 * estimated.sd)),
        dic=dic,
        waic=waic,
        time_seconds=time_seconds,
    )


def empirical_variogram(residuals: np.ndarray, centroids: np.ndarray, n_bins: int = 15,
                        max_dist: Optional[float] = None) -> Variogram:
    """Semivariance of ward residuals binned by centroid distance."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if len(residuals) < 2:
        raise ValidationError("variogram needs at least 2 wards")
    if n_bins < 1:
        raise ValidationError("variogram needs at least 1 bin")

    d = pdist(np.asarray(centroids, dtype=np.float64), metric='euclidean')
    g = 0.5 * pdist(residuals[:, None], metric='sqeuclidean')

    max_dist = float(d.max()) if max_dist is None else float(max_dist)
    keep = d <= max_dist
    d, g = d[keep], g[keep]

    edges = np.linspace(0.0, max_dist, n_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side='right') - 1, 0, n_bins - 1)
    n_pairs = np.bincount(which, minlength=n_bins)
    h_sum = np.bincount(which, weights=d, minlength=n_bins)
    g_sum = np.bincount(which, weights=g, minlength=n_bins)

    filled = n_pairs > 0
    dropped = int(n_bins - filled.sum())
    if dropped:
        logger.info("variogram: %d empty bin(s) dropped", dropped)
    return Variogram(
        h=h_sum[filled] / n_pairs[filled],
        gamma=g_sum[filled] / n_pairs[filled],
        n_pairs=n_pairs[filled],
        dropped_bins=dropped,
    )


def exponential_variogram(params, h):
    nugget, sill, range_ = params
    return nugget + sill * (1.0 - np.exp(-h / range_))


def fit_exponential_variogram(vg: Variogram, n_starts: int = 8, seed: int = 0) -> VariogramFit:
    """
    Weighted least squares fit of nugget + sill (1 - exp(-h / range)) with
    weights n_pairs / h^2, from a fixed set of starting points.
    """
    h, gamma = np.asarray(vg.h, dtype=float), np.asarray(vg.gamma, dtype=float)
    if len(h) < 3:
        raise ValidationError("variogram fit needs at least 3 non-empty bins")

    h_safe = np.where(h > 0, h, np.min(h[h > 0]) if np.any(h > 0) else 1.0)
    w = np.sqrt(vg.n_pairs / h_safe ** 2)
    h_max = float(h.max())
    g_max = float(max(gamma.max(), 1e-12))
    range_lo, range_hi = 1e-3 * h_max, 100.0 * h_max

    def residual(params):
        return w * (exponential_variogram(params, h) - gamma)

    rng = np.random.default_rng(seed)
    starts = [np.array([float(gamma.min()), g_max - float(gamma.min()) + 1e-12, h_max / 3])]
    for _ in range(n_starts - 1):
        starts.append(np.array([
            rng.uniform(0.0, 0.5) * float(gamma.min()),
            rng.uniform(0.1, 1.5) * g_max,
            rng.uniform(0.05, 1.0) * h_max,
        ]))

    lower = [0.0, 0.0, range_lo]
    upper = [np.inf, np.inf, range_hi]
    best, failures = None, []
    for x0 in starts:
        x0 = np.clip(x0, lower, [g_max * 10, g_max * 10, range_hi])
        x0[2] = max(x0[2], range_lo * 1.01)
        try:
            res = least_squares(residual, x0, bounds=(lower, upper), method='trf',
                                xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=5000)
        except ValueError as e:
            failures.append(str(e))
            continue
        if not res.success:
            failures.append(res.message)
            continue
        if best is None or res.cost < best.cost:
            best = res

    if best is None:
        raise NumericalError(f"variogram fit failed from all {len(starts)} starts: {failures[:3]}")

    nugget, sill, range_ = (float(v) for v in best.x)
    # effective range (3 * range) shorter than the first lag means no usable structure
    flat = sill <= 1e-6 * g_max or range_ <= range_lo * (1 + 1e-6) or 3 * range_ < float(h.min())
    return VariogramFit(sill=sill, range=range_, nugget=nugget,
                        spatial_structure=not flat, cost=float(best.cost))


def _replicate_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def fit_model(model: str, grid: PixelGrid, wards: WardTable, bundles: Sequence[CovarianceBundle],
              priors: Hyperpriors, chain_config: ChainConfig,
              correction: Optional[float] = None) -> Tuple[PosteriorChain, PixelPosterior]:
    """Fit one of the four models and compute its pixel posterior."""
    if model == 'gp':
        chain = run_chain(grid, wards, bundles, priors, chain_config, correction=correction)
        predict_bundles = bundles
    else:
        kind = BaselineKind(model)
        chain = fit_baseline(kind, grid, wards, priors, chain_config, correction=correction)
        predict_bundles = [wn_bundle(grid, wards)] if kind is BaselineKind.LAPLACE_WN else []
    return chain, pixel_posterior(chain, predict_bundles, grid, wards, threads=1)


def run_study(
    settings: Sequence[str],
    models: Sequence[str],
    replicates: int,
    rows: int,
    cols: int,
    ward_rows: int,
    ward_cols: int,
    seed: int,
    out=None,
    beta_true: Optional[Sequence[float]] = None,
    n_covariates: int = DEFAULT_N_COVARIATES,
    phi_values: Sequence[float] = (DEFAULT_SIM_PHI,),
    burn_in: Optional[int] = None,
    samples: Optional[int] = None,
    priors: Optional[Hyperpriors] = None,
    threads: Optional[int] = None,
    cache_dir=None,
    progress: bool = False,
) -> pd.DataFrame:
    """
    Simulate, fit and score every (setting, replicate, model); the table
    holds replicate averages. Each replicate draws from its own stream
    seeded by (seed, setting, replicate). With out, the table goes to
    <out> and per-model timings to timing.csv next to it.
    """
    unknown = [m for m in models if m not in MODEL_NAMES]
    if unknown:
        raise ValidationError(f"unknown model(s): {', '.join(unknown)}")
    if replicates < 1:
        raise ValidationError("replicates must be at least 1")

    beta_true = tuple(beta_true) if beta_true is not None else DEFAULT_BETA_TRUE[:n_covariates + 1]
    if len(beta_true) != n_covariates + 1:
        raise ValidationError(f"beta_true needs {n_covariates + 1} entries")
    sim_settings = []
    for name in settings:
        try:
            sim_settings.append(SimSetting.named(name, beta_true, seed))
        except KeyError:
            raise ValidationError(f"unknown setting '{name}' (expected one of {', '.join(SETTING_AMPLITUDES)})")

    grid, base_wards = synthetic_grid(rows, cols, ward_rows, ward_cols, n_covariates,
                                      np.random.default_rng([seed, 0]))
    phi_grid = PhiGrid(tuple(phi_values))
    priors = priors or Hyperpriors(phi_grid=phi_grid, beta_sd=config.beta_sd,
                                   ig_shape=config.ig_shape, ig_rate=config.ig_rate)
    bundles = prepare_bundles(grid, base_wards, phi_grid.values, cache_dir=cache_dir, threads=threads) \
        if 'gp' in models else []

    def replicate(job):
        s, r = job
        setting = sim_settings[s]
        rng = np.random.default_rng([seed, s + 1, r])
        results = {}
        try:
            truth, counts = simulate(setting, grid, base_wards, rng)
            wards = with_counts(grid, base_wards, counts)
            for k, model in enumerate(models):
                chain_config = ChainConfig(
                    seed=_replicate_seed(seed, s + 1, r, k),
                    burn_in=config.burn_in if burn_in is None else burn_in,
                    samples=config.samples if samples is None else samples,
                )
                started = time.perf_counter()
                chain, post = fit_model(model, grid, wards, bundles, priors, chain_config)
                elapsed = time.perf_counter() - started
                results[model] = metrics(post, truth, chain, wards, elapsed)
        except (ValidationError, NumericalError, LinAlgError) as e:
            logger.warning("%s replicate %d failed: %s", setting.kind, r, e)
            return s, r, None
        return s, r, results

    jobs = [(s, r) for s in range(len(sim_settings)) for r in range(replicates)]
    with ThreadPoolExecutor(max_workers=config.get_threads(threads)) as pool:
        outcomes = list(tqdm(pool.map(replicate, jobs), total=len(jobs), desc="replicates",
                             disable=not progress))

    rows_out, timing = [], []
    for s, setting in enumerate(sim_settings):
        done = [res for (si, _, res) in outcomes if si == s and res is not None]
        failed = sum(1 for (si, _, res) in outcomes if si == s and res is None)
        if failed:
            logger.warning("%s: %d of %d replicate(s) failed and were excluded", setting.kind, failed, replicates)
        for model in models:
            reports = [res[model] for res in done]
            row = {'setting': setting.kind, 'model': model}
            for col in METRIC_COLUMNS:
                row[col] = float(np.mean([getattr(m, col) for m in reports])) if reports else float('nan')
            row['replicates'] = len(reports)
            row['failed'] = failed
            rows_out.append(row)
            timing.append({
                'setting': setting.kind,
                'model': model,
                'time_seconds': float(np.mean([m.time_seconds for m in reports])) if reports else float('nan'),
            })
        logger.info("%s: %d replicate(s) scored", setting.kind, len(done))

    table = pd.DataFrame(rows_out, columns=['setting', 'model'] + METRIC_COLUMNS + ['replicates', 'failed'])
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False, float_format=CSV_FLOAT_FORMAT)
        pd.DataFrame(timing).to_csv(out.parent / 'timing.csv', index=False, float_format='%.3f')
    return table


def load_study(path) -> Dict[str, Any]:
    """
    Read a TOML study file. Recognised keys: settings, models, replicates,
    rows, cols, wards ('5x4'), phi, beta_true, n_covariates, burn_in,
    samples.
    """
    try:
        with open(path, 'rb') as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing file: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path}: {e}")

    ward_rows, ward_cols = parse_ward_shape(str(raw.get('wards', '5x4')))
    phi = raw.get('phi', DEFAULT_SIM_PHI)
    study = {
        'settings': [str(s).upper() for s in raw.get('settings', ['S1', 'S2', 'S3'])],
        'models': [str(m).lower() for m in raw.get('models', list(MODEL_NAMES))],
        'replicates': int(raw.get('replicates', 1)),
        'rows': int(raw.get('rows', 100)),
        'cols': int(raw.get('cols', 100)),
        'ward_rows': ward_rows,
        'ward_cols': ward_cols,
        'phi_values': tuple(float(p) for p in (phi if isinstance(phi, list) else [phi])),
        'n_covariates': int(raw.get('n_covariates', DEFAULT_N_COVARIATES)),
        'burn_in': raw.get('burn_in'),
        'samples': raw.get('samples'),
    }
    if 'beta_true' in raw:
        study['beta_true'] = tuple(float(b) for b in raw['beta_true'])
    return study
