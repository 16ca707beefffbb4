#!/usr/bin/env python3
"""
disagg - areal-to-pixel disaggregation of ward counts.

Subcommands:
  precompute-cov  build and cache per-phi covariance aggregates
  fit             run a model and write its chain
  predict         pixel posterior mean/sd from a chain
  simulate        synthetic grid and S1/S2/S3 ward counts
  evaluate        simulation study table, or metrics for one posterior
  glm             Poisson regression coefficient table
  variogram       empirical semivariance of ward residuals and its fit

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError

from baselines import fit_baseline, fit_poisson_glm, wn_bundle
from config import config, TOOL_VERSION, CSV_FLOAT_FORMAT, DEFAULT_BETA_TRUE, DEFAULT_N_COVARIATES
from grid_io import (
    load_grid, write_grid, empirical_log_intensity, ward_centroids, ols_residuals,
    read_residuals, write_residuals,
)
from kernels import prepare_bundles
from models import (
    BaselineKind, ChainConfig, Hyperpriors, PhiGrid, RunManifest, SimSetting, MODEL_NAMES,
)
from predict import (
    pixel_posterior, aggregate_check, write_posterior_csv, read_posterior_csv,
    write_pgm, write_ward_report,
)
from sampler import (
    run_chain, write_chain, read_chain, summarize_chain, phi_distribution, write_trace, beta_labels,
)
from simulation import (
    synthetic_grid, simulate, with_counts, metrics, empirical_variogram,
    fit_exponential_variogram, run_study, load_study, METRIC_COLUMNS,
)
from validators import (
    ValidationError, NumericalError, validate_file, parse_phi_grid, parse_ward_shape,
    parse_name_list, parse_index_list,
)

logger = logging.getLogger('disagg')

BANNER = "=" * 60


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _config_digest(args: argparse.Namespace) -> str:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ('handler',)}
    return hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir, command: str, argv: List[str], args: argparse.Namespace,
                   inputs: List[Optional[str]], started_at: str) -> Path:
    """Atomically write <command>.manifest.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command_line=['disagg'] + list(argv),
        config_digest=_config_digest(args),
        input_checksums={str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
        seed=getattr(args, 'seed', None),
        started_at=started_at,
        finished_at=_utc_now(),
        tool_version=TOOL_VERSION,
    )
    path = out_dir / f"{command}.manifest.json"
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    os.replace(tmp, path)
    return path


def _grid_inputs(args) -> list:
    return [args.pixels, args.wards]


def _load(args):
    return load_grid(args.pixels, args.wards, parse_name_list(args.log1p),
                     args.standardize, args.pixel_side)


def _cache_dir(args) -> Optional[str]:
    return config.get_cache_dir(args.cache_dir)


def _priors(args, phi_values) -> Hyperpriors:
    return Hyperpriors(phi_grid=PhiGrid(tuple(phi_values)), beta_sd=args.beta_sd,
                       ig_shape=args.ig_shape, ig_rate=args.ig_rate)


def _parent(path) -> Path:
    return Path(path).resolve().parent


def cmd_precompute_cov(args, argv) -> int:
    started = _utc_now()
    cache_dir = _cache_dir(args)
    if not cache_dir:
        raise ValidationError("--cache-dir (or DISAGG_CACHE_DIR) is required")

    grid, wards = _load(args)
    phi_values = parse_phi_grid(args.phi_grid)
    t0 = time.perf_counter()
    bundles = prepare_bundles(grid, wards, phi_values, cache_dir=cache_dir, jitter=args.jitter,
                              threads=args.threads, progress=args.progress)
    write_manifest(cache_dir, 'precompute-cov', argv, args, _grid_inputs(args), started)

    print(f"✅ {len(bundles)} covariance bundle(s) for {wards.L} wards / {grid.n_pixels} pixels "
          f"in {cache_dir} ({time.perf_counter() - t0:.1f}s)")
    return 0


def _print_summary(summary: pd.DataFrame, n_hyper: int) -> None:
    print("\n" + BANNER)
    print("POSTERIOR SUMMARY")
    print(BANNER)
    print(f"{'parameter':<22}{'mean':>11}{'sd':>11}{'2.5%':>11}{'97.5%':>11}")
    for _, row in summary.head(n_hyper).iterrows():
        print(f"{row['parameter']:<22}{row['mean']:>11.4f}{row['sd']:>11.4f}"
              f"{row['q2.5']:>11.4f}{row['q97.5']:>11.4f}")
    print(BANNER)


def cmd_fit(args, argv) -> int:
    started = _utc_now()
    grid, wards = _load(args)
    chain_config = ChainConfig(seed=args.seed, burn_in=args.burn_in, samples=args.samples, thin=args.thin)

    if args.model == 'gp':
        phi_values = parse_phi_grid(args.phi_grid)
        priors = _priors(args, phi_values)
        bundles = prepare_bundles(grid, wards, phi_values, cache_dir=_cache_dir(args),
                                  jitter=args.jitter, threads=args.threads, progress=args.progress)
        chain = run_chain(grid, wards, bundles, priors, chain_config,
                          correction=args.correction, progress=args.progress)
    else:
        priors = _priors(args, (1.0,))
        chain = fit_baseline(BaselineKind(args.model), grid, wards, priors, chain_config,
                             correction=args.correction, progress=args.progress)

    out_dir = _parent(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_chain(args.out, chain)

    labels = beta_labels(grid.covariate_names)
    summary = summarize_chain(chain, labels, wards.ward_ids)
    summary_path = Path(args.summary) if args.summary else out_dir / 'chain_summary.csv'
    summary.to_csv(summary_path, index=False, float_format=CSV_FLOAT_FORMAT)
    if chain.has_latent_field:
        phi_distribution(chain).to_csv(out_dir / 'phi_distribution.csv', index=False,
                                       float_format=CSV_FLOAT_FORMAT)
    if args.trace:
        write_trace(args.trace, chain, parse_index_list(args.trace_lambda), labels)

    write_manifest(out_dir, 'fit', argv, args, _grid_inputs(args), started)

    n_hyper = len(labels) + (2 if chain.has_latent_field else 0)
    _print_summary(summary, n_hyper)
    print(f"✅ {args.model} chain: {chain.B} draws after {chain.burn_in} burn-in -> {args.out}")
    return 0


def cmd_predict(args, argv) -> int:
    started = _utc_now()
    ok, msg = validate_file(args.chain)
    if not ok:
        raise ValidationError(msg)
    chain = read_chain(args.chain)
    grid, wards = _load(args)

    if chain.model == 'gp':
        used = sorted({chain.phi_grid[k] for k in np.unique(chain.phi_index)})
        bundles = prepare_bundles(grid, wards, used, cache_dir=_cache_dir(args), jitter=args.jitter,
                                  threads=args.threads, progress=args.progress)
    elif chain.model == BaselineKind.LAPLACE_WN.value:
        bundles = [wn_bundle(grid, wards)]
    else:
        bundles = []

    post = pixel_posterior(chain, bundles, grid, wards, threads=args.threads,
                           block_bytes=args.block_bytes, progress=args.progress)

    out_dir = _parent(args.out)
    write_posterior_csv(args.out, grid, post)
    if args.png_mean:
        write_pgm(args.png_mean, grid, post.mean)
    if args.png_sd:
        write_pgm(args.png_sd, grid, post.sd)
    if args.ward_report:
        write_ward_report(args.ward_report, aggregate_check(post, grid, wards, chain))

    write_manifest(out_dir, 'predict', argv, args, _grid_inputs(args) + [args.chain], started)
    print(f"✅ Pixel posterior for {grid.n_pixels} pixels from {chain.B} draws -> {args.out}")
    print(f"   mean sd {np.mean(post.sd):.4f}, max sd {np.max(post.sd):.4f}")
    return 0


def _read_beta(path) -> tuple:
    ok, msg = validate_file(path)
    if not ok:
        raise ValidationError(msg)
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"cannot read beta file {path}: {e}")
    if 'beta' not in df.columns:
        raise ValidationError(f"{path}: expected a 'beta' column (intercept first)")
    values = pd.to_numeric(df['beta'], errors='coerce')
    if values.isna().any():
        raise ValidationError(f"{path}: non-numeric beta value")
    return tuple(values.tolist())


def cmd_simulate(args, argv) -> int:
    started = _utc_now()
    rng = np.random.default_rng(args.seed)

    if args.pixels:
        if not args.template_wards:
            raise ValidationError("--pixels needs --template-wards")
        grid, wards = load_grid(args.pixels, args.template_wards, parse_name_list(args.log1p),
                                args.standardize, args.pixel_side)
    else:
        ward_rows, ward_cols = parse_ward_shape(args.wards)
        grid, wards = synthetic_grid(args.rows, args.cols, ward_rows, ward_cols,
                                     args.n_covariates, rng, args.pixel_side)

    if args.beta_file:
        beta = _read_beta(args.beta_file)
    else:
        beta = DEFAULT_BETA_TRUE[:grid.X.shape[1]]

    try:
        setting = SimSetting.named(args.setting, beta, args.seed)
    except KeyError:
        raise ValidationError(f"unknown setting '{args.setting}' (expected s1, s2 or s3)")

    truth, counts = simulate(setting, grid, wards, rng)
    wards = with_counts(grid, wards, counts)

    prefix = args.out_prefix
    Path(prefix + 'x').parent.mkdir(parents=True, exist_ok=True)
    write_grid(grid, wards, prefix + 'pixels.csv', prefix + 'wards.csv')
    pd.DataFrame({'pixel_id': grid.pixel_ids, 'truth': truth}).to_csv(
        prefix + 'truth.csv', index=False, float_format='%.17g')

    inputs = [args.beta_file, args.pixels, args.template_wards]
    write_manifest(Path(prefix + 'x').parent, 'simulate', argv, args, inputs, started)
    print(f"✅ {setting.kind}: {grid.n_pixels} pixels, {wards.L} wards, "
          f"total count {int(wards.population.sum())} -> {prefix}pixels.csv, {prefix}wards.csv, {prefix}truth.csv")
    return 0


def cmd_evaluate(args, argv) -> int:
    started = _utc_now()
    out_dir = _parent(args.out)

    if args.study:
        if args.seed is None:
            raise ValidationError("evaluate --study requires --seed")
        study = load_study(args.study)
        priors = None
        if args.beta_sd is not None:
            priors = Hyperpriors(phi_grid=PhiGrid(study['phi_values']), beta_sd=args.beta_sd,
                                 ig_shape=config.ig_shape, ig_rate=config.ig_rate)
        table = run_study(
            study['settings'], study['models'], study['replicates'],
            study['rows'], study['cols'], study['ward_rows'], study['ward_cols'],
            seed=args.seed, out=args.out, beta_true=study.get('beta_true'),
            n_covariates=study['n_covariates'], phi_values=study['phi_values'],
            burn_in=study['burn_in'], samples=study['samples'], priors=priors,
            threads=args.threads, cache_dir=args.cache_dir, progress=args.progress,
        )
        write_manifest(out_dir, 'evaluate', argv, args, [args.study], started)
        print("\n" + BANNER)
        print("SIMULATION STUDY")
        print(BANNER)
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        failed = int(table.groupby('setting')['failed'].first().sum()) if len(table) else 0
        if failed:
            print(f"⚠️  {failed} replicate(s) failed and were excluded")
        print(f"✅ Table -> {args.out}")
        return 0

    missing = [flag for flag, value in (('--posterior', args.posterior), ('--truth', args.truth),
                                        ('--chain', args.chain), ('--pixels', args.pixels),
                                        ('--wards', args.wards)) if not value]
    if missing:
        raise ValidationError(f"evaluate needs --study, or {', '.join(missing)}")

    for path in (args.posterior, args.truth, args.chain):
        ok, msg = validate_file(path)
        if not ok:
            raise ValidationError(msg)
    grid, wards = _load(args)
    post = read_posterior_csv(args.posterior)
    try:
        truth_df = pd.read_csv(args.truth)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"cannot read truth file {args.truth}: {e}")
    if not {'pixel_id', 'truth'} <= set(truth_df.columns):
        raise ValidationError(f"{args.truth}: expected columns pixel_id,truth")
    truth_df = truth_df.sort_values('pixel_id')
    chain = read_chain(args.chain)
    report = metrics(post, truth_df['truth'].to_numpy(float), chain, wards)

    row = {col: getattr(report, col) for col in METRIC_COLUMNS}
    pd.DataFrame([{'model': chain.model, **row}]).to_csv(args.out, index=False, float_format=CSV_FLOAT_FORMAT)
    write_manifest(out_dir, 'evaluate', argv, args,
                   _grid_inputs(args) + [args.posterior, args.truth, args.chain], started)
    print("  ".join(f"{k}={v:.4f}" for k, v in row.items()))
    print(f"✅ Metrics -> {args.out}")
    return 0


def cmd_glm(args, argv) -> int:
    started = _utc_now()
    grid, wards = _load(args)
    names = ['intercept'] + list(grid.covariate_names)
    fit = fit_poisson_glm(wards, names)

    table = pd.DataFrame({
        'term': names,
        'estimate': fit.coef,
        'std_error': fit.se,
        'z_value': fit.z,
        'p_value': fit.p,
    })
    table.to_csv(args.out, index=False, float_format=CSV_FLOAT_FORMAT)

    if args.residuals_out:
        lambda_hat = empirical_log_intensity(wards, args.correction).lambda_hat
        _, residuals = ols_residuals(wards, lambda_hat)
        write_residuals(args.residuals_out, wards.ward_ids, ward_centroids(grid, wards), residuals)

    write_manifest(_parent(args.out), 'glm', argv, args, _grid_inputs(args), started)
    print(f"{'term':<16}{'estimate':>12}{'std.err':>12}{'z':>10}{'p':>12}")
    for _, r in table.iterrows():
        print(f"{r['term']:<16}{r['estimate']:>12.4f}{r['std_error']:>12.4f}{r['z_value']:>10.2f}{r['p_value']:>12.3g}")
    print(f"✅ Converged in {fit.iterations} iterations, deviance {fit.deviance:.3f} -> {args.out}")
    return 0


def cmd_variogram(args, argv) -> int:
    started = _utc_now()
    if args.residuals:
        residuals, centroids = read_residuals(args.residuals)
        inputs = [args.residuals]
    elif args.pixels and args.wards:
        grid, wards = _load(args)
        lambda_hat = empirical_log_intensity(wards, args.correction).lambda_hat
        _, residuals = ols_residuals(wards, lambda_hat)
        centroids = ward_centroids(grid, wards)
        inputs = _grid_inputs(args)
    else:
        raise ValidationError("variogram needs --residuals, or --pixels and --wards")

    vg = empirical_variogram(residuals, centroids, args.bins, args.max_dist)
    pd.DataFrame({'h': vg.h, 'gamma': vg.gamma, 'n_pairs': vg.n_pairs}).to_csv(
        args.out, index=False, float_format=CSV_FLOAT_FORMAT)

    if len(vg.h) >= 3:
        vg.fit = fit_exponential_variogram(vg)
        fit_path = Path(args.out).with_name(Path(args.out).stem + '_fit.csv')
        pd.DataFrame([{
            'sill': vg.fit.sill, 'range': vg.fit.range, 'nugget': vg.fit.nugget,
            'spatial_structure': vg.fit.spatial_structure,
        }]).to_csv(fit_path, index=False, float_format=CSV_FLOAT_FORMAT)
        marker = "✅" if vg.fit.spatial_structure else "⚠️ "
        print(f"{marker} exponential fit: sill {vg.fit.sill:.4g}, range {vg.fit.range:.4g}, "
              f"nugget {vg.fit.nugget:.4g}")
        if not vg.fit.spatial_structure:
            print("   no spatial structure detected")
    else:
        print(f"⚠️  only {len(vg.h)} non-empty bin(s); skipping the exponential fit")

    if vg.dropped_bins:
        print(f"   {vg.dropped_bins} empty bin(s) dropped")
    write_manifest(_parent(args.out), 'variogram', argv, args, inputs, started)
    print(f"✅ Variogram -> {args.out}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('-v', '--verbose', action='store_true', help='log progress at INFO level')
    p.add_argument('--progress', action='store_true', help='show progress bars')


def _add_grid_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument('--pixels', required=required, help='pixel CSV: pixel_id,row,col,ward_id,cov_1,...')
    p.add_argument('--wards', required=required, help='ward CSV: ward_id,population')
    p.add_argument('--log1p', default='', help='covariates to transform with log(1+x), e.g. cov_3,cov_5')
    p.add_argument('--standardize', action='store_true', help='z-score covariates after transforms')
    p.add_argument('--pixel-side', type=float, default=1.0, help='distance units per pixel side')


def _add_cov_args(p: argparse.ArgumentParser) -> None:
    start, stop, step = config.phi_grid
    p.add_argument('--cache-dir', default=None, help='covariance cache (default: $DISAGG_CACHE_DIR)')
    p.add_argument('--phi-grid', default=f"{start:g}:{stop:g}:{step:g}", help='start:stop:step or a,b,c')
    p.add_argument('--jitter', type=float, default=config.jitter)
    p.add_argument('--threads', type=int, default=None)


def build_parser() -> CliParser:
    parser = CliParser(prog='disagg', description=__doc__.split('\n\n')[0].strip(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--version', action='version', version=f"disagg {TOOL_VERSION}")
    sub = parser.add_subparsers(dest='command', metavar='<command>')
    sub.required = True

    p = sub.add_parser('precompute-cov', help='cache Sigma_00 / Sigma_p0 for every phi')
    _add_grid_args(p)
    _add_cov_args(p)
    _add_common(p)
    p.set_defaults(handler=cmd_precompute_cov)

    p = sub.add_parser('fit', help='fit a model and write the chain',
                       description='Writes the chain, chain_summary.csv (parameter,mean,sd,q2.5,q97.5,mcse) '
                                   'and, for gp/wn, phi_distribution.csv (phi,probability).')
    _add_grid_args(p)
    _add_cov_args(p)
    p.add_argument('--model', choices=MODEL_NAMES, default='gp')
    p.add_argument('--burn-in', type=int, default=config.burn_in)
    p.add_argument('--samples', type=int, default=config.samples)
    p.add_argument('--thin', type=int, default=config.thin)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--beta-sd', type=float, default=config.beta_sd)
    p.add_argument('--ig-shape', type=float, default=config.ig_shape)
    p.add_argument('--ig-rate', type=float, default=config.ig_rate)
    p.add_argument('--correction', type=float, default=None, help='pseudo-count for zero-count wards')
    p.add_argument('--out', required=True, help='chain file')
    p.add_argument('--summary', default=None, help='summary CSV (default: chain_summary.csv next to --out)')
    p.add_argument('--trace', default=None, help='trace CSV: iteration, hyperparameters, lambda_star_<i>')
    p.add_argument('--trace-lambda', default='', help='ward indices to add to the trace, e.g. 50,100')
    _add_common(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser('predict', help='pixel posterior mean and sd',
                       description='CSV columns: pixel_id,row,col,ward_id,post_mean,post_sd.')
    _add_grid_args(p)
    _add_cov_args(p)
    p.add_argument('--chain', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--png-mean', default=None, help='PGM raster of the posterior mean')
    p.add_argument('--png-sd', default=None, help='PGM raster of the posterior sd')
    p.add_argument('--ward-report', default=None,
                   help='CSV: ward_id,pixel_log_mean,chain_mean,difference')
    p.add_argument('--block-bytes', type=int, default=config.block_bytes)
    _add_common(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('simulate', help='synthetic S1/S2/S3 data',
                       description='Writes <prefix>pixels.csv, <prefix>wards.csv and <prefix>truth.csv '
                                   '(pixel_id,truth).')
    p.add_argument('--setting', required=True, help='s1, s2 or s3')
    p.add_argument('--rows', type=int, default=100)
    p.add_argument('--cols', type=int, default=100)
    p.add_argument('--wards', default='5x4', help='ward tiling, e.g. 5x4')
    p.add_argument('--n-covariates', type=int, default=DEFAULT_N_COVARIATES)
    p.add_argument('--pixels', default=None, help='simulate on an existing pixel file instead')
    p.add_argument('--template-wards', default=None, help='ward file paired with --pixels')
    p.add_argument('--log1p', default='')
    p.add_argument('--standardize', action='store_true')
    p.add_argument('--pixel-side', type=float, default=1.0)
    p.add_argument('--beta-file', default=None, help="CSV with a 'beta' column, intercept first")
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--out-prefix', required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('evaluate', help='simulation study or single-posterior metrics',
                       description='Study table columns: setting,model,rmse,mad,pos_sd,cover,dic,waic,'
                                   'replicates,failed; timings go to timing.csv.')
    _add_grid_args(p, required=False)
    p.add_argument('--study', default=None, help='TOML study file')
    p.add_argument('--posterior', default=None)
    p.add_argument('--truth', default=None)
    p.add_argument('--chain', default=None)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--beta-sd', type=float, default=None)
    p.add_argument('--cache-dir', default=None)
    p.add_argument('--threads', type=int, default=None)
    p.add_argument('--out', required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('glm', help='Poisson GLM coefficient table',
                       description='CSV columns: term,estimate,std_error,z_value,p_value.')
    _add_grid_args(p)
    p.add_argument('--out', required=True)
    p.add_argument('--residuals-out', default=None, help='ward residual CSV for the variogram')
    p.add_argument('--correction', type=float, default=None)
    _add_common(p)
    p.set_defaults(handler=cmd_glm)

    p = sub.add_parser('variogram', help='empirical semivariance and exponential fit',
                       description='CSV columns: h,gamma,n_pairs; the fit goes to <out>_fit.csv.')
    _add_grid_args(p, required=False)
    p.add_argument('--residuals', default=None, help='CSV: ward_id,x,y,residual')
    p.add_argument('--bins', type=int, default=15)
    p.add_argument('--max-dist', type=float, default=None)
    p.add_argument('--correction', type=float, default=None)
    p.add_argument('--out', required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_variogram)

    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    level = 'INFO' if args.verbose else config.log_level
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s', force=True)

    try:
        return args.handler(args, argv)
    except ValidationError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except (NumericalError, LinAlgError) as e:
        print(f"❌ numerical failure: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == '__main__':
    main()
