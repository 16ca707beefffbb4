#!/usr/bin/env python3
"""
Configuration and constants for the disaggregation toolkit.
"""

import os
from typing import Optional, Tuple

TOOL_VERSION = "0.3.0"

# Range parameter grid: (start, stop, step), inclusive, in pixel-side units
DEFAULT_PHI_GRID: Tuple[float, float, float] = (2.5, 17.5, 0.25)

# Added to the Sigma_00 diagonal before factorizing
DEFAULT_JITTER = 1e-8

# Hyperpriors: beta ~ N(0, sd^2 I), sigma2 ~ Inverse-Gamma(shape, rate)
DEFAULT_BETA_SD = 100.0
DEFAULT_IG_SHAPE = 0.01
DEFAULT_IG_RATE = 0.01

# Chain lengths
DEFAULT_BURN_IN = 500
DEFAULT_SAMPLES = 1500
DEFAULT_THIN = 1

# Single range value used by the simulation study
DEFAULT_SIM_PHI = 10.0

# Poisson GLM fitting
DEFAULT_GLM_MAX_ITER = 100
DEFAULT_GLM_TOL = 1e-10

# BayesGLM random-walk acceptance window during burn-in adaptation
DEFAULT_RW_ACCEPT_LOW = 0.23
DEFAULT_RW_ACCEPT_HIGH = 0.44
DEFAULT_RW_ADAPT_EVERY = 50

# Working-memory budget of the pixel tiles in flight during prediction (bytes)
DEFAULT_BLOCK_BYTES = 64 * 1024 * 1024

# Max distance-matrix elements materialized at once during kernel assembly
DEFAULT_KERNEL_CHUNK = 4_000_000

# Synthetic study defaults
DEFAULT_N_COVARIATES = 2
DEFAULT_BETA_TRUE: Tuple[float, ...] = (2.0, 0.6, -0.4)

# Output precision for CSV floats
CSV_FLOAT_FORMAT = "%.9g"

# Cache directory default
# Set DISAGG_CACHE_DIR to share covariance caches between runs
DISAGG_CACHE_DIR = os.environ.get('DISAGG_CACHE_DIR', None)


class Config:
    """Configuration class that reads from environment variables."""

    def __init__(self):
        self.jitter = float(os.environ.get('DISAGG_JITTER', DEFAULT_JITTER))
        self.block_bytes = int(os.environ.get('DISAGG_BLOCK_BYTES', DEFAULT_BLOCK_BYTES))
        self.kernel_chunk = int(os.environ.get('DISAGG_KERNEL_CHUNK', DEFAULT_KERNEL_CHUNK))
        self.log_level = os.environ.get('DISAGG_LOG_LEVEL', 'WARNING').upper()
        self.threads = os.environ.get('DISAGG_THREADS', None)
        self.run_slow = os.environ.get('DISAGG_RUN_SLOW', '0') == '1'

        self.cache_dir = DISAGG_CACHE_DIR

        self.phi_grid = DEFAULT_PHI_GRID
        self.beta_sd = DEFAULT_BETA_SD
        self.ig_shape = DEFAULT_IG_SHAPE
        self.ig_rate = DEFAULT_IG_RATE
        self.burn_in = DEFAULT_BURN_IN
        self.samples = DEFAULT_SAMPLES
        self.thin = DEFAULT_THIN
        self.glm_max_iter = DEFAULT_GLM_MAX_ITER
        self.glm_tol = DEFAULT_GLM_TOL

    def get_threads(self, override: Optional[int] = None) -> int:
        if override:
            return max(1, int(override))
        if self.threads:
            return max(1, int(self.threads))
        return os.cpu_count() or 1

    def get_cache_dir(self, override: Optional[str] = None) -> Optional[str]:
        return override or self.cache_dir


# Global config instance
config = Config()
