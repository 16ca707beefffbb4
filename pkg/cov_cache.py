#!/usr/bin/env python3
"""
On-disk cache of per-phi covariance aggregates.

Each matrix lives in its own file: a 32-byte little-endian header
(magic, version, rows, cols, phi, payload checksum) followed by the
row-major float64 payload. Cross-covariances are memory-mapped on load.
A cache_index.json file records a fingerprint of the grid and jitter;
when it does not match, every cached matrix is discarded.
"""

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from models import CovarianceBundle, PixelGrid, WardTable

logger = logging.getLogger(__name__)

MAGIC = b'DSGC'
FORMAT_VERSION = 1
HEADER = struct.Struct('<4sIIIdQ')
HEADER_SIZE = HEADER.size  # 32
INDEX_FILE = 'cache_index.json'
KINDS = ('sigma00', 'sigmap0', 'chol00')

# Rows hashed per step when streaming a large payload
_HASH_ROWS = 8192


class CacheFormatError(ValueError):
    """A cache file is unreadable, truncated or fails its checksum."""


def phi_label(phi: float) -> str:
    return format(float(phi), '.10g')


def grid_fingerprint(grid: PixelGrid, wards: WardTable, jitter: float) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(grid.rows, dtype='<i8').tobytes())
    h.update(np.ascontiguousarray(grid.cols, dtype='<i8').tobytes())
    h.update(np.ascontiguousarray(wards.pixel_ward_index, dtype='<i8').tobytes())
    h.update(struct.pack('<dd', float(grid.pixel_side), float(jitter)))
    return h.hexdigest()


def _checksum(matrix: np.ndarray) -> int:
    h = hashlib.blake2b(digest_size=8)
    for start in range(0, matrix.shape[0], _HASH_ROWS):
        block = np.ascontiguousarray(matrix[start:start + _HASH_ROWS], dtype='<f8')
        h.update(block.tobytes())
    return int.from_bytes(h.digest(), 'little')


def _write_header(fh, rows: int, cols: int, phi: float, checksum: int) -> None:
    fh.seek(0)
    fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols, float(phi), checksum))


def write_matrix(path, matrix: np.ndarray, phi: float) -> None:
    """Atomically write one matrix file."""
    path = Path(path)
    tmp = path.with_name(path.name + '.tmp')
    matrix = np.ascontiguousarray(matrix, dtype='<f8')
    rows, cols = matrix.shape
    with open(tmp, 'wb') as fh:
        _write_header(fh, rows, cols, phi, _checksum(matrix))
        fh.write(matrix.tobytes())
    os.replace(tmp, path)


def read_header(path):
    with open(path, 'rb') as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, rows, cols, phi, checksum = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    return rows, cols, phi, checksum


def read_matrix(path, phi: Optional[float] = None, mmap: bool = False) -> np.ndarray:
    """Read and verify one matrix file; mmap returns a read-only np.memmap."""
    rows, cols, stored_phi, checksum = read_header(path)
    if phi is not None and not np.isclose(stored_phi, phi, rtol=0, atol=1e-9):
        raise CacheFormatError(f"{path}: header phi {stored_phi} != {phi}")
    if os.path.getsize(path) != HEADER_SIZE + rows * cols * 8:
        raise CacheFormatError(f"{path}: payload size does not match header")

    if mmap:
        matrix = np.memmap(path, dtype='<f8', mode='r', offset=HEADER_SIZE, shape=(rows, cols))
    else:
        with open(path, 'rb') as fh:
            fh.seek(HEADER_SIZE)
            matrix = np.frombuffer(fh.read(), dtype='<f8').reshape(rows, cols).copy()

    if _checksum(matrix) != checksum:
        del matrix
        raise CacheFormatError(f"{path}: checksum mismatch")
    return matrix


class CovarianceCache:
    """
    Per-phi bundle store bound to one grid. hits and misses count load()
    outcomes.
    """

    def __init__(self, cache_dir, grid: PixelGrid, wards: WardTable, jitter: float):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.jitter = float(jitter)
        self.n_pixels = grid.n_pixels
        self.n_wards = wards.L
        self.fingerprint = grid_fingerprint(grid, wards, jitter)
        self.hits = 0
        self.misses = 0
        self._check_index()

    def path(self, kind: str, phi: float) -> Path:
        return self.cache_dir / f"{kind}_phi{phi_label(phi)}.bin"

    def _check_index(self) -> None:
        index_path = self.cache_dir / INDEX_FILE
        stored = None
        if index_path.exists():
            try:
                stored = json.loads(index_path.read_text()).get('fingerprint')
            except (json.JSONDecodeError, AttributeError):
                stored = None

        if stored == self.fingerprint:
            return

        stale = [p for kind in KINDS for p in self.cache_dir.glob(f"{kind}_phi*.bin")]
        if stale:
            logger.warning("Cache in %s belongs to a different grid; discarding %d file(s)",
                           self.cache_dir, len(stale))
            for p in stale:
                p.unlink()

        tmp = index_path.with_name(INDEX_FILE + '.tmp')
        tmp.write_text(json.dumps({'fingerprint': self.fingerprint, 'version': FORMAT_VERSION}, indent=2))
        os.replace(tmp, index_path)

    def load(self, phi: float) -> Optional[CovarianceBundle]:
        """Return the cached bundle for phi, or None when absent or invalid."""
        try:
            sigma00 = read_matrix(self.path('sigma00', phi), phi)
            chol00 = read_matrix(self.path('chol00', phi), phi)
            sigma_p0 = read_matrix(self.path('sigmap0', phi), phi, mmap=True)
        except FileNotFoundError:
            self.misses += 1
            return None
        except CacheFormatError as e:
            logger.warning("Recomputing phi=%s: %s", phi_label(phi), e)
            self.misses += 1
            return None

        L = self.n_wards
        if sigma00.shape != (L, L) or chol00.shape != (L, L) or sigma_p0.shape != (self.n_pixels, L):
            logger.warning("Recomputing phi=%s: cached shapes do not match the grid", phi_label(phi))
            self.misses += 1
            return None

        self.hits += 1
        sigma00.setflags(write=False)
        chol00.setflags(write=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol00))))
        logger.debug("Loaded bundle phi=%s from %s", phi_label(phi), self.cache_dir)
        return CovarianceBundle(phi=float(phi), sigma00=sigma00, chol00=chol00,
                                logdet00=logdet, sigma_p0=sigma_p0, jitter=self.jitter)

    def open_sigma_p0(self, phi: float) -> np.memmap:
        """Writable P x L memmap to be filled and then passed to store()."""
        tmp = self.path('sigmap0', phi).with_suffix('.bin.tmp')
        with open(tmp, 'wb') as fh:
            fh.truncate(HEADER_SIZE + self.n_pixels * self.n_wards * 8)
        return np.memmap(tmp, dtype='<f8', mode='r+', offset=HEADER_SIZE,
                         shape=(self.n_pixels, self.n_wards))

    def discard_sigma_p0(self, phi: float) -> None:
        """Remove the partial file of open_sigma_p0() after a failed fill or store()."""
        self.path('sigmap0', phi).with_suffix('.bin.tmp').unlink(missing_ok=True)

    def store(self, bundle: CovarianceBundle) -> CovarianceBundle:
        """
        Persist a bundle whose sigma_p0 came from open_sigma_p0(); returns
        the bundle with sigma_p0 re-opened read-only from the final file.
        """
        phi = bundle.phi
        write_matrix(self.path('sigma00', phi), bundle.sigma00, phi)
        write_matrix(self.path('chol00', phi), bundle.chol00, phi)

        final = self.path('sigmap0', phi)
        tmp = final.with_suffix('.bin.tmp')
        mm = bundle.sigma_p0
        try:
            mm.flush()
            checksum = _checksum(mm)
        finally:
            del mm
        with open(tmp, 'r+b') as fh:
            _write_header(fh, self.n_pixels, self.n_wards, phi, checksum)
        os.replace(tmp, final)

        sigma_p0 = np.memmap(final, dtype='<f8', mode='r', offset=HEADER_SIZE,
                             shape=(self.n_pixels, self.n_wards))
        return CovarianceBundle(phi=phi, sigma00=bundle.sigma00, chol00=bundle.chol00,
                                logdet00=bundle.logdet00, sigma_p0=sigma_p0, jitter=bundle.jitter)
