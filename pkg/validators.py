#!/usr/bin/env python3
"""
Input validation utilities and error types for the disaggregation toolkit.
"""

import math
import re
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np


class ValidationError(ValueError):
    """Bad input: files, flags, shapes or values the model cannot use."""


class NumericalError(RuntimeError):
    """A numerical routine failed (factorization, convergence, overflow)."""


def validate_file(path) -> tuple[bool, str]:
    """Check that an input file exists and is a regular file."""
    if path is None or str(path) == "":
        return False, "File path cannot be empty"

    p = Path(path)
    if not p.exists():
        return False, f"missing file: {p}"
    if not p.is_file():
        return False, f"not a regular file: {p}"

    return True, ""


def validate_positive(value, name: str) -> tuple[bool, str]:
    """Validate a strictly positive finite real."""
    try:
        value = float(value)
    except (ValueError, TypeError):
        return False, f"{name} must be a number"

    if not math.isfinite(value) or value <= 0:
        return False, f"{name} must be positive, got {value}"

    return True, ""


def validate_phi_values(values) -> tuple[bool, str]:
    """A range grid must be non-empty, positive and strictly increasing."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        return False, "phi grid must be a non-empty list"
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        return False, "phi grid values must be positive"
    if np.any(np.diff(arr) <= 0):
        return False, "phi grid must be strictly increasing"
    return True, ""


def parse_phi_grid(text: str) -> List[float]:
    """
    Parse a range grid flag.

    Accepts 'start:stop:step' (inclusive of stop) or a comma list
    such as '5,10,15'. Values are rounded to 10 decimals so that
    file names derived from them are stable.
    """
    text = sanitize_input(text)
    if ':' in text:
        parts = text.split(':')
        if len(parts) != 3:
            raise ValidationError(f"phi grid must be start:stop:step, got '{text}'")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ValidationError(f"phi grid must be numeric, got '{text}'")
        if step <= 0 or stop < start:
            raise ValidationError(f"invalid phi grid '{text}'")
        n = int(round((stop - start) / step))
        values = [round(start + k * step, 10) for k in range(n + 1)]
    else:
        try:
            values = [float(v) for v in text.split(',') if v.strip()]
        except ValueError:
            raise ValidationError(f"phi grid must be numeric, got '{text}'")

    ok, msg = validate_phi_values(values)
    if not ok:
        raise ValidationError(msg)
    return values


def parse_ward_shape(text: str) -> Tuple[int, int]:
    """Parse a ward tiling such as '5x4' into (ward_rows, ward_cols)."""
    match = re.fullmatch(r'\s*(\d+)\s*[xX]\s*(\d+)\s*', text or '')
    if not match:
        raise ValidationError(f"ward tiling must look like 5x4, got '{text}'")
    shape = int(match.group(1)), int(match.group(2))
    if min(shape) < 1:
        raise ValidationError("ward tiling needs at least one ward per axis")
    return shape


def parse_name_list(text: Optional[str]) -> List[str]:
    """Split 'cov_3,cov_5' into names; empty input gives an empty list."""
    if not text:
        return []
    return [sanitize_input(t) for t in text.split(',') if t.strip()]


def parse_index_list(text: Optional[str]) -> List[int]:
    """Split '50,100' into integer indices."""
    try:
        return [int(t) for t in parse_name_list(text)]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got '{text}'")


def sanitize_input(value: str) -> str:
    """Strip control characters and surrounding whitespace from a flag value."""
    if not isinstance(value, str):
        return str(value)

    value = value.replace('\x00', '')
    value = ''.join(char for char in value if ord(char) >= 32 or char in '\n\t\r')

    return value.strip()
