"""Input validation helpers shared by every module."""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError

SIMPLEX_ATOL = 1e-9
RENORM_ATOL = 1e-6


def check_vector(x, name="vector", n=None, allow_empty=False):
    """Coerce ``x`` to a finite 1-d float array, optionally of length ``n``."""
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name}: not numeric ({exc})") from None
    if arr.ndim != 1:
        raise InvalidInputError(f"{name}: expected a 1-d vector, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise InvalidInputError(f"{name}: empty vector")
    if n is not None and arr.size != n:
        raise InvalidInputError(f"{name}: expected length {n}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: non-finite entry")
    return arr


def check_ratio(x, name="ratio", n=None, strictly_positive=False):
    """Validate a point on the probability simplex.

    Vectors whose sum is within ``SIMPLEX_ATOL`` of one are returned as-is
    (bit-exact). Small drift up to ``RENORM_ATOL`` is renormalized away;
    anything further off is rejected.
    """
    arr = check_vector(x, name=name, n=n)
    if np.any(arr < 0):
        raise InvalidInputError(f"{name}: invalid weight (negative entry)")
    if strictly_positive and np.any(arr <= 0):
        raise InvalidInputError(f"{name}: reference ratio has empty domain")
    total = float(arr.sum())
    gap = abs(total - 1.0)
    if gap <= SIMPLEX_ATOL:
        return arr
    if gap <= RENORM_ATOL:
        return arr / total
    raise InvalidInputError(f"{name}: entries sum to {total!r}, not 1")


def check_fraction(value, name, low=0.0, high=1.0, low_open=False):
    value = float(value)
    if not np.isfinite(value):
        raise InvalidInputError(f"{name}: must be finite")
    if value > high or value < low or (low_open and value == low):
        bracket = "(" if low_open else "["
        raise InvalidInputError(f"{name}={value!r} outside {bracket}{low}, {high}]")
    return value
