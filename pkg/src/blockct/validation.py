"""Small argument-checking helpers used at public API boundaries."""

import numpy as np

from .errors import ConfigurationError


def check_positive(name, value):
    """Raise unless ``value`` is a finite number > 0; return it as float."""
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ConfigurationError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_nonnegative(name, value):
    """Raise unless ``value`` is a finite number >= 0; return it as float."""
    value = float(value)
    if not np.isfinite(value) or value < 0.0:
        raise ConfigurationError(f"{name} must be >= 0 and finite, got {value!r}")
    return value


def check_fraction(name, value):
    """Raise unless ``value`` lies in (0, 1]; return it as float."""
    value = float(value)
    if not np.isfinite(value) or not 0.0 < value <= 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1], got {value!r}")
    return value


def check_unit_interval(name, value):
    """Raise unless ``value`` lies in [0, 1]; return it as float."""
    value = float(value)
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_count(name, value, minimum=1):
    """Raise unless ``value`` is an integer >= ``minimum``; return it as int."""
    ivalue = int(value)
    if ivalue != value or ivalue < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return ivalue


def check_choice(name, value, choices):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def as_vector(name, x, length=None):
    """Coerce to a contiguous 1-D float64 array, optionally of fixed length."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be one dimensional, got shape {arr.shape}")
    if length is not None and arr.size != length:
        raise ConfigurationError(f"{name} must have length {length}, got {arr.size}")
    return arr


def check_finite_array(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return arr
