"""Input validation helpers shared by the public API."""

import numbers

import numpy as np


def check_resolution(m):
    """Return ``m`` as a positive int, raising ``ValueError`` otherwise."""
    if isinstance(m, bool) or not isinstance(m, numbers.Integral):
        raise TypeError(f"resolution must be an integer, got {type(m).__name__}")
    if m < 1:
        raise ValueError(f"resolution must be >= 1, got {m}")
    return int(m)


def check_nonnegative(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite nonnegative number, got {value}")
    return value


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {value}")
    return value


def check_sites(sites):
    """Coerce ``sites`` to an ``(n, 2)`` int64 array of lattice coordinates."""
    arr = np.asarray(sites)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of sites, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("site coordinates must be integers")
    return arr.astype(np.int64, copy=False)


def check_points(points):
    """Coerce ``points`` to an ``(n, 2)`` float array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of points, got shape {arr.shape}")
    return arr


def check_seed(seed):
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise TypeError("seed must be an integer")
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return int(seed)
