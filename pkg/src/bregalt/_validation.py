"""Input validation helpers."""

from __future__ import annotations

import numpy as np

from .exceptions import DomainError


def check_vector(x, name="x", dim=None, copy=False) -> np.ndarray:
    """Return ``x`` as a finite 1-D float array, optionally of length ``dim``."""
    arr = np.array(x, dtype=float, ndmin=1) if copy else np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


def check_points(X, name="X", dim=None) -> np.ndarray:
    """Return ``X`` as a finite 2-D float array of shape (n, dim)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


def check_probability_vector(p, name="p", tol=1e-12, strict=True) -> np.ndarray:
    p = check_vector(p, name)
    if strict and np.any(p <= 0):
        raise DomainError(f"{name} must be strictly positive")
    if np.any(p < 0):
        raise DomainError(f"{name} must be nonnegative")
    if abs(p.sum() - 1.0) > tol * max(1, p.size):
        raise ValueError(f"{name} must sum to one, got {p.sum()!r}")
    return p


def check_positive_int(n, name="n") -> int:
    if int(n) != n or n < 1:
        raise ValueError(f"{name} must be a positive integer, got {n!r}")
    return int(n)
