"""Small dense linear-algebra and finite-difference helpers."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, ModelInvariantError


def as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def as_square(a, n: int | None = None, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    if n is not None and m.shape[0] != n:
        raise DimensionError(f"{name} must be {n}x{n}, got {m.shape}")
    return m


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def skew(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - np.swapaxes(a, -1, -2))


def lam_min(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(a))[0])


def lam_max(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(a))[-1])


def sigma_max(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2))


def upper_cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Upper-triangular ``U`` with ``a = U.T @ U``."""
    try:
        return np.linalg.cholesky(sym(a)).T
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError(f"{what} is not positive definite") from exc


def reverse_cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Upper-triangular ``T`` with positive diagonal and ``a = T @ T.T``."""
    flipped = sym(a)[::-1, ::-1]
    try:
        low = np.linalg.cholesky(flipped)
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError(f"{what} is not positive definite") from exc
    return np.ascontiguousarray(low[::-1, ::-1])


def fd_step(x: float, rel: float = 1e-6) -> float:
    return rel * (1.0 + abs(x))


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = fd_step(x[i], rel)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    """Jacobian with ``J[i, j] = d f_i / d x_j`` by central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = fd_step(x[j], rel)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_matrix_partials(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    """Stack of ``d F / d x_i`` for a matrix-valued ``F``; shape ``(n, *F.shape)``."""
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        h = fd_step(x[i], rel)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.stack(out)
