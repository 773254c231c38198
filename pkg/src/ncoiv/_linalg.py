"""Small linear-algebra helpers with explicit singularity checks."""

from __future__ import annotations

import numpy as np

from .errors import EstimationError

SINGULAR_RTOL = 1e-10


def _scale(a: np.ndarray) -> float:
    d = np.abs(np.diag(a))
    s = float(d.max()) if d.size else 0.0
    if s == 0.0:
        s = float(np.abs(a).max()) if a.size else 0.0
    return s


def is_singular(a: np.ndarray, rtol: float = SINGULAR_RTOL) -> bool:
    a = np.atleast_2d(a)
    if a.size == 0:
        return False
    s = np.linalg.svd(a, compute_uv=False)
    return bool(s[-1] <= rtol * max(_scale(a), np.finfo(float).tiny))


def solve(a: np.ndarray, b: np.ndarray, what: str, rtol: float = SINGULAR_RTOL) -> np.ndarray:
    """Solve ``a x = b`` after an SVD rank check.

    The matrix counts as singular when its smallest singular value is at most
    ``rtol`` times its largest absolute diagonal entry. ``what`` is the error text.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] == 0:
        return np.zeros_like(np.asarray(b, dtype=float))
    if is_singular(a, rtol):
        raise EstimationError(what)
    return np.linalg.solve(a, b)


def inv(a: np.ndarray, what: str, rtol: float = SINGULAR_RTOL) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return solve(a, np.eye(a.shape[0]), what, rtol)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)
