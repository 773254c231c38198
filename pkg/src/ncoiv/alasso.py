"""Adaptive-LASSO selection on the screening system.

The risk psi(g) = (b - A g)' A^-1 (b - A g) expands to
b'A^-1 b - 2 b'g + g'A g for symmetric positive definite A, so n * psi plus a
weighted L1 term is a convex quadratic that cyclic coordinate descent with
soft thresholding minimizes exactly one coordinate at a time.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, EstimationError, NumericalWarning
from .selection import SelectionSystem, solve_gamma

__all__ = [
    "CDResult",
    "PenaltySpec",
    "adaptive_weights",
    "coordinate_descent",
    "fit_alasso",
    "kkt_residual",
    "risk",
    "risk_gradient",
    "risk_weight",
    "selected_set",
    "soft_threshold",
]

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
PD_RTOL = 1e-10


@dataclass(frozen=True)
class PenaltySpec:
    lambda_n: float
    delta: float
    xi: np.ndarray

    def __post_init__(self) -> None:
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")
        if np.any(~np.isfinite(self.xi)) or np.any(np.asarray(self.xi) <= 0):
            raise ValueError("adaptive weights must be positive and finite")


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def adaptive_weights(gamma_pilot: np.ndarray, delta: float) -> np.ndarray:
    """xi_k = 1 / max(|pilot_k|, 1e-8)^delta."""
    g = np.maximum(np.abs(np.asarray(gamma_pilot, dtype=float)), WEIGHT_FLOOR)
    return 1.0 / g**delta


def risk_weight(a_bar: np.ndarray) -> np.ndarray:
    """Inverse of ``a_bar``, or its pseudo-inverse on the positive eigenspace.

    The fallback fires when the smallest eigenvalue is below 1e-10 * ||a_bar||
    and is reported with a NumericalWarning.
    """
    a = 0.5 * (a_bar + a_bar.T)
    ev, vec = np.linalg.eigh(a)
    cut = PD_RTOL * max(np.abs(ev).max(), np.finfo(float).tiny)
    if ev.min() > cut:
        return np.linalg.inv(a)
    if ev.max() <= cut:
        raise EstimationError("risk weight indefinite: screening matrix has no positive eigenvalues")
    warnings.warn("risk weight indefinite: using pseudo-inverse on the positive eigenspace",
                  NumericalWarning, stacklevel=2)
    keep = ev > cut
    return (vec[:, keep] / ev[keep]) @ vec[:, keep].T


def risk(gamma: np.ndarray, sys: SelectionSystem) -> float:
    r = sys.b_bar - sys.a_bar @ gamma
    return float(r @ risk_weight(sys.a_bar) @ r)


def _quadratic(sys: SelectionSystem) -> tuple[np.ndarray, np.ndarray, float]:
    """(H, g, c) with psi(gamma) = c - 2 g'gamma + gamma'H gamma."""
    P = risk_weight(sys.a_bar)
    A, b = sys.a_bar, sys.b_bar
    H = A.T @ P @ A
    return 0.5 * (H + H.T), A.T @ P @ b, float(b @ P @ b)


def risk_gradient(gamma: np.ndarray, sys: SelectionSystem) -> np.ndarray:
    """Gradient of n * psi at ``gamma``."""
    H, g, _ = _quadratic(sys)
    return 2.0 * sys.n * (H @ gamma - g)


@dataclass
class CDResult:
    gamma: np.ndarray
    objective: list[float]
    sweeps: int
    kkt: float


def _objective(gamma, H, g, c, n, pen):
    return n * (c - 2 * g @ gamma + gamma @ H @ gamma) + pen @ np.abs(gamma)


def kkt_residual(gamma: np.ndarray, H: np.ndarray, g: np.ndarray, n: int, pen: np.ndarray) -> float:
    """Largest violation of the subgradient optimality conditions."""
    grad = 2.0 * n * (H @ gamma - g)
    nz = gamma != 0
    viol = np.where(nz, np.abs(grad + pen * np.sign(gamma)), np.maximum(np.abs(grad) - pen, 0.0))
    return float(viol.max()) if viol.size else 0.0


def coordinate_descent(
    H: np.ndarray,
    g: np.ndarray,
    c: float,
    n: int,
    pen: np.ndarray,
    *,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
    kkt_tol: float = 1e-8,
) -> CDResult:
    """Minimize n (c - 2 g'x + x'H x) + sum_k pen_k |x_k|.

    Each coordinate update is the exact soft-threshold minimizer.
    """
    K = g.shape[0]
    x = np.zeros(K) if x0 is None else np.array(x0, dtype=float)
    half = pen / (2.0 * n)
    obj = [_objective(x, H, g, c, n, pen)]
    scale = 2.0 * n * max(1.0, float(np.abs(g).max(initial=0.0)), float(np.abs(H).max(initial=0.0)))
    for sweep in range(1, max_sweeps + 1):
        biggest = 0.0
        for k in range(K):
            hkk = H[k, k]
            old = x[k]
            if hkk <= 0:
                new = 0.0
            else:
                partial = g[k] - H[k] @ x + hkk * old
                new = float(soft_threshold(partial, half[k]) / hkk)
            x[k] = new
            biggest = max(biggest, abs(new - old))
        obj.append(_objective(x, H, g, c, n, pen))
        if biggest < tol:
            break
    else:
        raise ConvergenceError("coordinate descent did not converge", kkt_residual(x, H, g, n, pen))
    kkt = kkt_residual(x, H, g, n, pen)
    if kkt > kkt_tol * scale:
        raise ConvergenceError("KKT conditions not met on exit", kkt)
    return CDResult(gamma=x, objective=obj, sweeps=sweep, kkt=kkt)


def fit_alasso(sys: SelectionSystem, pen: PenaltySpec, **kwargs) -> np.ndarray:
    """argmin_gamma n psi(gamma) + lambda_n sum_k xi_k |gamma_k|.

    Starts from the unpenalized solution when it exists.
    """
    H, g, c = _quadratic(sys)
    try:
        x0 = solve_gamma(sys)
    except EstimationError:
        x0 = None
    res = coordinate_descent(H, g, c, sys.n, pen.lambda_n * np.asarray(pen.xi, dtype=float), x0=x0, **kwargs)
    log.debug("alasso converged in %d sweeps, kkt=%.2e", res.sweeps, res.kkt)
    return res.gamma


def selected_set(gamma_star: np.ndarray, tol: float = 1e-8) -> tuple[int, ...]:
    return tuple(int(k) for k in np.flatnonzero(np.abs(gamma_star) > tol))
