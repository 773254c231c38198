"""Screening of invalid instruments with a negative control outcome.

Each candidate Z_k gets a smooth validity weight from its sample covariance
with the (centered) negative control outcome. The weights enter a ridge-like
linear system whose solution gives the instrument weights gamma; candidates
that look invalid are pulled towards kappa2n / kappa1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import _linalg as la
from .data import Dataset, EstimateResult, TuningParams, center_nco
from .errors import EstimationError, SchemaError
from .iv_core import (
    MomentSet,
    check_regularity,
    cross_moments,
    iv_estimate,
    residualize_on_x,
    sandwich_variance,
)

__all__ = [
    "ScreenWeights",
    "SelectionSystem",
    "assemble_system",
    "auxiliary_covariances",
    "build_system",
    "estimate_with_selection",
    "residual_auxiliary",
    "resolve_tuning",
    "screen_weights",
    "smooth_weight",
    "solve_gamma",
    "tau_schedule",
]

SELECT_THRESHOLD = 0.5


def auxiliary_covariances(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Per-candidate sample cross moment (1/n) sum_i z_ik m_i."""
    z = np.asarray(z, dtype=float)
    z = z.reshape(-1, 1) if z.ndim == 1 else z
    m = np.asarray(m, dtype=float)
    return z.T @ m / z.shape[0]


def smooth_weight(w_hat, w: float, tau: float):
    """Phi((w_hat + w)/tau) * Phi((w - w_hat)/tau), a soft indicator of |w_hat| <= w."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    w_hat = np.asarray(w_hat, dtype=float)
    out = ndtr((w_hat + w) / tau) * ndtr((w - w_hat) / tau)
    return float(out) if out.ndim == 0 else out


def tau_schedule(n: int, c: float = 0.01) -> float:
    """Bandwidth with tau^2 = c / log n."""
    if n < 2:
        raise ValueError("tau_schedule needs n >= 2")
    return math.sqrt(c / math.log(n))


def resolve_tuning(tuning: TuningParams, n: int, tau_c: float = 0.01) -> TuningParams:
    """Fill unset kappa2n / tau_n from the sample size.

    kappa2n defaults to 0.01 * 200 / n, tau_n to :func:`tau_schedule`.
    """
    kappa2n = tuning.kappa2n if tuning.kappa2n is not None else 0.01 * 200.0 / n
    tau = tuning.tau_n if tuning.tau_n is not None else tau_schedule(n, tau_c)
    return replace(tuning, kappa2n=kappa2n, tau_n=tau)


@dataclass(frozen=True)
class ScreenWeights:
    w_hat: np.ndarray
    i_tau: np.ndarray

    @property
    def i_bar(self) -> np.ndarray:
        return 1.0 - self.i_tau


def screen_weights(z: np.ndarray, m: np.ndarray, w: float, tau: float) -> ScreenWeights:
    w_hat = auxiliary_covariances(z, m)
    return ScreenWeights(w_hat=w_hat, i_tau=np.atleast_1d(smooth_weight(w_hat, w, tau)))


@dataclass(frozen=True)
class SelectionSystem:
    a_bar: np.ndarray
    b_bar: np.ndarray
    weights: ScreenWeights
    tuning: TuningParams
    n: int

    @property
    def K(self) -> int:
        return self.b_bar.shape[0]


def assemble_system(mom: MomentSet, weights: ScreenWeights, tuning: TuningParams) -> SelectionSystem:
    """Build the weighted normal equations from moments and screening weights.

    Off-diagonal entries are schur[k, k'] I_k I_k'; the diagonal is
    schur[k, k] I_k + kappa1 (1 - I_k); the right-hand side is
    reduced[k] I_k + kappa2n (1 - I_k).
    """
    if tuning.kappa2n is None:
        raise ValueError("tuning must be resolved before assembling (kappa2n unset)")
    schur, reduced = residualize_on_x(mom)
    i = weights.i_tau
    ibar = 1.0 - i
    a = schur * np.outer(i, i)
    np.fill_diagonal(a, np.diag(schur) * i + tuning.kappa1 * ibar)
    b = reduced * i + tuning.kappa2n * ibar
    return SelectionSystem(a_bar=la.symmetrize(a), b_bar=b, weights=weights, tuning=tuning, n=mom.n)


def build_system(data: Dataset, m: np.ndarray, tuning: TuningParams) -> SelectionSystem:
    tuning = resolve_tuning(tuning, data.n)
    weights = screen_weights(data.z, center_nco(m), tuning.w_threshold, tuning.tau_n)
    return assemble_system(cross_moments(data), weights, tuning)


def solve_gamma(sys: SelectionSystem) -> np.ndarray:
    return la.solve(sys.a_bar, sys.b_bar, "screening system is singular (kappa1 = 0 with identification lost?)")


def residual_auxiliary(data: Dataset, valid_index: int) -> np.ndarray:
    """Residuals of the just-identified fit that uses only instrument ``valid_index``.

    They stand in for a negative control outcome when none is observed.
    """
    if not 0 <= valid_index < data.K:
        raise SchemaError(f"valid instrument index {valid_index} out of range 0..{data.K - 1}")
    w = np.column_stack([data.z[:, valid_index], data.x])
    d = np.column_stack([data.t, data.x])
    beta0 = la.solve(w.T @ d / data.n, w.T @ data.y / data.n, "declared valid IV is irrelevant")
    return data.y - d @ beta0


def estimate_with_selection(
    data: Dataset,
    m: np.ndarray | None,
    tuning: TuningParams,
    *,
    penalize: bool | None = None,
    method: str = "proposed",
) -> EstimateResult:
    """Screen candidates with ``m``, weight the survivors, solve for beta.

    The adaptive-LASSO step runs when ``penalize`` is true, or, if left None,
    whenever ``tuning.lambda_n > 0``.
    """
    from .alasso import PenaltySpec, adaptive_weights, fit_alasso, selected_set

    if m is None:
        raise SchemaError("a negative control outcome (or auxiliary residuals) is required for screening")
    tuning = resolve_tuning(tuning, data.n)
    stage = "screen"
    try:
        mc = center_nco(m)
        weights = screen_weights(data.z, mc, tuning.w_threshold, tuning.tau_n)
        stage = "build_system"
        sys = assemble_system(cross_moments(data), weights, tuning)
        stage = "solve_gamma"
        gamma = solve_gamma(sys)
        pilot = gamma
        if penalize is None:
            penalize = tuning.lambda_n > 0
        if penalize:
            stage = "alasso"
            pen = PenaltySpec(tuning.lambda_n, tuning.delta, adaptive_weights(pilot, tuning.delta))
            gamma = fit_alasso(sys, pen)
            selected = selected_set(gamma)
        else:
            selected = tuple(int(k) for k in np.flatnonzero(weights.i_tau >= SELECT_THRESHOLD))
        stage = "iv_estimate"
        beta = iv_estimate(data, gamma)
        stage = "sandwich_variance"
        cov, sigma2 = sandwich_variance(data, beta, gamma)
    except EstimationError as exc:
        if exc.stage:
            raise
        raise EstimationError(str(exc), stage=stage) from exc

    return EstimateResult(
        beta=beta,
        gamma=gamma,
        selected=selected,
        covariance=cov,
        std_errors=np.sqrt(np.clip(np.diag(cov), 0, None) / data.n),
        sigma2_hat=sigma2,
        diagnostics=check_regularity(cross_moments(data)),
        n=data.n,
        method=method,
        z_names=data.z_names,
        x_names=data.x_names,
        screen_weights=weights.i_tau,
        extra={
            "w_hat": dict(zip(data.z_names, map(float, weights.w_hat))),
            "gamma_pilot": dict(zip(data.z_names, map(float, pilot))),
            "tuning": tuning.to_dict(),
            "penalized": bool(penalize),
        },
    )
