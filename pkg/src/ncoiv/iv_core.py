"""Moment algebra, optimal-score IV, two-step GMM and regularity diagnostics.

All formulas use the general covariate Gram matrix; nothing assumes the
covariates are pre-whitened.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _linalg as la
from .data import Dataset
from .errors import EstimationError, NumericalWarning

__all__ = [
    "EfficiencyReport",
    "GMMResult",
    "MomentSet",
    "Regularity",
    "check_regularity",
    "cross_moments",
    "gmm_estimate",
    "iv_asymptotic_cov",
    "gmm_asymptotic_cov",
    "iv_estimate",
    "omega_opt",
    "optimal_gamma",
    "residualize_on_x",
    "sandwich_variance",
]

C2_MESSAGE = "C.2 violated: a linear combination of IVs does not work (instruments irrelevant)"


@dataclass(frozen=True)
class MomentSet:
    """Sample (or population) second moments of (Z, X, T, Y)."""

    s_zz: np.ndarray
    s_zx: np.ndarray
    s_xx: np.ndarray
    s_zt: np.ndarray
    s_xt: np.ndarray
    s_zy: np.ndarray
    s_xy: np.ndarray
    s_tt: float
    s_ty: float
    s_yy: float
    n: int

    @property
    def K(self) -> int:
        return self.s_zz.shape[0]

    @property
    def p(self) -> int:
        return self.s_xx.shape[0]

    def gram(self) -> np.ndarray:
        """Stacked Gram matrix of (Z, X, T, Y)."""
        zt, xt = self.s_zt[:, None], self.s_xt[:, None]
        zy, xy = self.s_zy[:, None], self.s_xy[:, None]
        return np.block([
            [self.s_zz, self.s_zx, zt, zy],
            [self.s_zx.T, self.s_xx, xt, xy],
            [zt.T, xt.T, np.array([[self.s_tt]]), np.array([[self.s_ty]])],
            [zy.T, xy.T, np.array([[self.s_ty]]), np.array([[self.s_yy]])],
        ])

    def is_psd(self, rtol: float = 1e-10) -> bool:
        g = self.gram()
        ev = np.linalg.eigvalsh(la.symmetrize(g))
        return bool(ev.min() >= -rtol * max(1.0, np.abs(ev).max()))

    def restrict_z(self, cols) -> MomentSet:
        cols = np.asarray(list(cols), dtype=int)
        return MomentSet(self.s_zz[np.ix_(cols, cols)], self.s_zx[cols], self.s_xx,
                         self.s_zt[cols], self.s_xt, self.s_zy[cols], self.s_xy,
                         self.s_tt, self.s_ty, self.s_yy, self.n)

    @classmethod
    def from_gram(cls, gram: np.ndarray, K: int, p: int, n: int = 0) -> MomentSet:
        """Split a (K+p+2)-square Gram matrix ordered (Z, X, T, Y)."""
        g = la.symmetrize(np.asarray(gram, dtype=float))
        z, x, t, y = slice(0, K), slice(K, K + p), K + p, K + p + 1
        return cls(g[z, z], g[z, x], g[x, x], g[z, t], g[x, t], g[z, y], g[x, y],
                   float(g[t, t]), float(g[t, y]), float(g[y, y]), n)


def cross_moments(data: Dataset) -> MomentSet:
    n = data.n
    z, x, t, y = data.z, data.x, data.t, data.y
    return MomentSet(
        s_zz=la.symmetrize(z.T @ z / n),
        s_zx=z.T @ x / n,
        s_xx=la.symmetrize(x.T @ x / n),
        s_zt=z.T @ t / n,
        s_xt=x.T @ t / n,
        s_zy=z.T @ y / n,
        s_xy=x.T @ y / n,
        s_tt=float(t @ t / n),
        s_ty=float(t @ y / n),
        s_yy=float(y @ y / n),
        n=n,
    )


def residualize_on_x(mom: MomentSet) -> tuple[np.ndarray, np.ndarray]:
    """Partial the covariates out of the Z-Gram and the Z-T cross moment.

    Returns ``(schur_zz, reduced_zt)``:
    E[ZZ'] - E[ZX']E[XX']^-1 E[XZ'] and E[ZT] - E[ZX']E[XX']^-1 E[XT].
    """
    if mom.p == 0:
        return mom.s_zz.copy(), mom.s_zt.copy()
    rhs = np.column_stack([mom.s_zx.T, mom.s_xt])
    coef = la.solve(mom.s_xx, rhs, "covariate Gram matrix E[XX'] is singular (collinear covariate block)")
    schur = mom.s_zz - mom.s_zx @ coef[:, :-1]
    reduced = mom.s_zt - mom.s_zx @ coef[:, -1]
    return la.symmetrize(schur), reduced


@dataclass(frozen=True)
class Regularity:
    min_eig_schur: float
    c2_norm: float
    tol: float

    @property
    def c1_ok(self) -> bool:
        return self.min_eig_schur > self.tol

    @property
    def c2_ok(self) -> bool:
        return self.c2_norm > self.tol

    @property
    def messages(self) -> list[str]:
        out = []
        if not self.c1_ok:
            out.append("C.1 violated: residualized instrument Gram matrix is singular")
        if not self.c2_ok:
            out.append(C2_MESSAGE)
        return out

    def to_dict(self) -> dict:
        return {"C1_min_eig": self.min_eig_schur, "C1_pass": self.c1_ok,
                "C2_norm": self.c2_norm, "C2_pass": self.c2_ok,
                "tol": self.tol, "messages": self.messages}


def check_regularity(mom: MomentSet, tol: float = 1e-10) -> Regularity:
    try:
        schur, reduced = residualize_on_x(mom)
    except EstimationError:
        return Regularity(float("-inf"), 0.0, tol)
    min_eig = float(np.linalg.eigvalsh(schur).min())
    return Regularity(min_eig, float(np.linalg.norm(reduced)), tol)


def optimal_gamma(mom: MomentSet) -> np.ndarray:
    """Variance-minimizing instrument weights.

    Solves schur_zz @ gamma = reduced_zt, which is the Z block of the least
    squares regression of T on (Z, X).
    """
    schur, reduced = residualize_on_x(mom)
    gamma = la.solve(schur, reduced, "C.1 violated: residualized instrument Gram matrix is singular")
    scale = max(np.sqrt(mom.s_tt * np.abs(np.diag(schur)).max()), np.finfo(float).tiny)
    if np.linalg.norm(reduced) <= 1e-10 * scale:
        warnings.warn(C2_MESSAGE, NumericalWarning, stacklevel=2)
    return gamma


def _score_blocks(data: Dataset, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = data.z @ np.asarray(gamma, dtype=float)
    w = np.column_stack([h, data.x])
    d = np.column_stack([data.t, data.x])
    return w, d


_WEAK = "weak or irrelevant score: estimating-equation matrix is singular (C.2 fails at this gamma)"


def iv_estimate(data: Dataset, gamma: np.ndarray) -> np.ndarray:
    """Solve sum_i (gamma'z_i, x_i')' (y_i - t_i b_t - x_i'b_x) = 0 for beta."""
    w, d = _score_blocks(data, gamma)
    gam = w.T @ d / data.n
    return la.solve(gam, w.T @ data.y / data.n, _WEAK)


def sandwich_variance(data: Dataset, beta: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, float]:
    """Plug-in sandwich covariance of sqrt(n)(beta_hat - beta).

    Returns ``(cov, sigma2)``; standard errors are sqrt(diag(cov) / n).
    """
    w, d = _score_blocks(data, gamma)
    n = data.n
    u = data.y - d @ beta
    g = w * u[:, None]
    meat = g.T @ g / n
    bread_inv = la.inv(w.T @ d / n, _WEAK)
    cov = la.symmetrize(bread_inv @ meat @ bread_inv.T)
    return cov, float(u @ u / n)


@dataclass(frozen=True)
class EfficiencyReport:
    omega_opt: float
    avar_beta_t: float
    schur_zz: np.ndarray
    reduced_zt: np.ndarray
    min_eig_schur: float
    c2_norm: float
    irrelevant: bool

    def to_dict(self) -> dict:
        return {"omega_opt": self.omega_opt, "avar_beta_t": self.avar_beta_t,
                "min_eig_schur": self.min_eig_schur, "c2_norm": self.c2_norm,
                "irrelevant": self.irrelevant}


def omega_opt(mom: MomentSet, sigma2: float, tol: float = 1e-10) -> EfficiencyReport:
    schur, reduced = residualize_on_x(mom)
    quad = la.solve(schur, reduced, "C.1 violated: residualized instrument Gram matrix is singular")
    omega = float(reduced @ quad)
    irrelevant = omega <= tol
    if irrelevant:
        warnings.warn("irrelevant instruments: Omega_opt is zero", NumericalWarning, stacklevel=2)
    return EfficiencyReport(
        omega_opt=omega,
        avar_beta_t=sigma2 / omega if not irrelevant else float("inf"),
        schur_zz=schur,
        reduced_zt=reduced,
        min_eig_schur=float(np.linalg.eigvalsh(schur).min()),
        c2_norm=float(np.linalg.norm(reduced)),
        irrelevant=irrelevant,
    )


def iv_asymptotic_cov(mom: MomentSet, gamma: np.ndarray, sigma2: float) -> np.ndarray:
    """Gamma^-1 Sigma Gamma^-T for the score h = gamma'Z under homoskedastic errors."""
    g = np.asarray(gamma, dtype=float)
    gam = np.block([
        [np.array([[g @ mom.s_zt]]), (g @ mom.s_zx)[None, :]],
        [mom.s_xt[:, None], mom.s_xx],
    ])
    sig = sigma2 * np.block([
        [np.array([[g @ mom.s_zz @ g]]), (g @ mom.s_zx)[None, :]],
        [(g @ mom.s_zx)[:, None], mom.s_xx],
    ])
    gi = la.inv(gam, _WEAK)
    return gi @ sig @ gi.T


def gmm_asymptotic_cov(mom: MomentSet, sigma2: float) -> np.ndarray:
    """(G' S^-1 G)^-1 with the full instrument stack (Z, X) and homoskedastic S."""
    G = np.block([[mom.s_zt[:, None], mom.s_zx], [mom.s_xt[:, None], mom.s_xx]])
    S = sigma2 * np.block([[mom.s_zz, mom.s_zx], [mom.s_zx.T, mom.s_xx]])
    Si = la.inv(S, "instrument Gram matrix is singular")
    return la.inv(G.T @ Si @ G, "order condition fails")


@dataclass(frozen=True)
class GMMResult:
    beta: np.ndarray
    cov: np.ndarray
    sigma2: float
    n: int
    ridge: float = 0.0

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None) / self.n)


def gmm_estimate(data: Dataset, ridge: float = 0.0, weighting: str = "robust") -> GMMResult:
    """Two-step linear GMM with instruments (Z, X).

    Step one uses the identity weight. With ``weighting="robust"`` the second
    step weight is the inverse of the step-one moment covariance
    (1/n) sum q_i q_i' u_i^2; ``"homoskedastic"`` uses sigma^2 (1/n) sum q_i q_i'
    instead. ``ridge`` is added to the moment covariance diagonal when it is
    near-singular; a NumericalWarning is issued whenever it is used.
    """
    if weighting not in ("robust", "homoskedastic"):
        raise ValueError(f"unknown weighting {weighting!r}")
    n = data.n
    q = np.column_stack([data.z, data.x])
    d = np.column_stack([data.t, data.x])
    G = q.T @ d / n
    mbar = q.T @ data.y / n
    order = "order condition fails: G'WG is singular"

    beta1 = la.solve(G.T @ G, G.T @ mbar, order)

    def moment_cov(beta: np.ndarray) -> np.ndarray:
        u = data.y - d @ beta
        if weighting == "robust":
            g = q * u[:, None]
            S = g.T @ g / n
        else:
            S = (u @ u / n) * (q.T @ q / n)
        S = la.symmetrize(S)
        if ridge > 0:
            warnings.warn(f"GMM moment covariance ridge {ridge:g} applied", NumericalWarning, stacklevel=3)
            S = S + ridge * np.eye(S.shape[0])
        return S

    msg = "GMM moment covariance is singular; retry with a ridge (--gmm-ridge)"
    W = la.inv(moment_cov(beta1), msg)
    beta = la.solve(G.T @ W @ G, G.T @ W @ mbar, order)
    S2 = moment_cov(beta)
    cov = la.inv(G.T @ la.inv(S2, msg) @ G, order)
    u = data.y - d @ beta
    return GMMResult(beta=beta, cov=la.symmetrize(cov), sigma2=float(u @ u / n), n=n, ridge=ridge)
