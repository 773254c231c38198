"""Seeded Monte Carlo replications of the five-variable Gaussian design.

(T, Z1, Z21, U, Z22*) are jointly normal; Z22 = Z22* + 0.5 U is the invalid
candidate, Y = 0.8 + 0.8 T + U and the negative control is M = 1 + alpha U.
Replication ``r`` of base seed ``s`` draws from PCG64 seeded with
``SeedSequence([s, r])``, so any replication can be regenerated alone and
results do not depend on how replications are spread over workers.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset, TuningParams
from .errors import EstimationError
from .iv_core import cross_moments, gmm_estimate, iv_estimate, optimal_gamma
from .selection import estimate_with_selection, residual_auxiliary

__all__ = [
    "IV_STRENGTHS",
    "METHODS",
    "NCO_STRENGTHS",
    "Latent",
    "ScenarioConfig",
    "SummaryRow",
    "generate",
    "histogram_rows",
    "markdown_table",
    "population_moments",
    "run_monte_carlo",
    "simulate_estimates",
    "summarize",
    "tuning_sweep",
    "write_summary_csv",
]

IV_STRENGTHS = {"strong": (0.4, 0.4), "weak": (0.1, 0.3)}
NCO_STRENGTHS = {"strong": 0.6, "weak": 0.2}
VALID = (0, 1)  # Z1, Z21
Z_NAMES = ("Z1", "Z21", "Z22")
FAIL_FLAG_RATE = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    n: int
    iv_strength: str = "strong"
    nco_strength: str = "strong"
    reps: int = 1000
    seed: int = 20200904
    beta_t_true: float = 0.8
    intercept_true: float = 0.8
    rho_tu: float = 0.4
    invalid_load: float = 0.5
    intercept: bool = True
    zero_noise: bool = False

    def __post_init__(self) -> None:
        if self.iv_strength not in IV_STRENGTHS:
            raise ValueError(f"iv_strength must be one of {sorted(IV_STRENGTHS)}")
        if self.nco_strength not in NCO_STRENGTHS:
            raise ValueError(f"nco_strength must be one of {sorted(NCO_STRENGTHS)}")
        if self.n < 3:
            raise ValueError("n must be at least 3")
        if self.reps < 0:
            raise ValueError("reps must be nonnegative")
        if np.linalg.eigvalsh(self.sigma).min() <= 0:
            raise ValueError("scenario covariance matrix is not positive definite")

    @property
    def sigma(self) -> np.ndarray:
        """Covariance of (T, Z1, Z21, U, Z22*)."""
        s1, s21 = IV_STRENGTHS[self.iv_strength]
        s = np.eye(5)
        s[0, 1] = s[1, 0] = s1
        s[0, 2] = s[2, 0] = s21
        s[0, 3] = s[3, 0] = self.rho_tu
        return s

    @property
    def alpha_mu(self) -> float:
        return NCO_STRENGTHS[self.nco_strength]

    @classmethod
    def from_name(cls, scenario: str, **kw) -> ScenarioConfig:
        """``scenario`` is e.g. ``"strong-weak"`` (IV strength, then NCO strength)."""
        try:
            iv, nco = scenario.split("-")
        except ValueError:
            raise ValueError(f"bad scenario name {scenario!r}") from None
        return cls(iv_strength=iv, nco_strength=nco, **kw)


SCENARIOS = tuple(f"{a}-{b}" for a in IV_STRENGTHS for b in NCO_STRENGTHS)


@dataclass(frozen=True)
class Latent:
    """Diagnostics sidecar; never passed to an estimator."""

    u: np.ndarray


def rng_for(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(rep)])))


def generate(cfg: ScenarioConfig, rep: int) -> tuple[Dataset, Latent]:
    rng = rng_for(cfg.seed, rep)
    chol = np.linalg.cholesky(cfg.sigma)
    draws = rng.standard_normal((cfg.n, 5)) @ chol.T
    t, z1, z21, u, z22s = draws.T
    if cfg.zero_noise:
        u = np.zeros_like(u)
    z22 = z22s + cfg.invalid_load * u
    y = cfg.intercept_true + cfg.beta_t_true * t + u
    m = 1.0 + cfg.alpha_mu * u
    x = np.ones((cfg.n, 1)) if cfg.intercept else np.zeros((cfg.n, 0))
    data = Dataset(
        y=y, t=t, x=x, z=np.column_stack([z1, z21, z22]), m=m,
        intercept=cfg.intercept,
        x_names=("(intercept)",) if cfg.intercept else (),
        z_names=Z_NAMES,
    )
    return data, Latent(u=u)


def population_moments(cfg: ScenarioConfig):
    """Exact second moments of (Z1, Z21, Z22, [1], T, Y) implied by the design."""
    from .iv_core import MomentSet

    # rows express (Z1, Z21, Z22, T, Y) as linear maps of (T, Z1, Z21, U, Z22*) plus a constant
    L = np.zeros((5, 5))
    L[0, 1] = L[1, 2] = 1.0
    L[2, 4], L[2, 3] = 1.0, cfg.invalid_load
    L[3, 0] = 1.0
    L[4, 0], L[4, 3] = cfg.beta_t_true, 1.0
    const = np.array([0, 0, 0, 0, cfg.intercept_true])
    cov = L @ cfg.sigma @ L.T
    if cfg.intercept:
        # augment with the constant regressor: E[ab'] = cov + mu mu'
        mu = np.concatenate([const[:3], [1.0], const[3:]])
        big = np.zeros((6, 6))
        idx = [0, 1, 2, 4, 5]
        big[np.ix_(idx, idx)] = cov
        gram = big + np.outer(mu, mu)
        return MomentSet.from_gram(gram, K=3, p=1)
    gram = cov + np.outer(const, const)
    return MomentSet.from_gram(gram, K=3, p=0)


# ---- estimators run per replication -------------------------------------------------

def _proposed(data: Dataset, tuning: TuningParams) -> float:
    return estimate_with_selection(data.select_z(VALID), data.m, tuning, penalize=False).beta_t


def _proposed_alasso(data: Dataset, tuning: TuningParams) -> float:
    return estimate_with_selection(data, data.m, tuning, penalize=True).beta_t


def _gmm_known_valid(data: Dataset, tuning: TuningParams) -> float:
    return float(gmm_estimate(data.select_z(VALID)).beta[0])


def _iv_all(data: Dataset, tuning: TuningParams) -> float:
    return float(iv_estimate(data, optimal_gamma(cross_moments(data)))[0])


def _oracle_valid(data: Dataset, tuning: TuningParams) -> float:
    sub = data.select_z(VALID)
    return float(iv_estimate(sub, optimal_gamma(cross_moments(sub)))[0])


def _residual_aux(data: Dataset, tuning: TuningParams) -> float:
    eps = residual_auxiliary(data, 0)
    return estimate_with_selection(data, eps, tuning).beta_t


METHODS: dict[str, Callable[[Dataset, TuningParams], float]] = {
    "proposed": _proposed,
    "proposed+alasso": _proposed_alasso,
    "gmm_known_valid": _gmm_known_valid,
    "iv_all_candidates": _iv_all,
    "oracle_valid": _oracle_valid,
    "residual_auxiliary": _residual_aux,
}

ALIASES = {
    "gmm": "gmm_known_valid",
    "proposed-alasso": "proposed+alasso",
    "alasso": "proposed+alasso",
    "naive": "iv_all_candidates",
    "oracle": "oracle_valid",
    "residual-aux": "residual_auxiliary",
}


def canonical_method(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return name


def _run_block(args) -> tuple[np.ndarray, Counter]:
    cfg, methods, tuning, reps = args
    out = np.full((len(reps), len(methods)), np.nan)
    seen: Counter = Counter()
    for i, rep in enumerate(reps):
        data, _ = generate(cfg, rep)
        for j, name in enumerate(methods):
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                try:
                    out[i, j] = METHODS[name](data, tuning)
                except (EstimationError, np.linalg.LinAlgError):
                    pass
            for w in caught:
                seen[f"{name}: {w.message}"] += 1
    return out, seen


@dataclass
class SimulationOutput:
    methods: tuple[str, ...]
    estimates: np.ndarray  # reps x methods, NaN marks a failed replication
    warnings: Counter = field(default_factory=Counter)

    def column(self, method: str) -> np.ndarray:
        return self.estimates[:, self.methods.index(canonical_method(method))]


def simulate_estimates(
    cfg: ScenarioConfig,
    methods: Sequence[str],
    tuning: TuningParams | None = None,
    jobs: int = 1,
) -> SimulationOutput:
    methods = tuple(canonical_method(m) for m in methods)
    tuning = tuning or TuningParams.for_sample_size(cfg.n)
    reps = list(range(cfg.reps))
    if not reps:
        return SimulationOutput(methods, np.zeros((0, len(methods))))
    jobs = max(1, min(jobs, len(reps)))
    blocks = [reps[i::jobs] for i in range(jobs)]
    tasks = [(cfg, methods, tuning, b) for b in blocks]
    if jobs == 1:
        results = [_run_block(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_block, tasks))
    est = np.full((len(reps), len(methods)), np.nan)
    seen: Counter = Counter()
    for block, (vals, counts) in zip(blocks, results):
        est[block] = vals
        seen.update(counts)
    return SimulationOutput(methods, est, seen)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    mean: float
    sd: float
    median: float
    min: float
    max: float
    rmse: float
    n_ok: int
    n_failed: int
    grid_param: str | None = None
    grid_value: float | None = None

    @property
    def range(self) -> tuple[float, float]:
        return (self.min, self.max)

    @property
    def flagged(self) -> bool:
        total = self.n_ok + self.n_failed
        return total > 0 and self.n_failed / total > FAIL_FLAG_RATE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flagged"] = self.flagged
        return d


def summarize(method: str, estimates: np.ndarray, truth: float = 0.8, **grid) -> SummaryRow:
    est = np.asarray(estimates, dtype=float)
    ok = est[np.isfinite(est)]
    failed = int(est.size - ok.size)
    if ok.size == 0:
        nan = float("nan")
        return SummaryRow(method, nan, nan, nan, nan, nan, nan, 0, failed, **grid)
    return SummaryRow(
        method=method,
        mean=float(ok.mean()),
        sd=float(ok.std(ddof=1)) if ok.size > 1 else 0.0,
        median=float(np.median(ok)),
        min=float(ok.min()),
        max=float(ok.max()),
        rmse=float(np.sqrt(np.mean((ok - truth) ** 2))),
        n_ok=int(ok.size),
        n_failed=failed,
        **grid,
    )


def run_monte_carlo(
    cfg: ScenarioConfig,
    methods: Sequence[str],
    tuning: TuningParams | None = None,
    jobs: int = 1,
) -> list[SummaryRow]:
    out = simulate_estimates(cfg, methods, tuning, jobs)
    if out.estimates.shape[0] == 0:
        return []
    return [summarize(m, out.estimates[:, j], cfg.beta_t_true) for j, m in enumerate(out.methods)]


SWEEP_PARAMS = {
    "kappa2n": "kappa2n",
    "tau": "tau_n",
    "w": "w_threshold",
    "delta": "delta",
    "lambda": "lambda_n",
}
KAPPA1_REFUSAL = (
    "kappa1 is not swept: a proportion kappa2n/kappa1 is more important, "
    "so vary kappa2n with kappa1 fixed instead"
)


def tuning_sweep(
    cfg: ScenarioConfig,
    param: str,
    values: Iterable[float],
    base: TuningParams | None = None,
    method: str = "proposed+alasso",
    jobs: int = 1,
) -> list[SummaryRow]:
    """One summary row per grid value, every other constant held at ``base``."""
    if param == "kappa1":
        raise ValueError(KAPPA1_REFUSAL)
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    base = base or TuningParams.for_sample_size(cfg.n)
    method = canonical_method(method)
    rows = []
    for v in sorted(float(v) for v in values):
        tuning = replace(base, **{SWEEP_PARAMS[param]: v})
        out = simulate_estimates(cfg, [method], tuning, jobs)
        rows.append(summarize(method, out.estimates[:, 0], cfg.beta_t_true,
                              grid_param=param, grid_value=v))
    return rows


# ---- reporting ------------------------------------------------------------------

CSV_FIELDS = ["method", "grid_param", "grid_value", "mean", "sd", "median", "min", "max",
              "rmse", "n_ok", "n_failed", "flagged"]


def write_summary_csv(rows: Sequence[SummaryRow], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = r.to_dict()
        w.writerow({k: repr(d[k]) if isinstance(d[k], float) else d[k] for k in CSV_FIELDS})


def _f3(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.3f}"


def markdown_table(rows: Sequence[SummaryRow]) -> str:
    grid = any(r.grid_param for r in rows)
    head = (["Parameter"] if grid else []) + ["Method", "Mean(SD)", "Median(Range)", "RMSE", "Failed"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [f"{r.grid_param}={r.grid_value:g}"] if grid else []
        cells += [
            r.method,
            f"{_f3(r.mean)}({_f3(r.sd)})",
            f"{_f3(r.median)}({_f3(r.min)}-{_f3(r.max)})",
            _f3(r.rmse),
            f"{r.n_failed}{' (flagged)' if r.flagged else ''}",
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def histogram_rows(out: SimulationOutput, bins: int = 50) -> list[dict]:
    rows = []
    for j, m in enumerate(out.methods):
        est = out.estimates[:, j]
        est = est[np.isfinite(est)]
        if est.size == 0:
            continue
        lo, hi = float(est.min()), float(est.max())
        counts, edges = np.histogram(est, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, hi + 0.5))
        for c, a, b in zip(counts, edges[:-1], edges[1:]):
            rows.append({"method": m, "bin_left": float(a), "bin_right": float(b), "count": int(c)})
    return rows


def default_jobs() -> int:
    return os.cpu_count() or 1
