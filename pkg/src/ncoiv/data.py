"""Observed-data and configuration records, CSV ingestion and validation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import SchemaError

__all__ = [
    "ColumnSchema",
    "Dataset",
    "EstimateResult",
    "TuningParams",
    "center_nco",
    "load_dataset",
    "save_dataset",
]


def center_nco(m: np.ndarray) -> np.ndarray:
    """Subtract the sample mean from a negative control outcome."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        raise SchemaError("negative control outcome is empty")
    if _is_centered(m):
        # already centered to rounding level: return as is so that centering is
        # exactly idempotent (needed for a bit-exact CSV round trip)
        return m.copy()
    out = m - m.mean()
    # a second pass removes the rounding residue of the first mean
    return out - out.mean()


def _is_centered(m: np.ndarray) -> bool:
    scale = float(np.abs(m).max())
    return abs(float(m.mean())) <= 4 * m.size * np.finfo(float).eps * scale


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An observed sample.

    ``x`` is n-by-p (p may be 0) and ``z`` is n-by-K. When ``intercept`` is
    true, column 0 of ``x`` is a constant one. ``m`` is the negative control
    outcome, stored centered. The latent confounder is never part of a Dataset.
    """

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    m: np.ndarray | None = None
    intercept: bool = False
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        t = np.asarray(self.t, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        x = x.reshape(n, -1) if x.ndim == 1 else x
        z = np.asarray(self.z, dtype=float)
        z = z.reshape(-1, 1) if z.ndim == 1 else z
        cols = {"y": y, "t": t, "x": x, "z": z}
        if self.m is not None:
            cols["m"] = np.asarray(self.m, dtype=float).reshape(-1)
        for name, col in cols.items():
            if col.shape[0] != n:
                raise SchemaError(f"column block {name!r} has {col.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(col)):
                raise SchemaError(f"column block {name!r} contains non-finite values")
        if z.shape[1] < 1:
            raise SchemaError("at least one instrument candidate is required")
        p = x.shape[1]
        if n < p + 2:
            raise SchemaError(f"n={n} too small for p={p} covariates (need n >= p + 2)")
        if self.intercept and (p == 0 or not np.all(x[:, 0] == 1.0)):
            raise SchemaError("intercept enabled but column 0 of x is not all ones")
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(p))
        z_names = tuple(self.z_names) or tuple(f"z{k + 1}" for k in range(z.shape[1]))
        if len(x_names) != p or len(z_names) != z.shape[1]:
            raise SchemaError("column name count does not match data width")
        set_ = object.__setattr__
        set_(self, "y", _frozen(y))
        set_(self, "t", _frozen(t))
        set_(self, "x", _frozen(x))
        set_(self, "z", _frozen(z))
        set_(self, "m", None if self.m is None else _frozen(center_nco(cols["m"])))
        set_(self, "x_names", x_names)
        set_(self, "z_names", z_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def K(self) -> int:
        return self.z.shape[1]

    def select_z(self, cols: Sequence[int]) -> Dataset:
        """Restrict the instrument candidates to ``cols``."""
        cols = list(cols)
        return replace(self, z=self.z[:, cols], z_names=tuple(self.z_names[k] for k in cols))

    def with_m(self, m: np.ndarray | None) -> Dataset:
        return replace(self, m=m)


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV header names to data roles."""

    y: str
    t: str
    z: tuple[str, ...]
    x: tuple[str, ...] = ()
    m: str | None = None
    intercept: bool = True

    @classmethod
    def from_flags(cls, y: str, t: str, z: str, x: str | None = None,
                   m: str | None = None, intercept: bool = True) -> ColumnSchema:
        split = lambda s: tuple(c.strip() for c in s.split(",") if c.strip()) if s else ()
        return cls(y=y, t=t, z=split(z), x=split(x), m=m or None, intercept=intercept)


def load_dataset(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read a headered CSV and assign columns to roles.

    Row numbers in error messages count data rows from 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]

    wanted = [schema.y, schema.t, *schema.x, *schema.z] + ([schema.m] if schema.m else [])
    if not schema.z:
        raise SchemaError("schema names no instrument columns")
    index = {}
    for name in wanted:
        if name not in header:
            raise SchemaError(f"missing column {name!r} (header has {', '.join(header)})")
        index[name] = header.index(name)

    values: dict[str, np.ndarray] = {}
    for name, j in index.items():
        col = np.empty(len(rows))
        for i, row in enumerate(rows, start=1):
            if j >= len(row):
                raise SchemaError(f"row {i} is short: no value for column {name!r}")
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise SchemaError(f"non-numeric value {cell!r} in column {name!r}, row {i}") from None
            if not math.isfinite(v):
                raise SchemaError(f"non-finite value {cell!r} in column {name!r}, row {i}")
            col[i - 1] = v
        values[name] = col

    n = len(rows)
    x_cols = [values[c] for c in schema.x]
    x_names = list(schema.x)
    if schema.intercept:
        x_cols.insert(0, np.ones(n))
        x_names.insert(0, "(intercept)")
    x = np.column_stack(x_cols) if x_cols else np.zeros((n, 0))
    if n < x.shape[1] + 2:
        raise SchemaError(f"n={n} rows is too few for {x.shape[1]} covariate columns (n <= p+1)")
    return Dataset(
        y=values[schema.y],
        t=values[schema.t],
        x=x,
        z=np.column_stack([values[c] for c in schema.z]),
        m=values[schema.m] if schema.m else None,
        intercept=schema.intercept,
        x_names=tuple(x_names),
        z_names=schema.z,
    )


def save_dataset(data: Dataset, path: str | Path) -> ColumnSchema:
    """Write ``data`` as CSV; returns the schema that reloads it unchanged.

    Floats are written with ``repr`` so the round trip is bit-exact.
    """
    x_names = [f"x_{j}" if nm == "(intercept)" else nm for j, nm in enumerate(data.x_names)]
    names = ["y", "t", *x_names, *data.z_names] + (["m"] if data.m is not None else [])
    cols = [data.y, data.t, *data.x.T, *data.z.T] + ([data.m] if data.m is not None else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
    return ColumnSchema(y="y", t="t", x=tuple(x_names), z=tuple(data.z_names),
                        m="m" if data.m is not None else None, intercept=False)


@dataclass(frozen=True)
class TuningParams:
    """Screening and penalty constants.

    ``kappa2n`` and ``tau_n`` may be left as None; they are then filled from
    the sample size by :func:`ncoiv.selection.resolve_tuning`.
    """

    kappa1: float = 10.0
    kappa2n: float | None = None
    tau_n: float | None = None
    w_threshold: float = 0.1
    lambda_n: float = 0.1
    delta: float = 1.0

    def __post_init__(self) -> None:
        if not self.kappa1 >= 0:
            raise ValueError("kappa1 must be nonnegative")
        if self.kappa2n is not None and not self.kappa2n >= 0:
            raise ValueError("kappa2n must be nonnegative")
        if self.tau_n is not None and not self.tau_n > 0:
            raise ValueError("tau_n must be positive")
        if not self.w_threshold > 0:
            raise ValueError("w_threshold must be positive")
        if not self.lambda_n >= 0:
            raise ValueError("lambda_n must be nonnegative")
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")

    @classmethod
    def for_sample_size(cls, n: int, **overrides: Any) -> TuningParams:
        """Small-sample constants below n=500, large-sample ones from 500 on."""
        small = n < 500
        base = dict(kappa1=10.0, kappa2n=0.01 if small else 0.001,
                    tau_n=0.01 if small else 0.001, w_threshold=0.1,
                    lambda_n=0.1, delta=1.0)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EstimateResult:
    beta: np.ndarray
    gamma: np.ndarray
    selected: tuple[int, ...]
    covariance: np.ndarray
    std_errors: np.ndarray
    sigma2_hat: float
    diagnostics: Any = None
    n: int = 0
    method: str = ""
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()
    screen_weights: np.ndarray | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def beta_t(self) -> float:
        return float(self.beta[0])

    @property
    def se_t(self) -> float:
        return float(self.std_errors[0])

    def to_dict(self) -> dict[str, Any]:
        diag = self.diagnostics.to_dict() if hasattr(self.diagnostics, "to_dict") else self.diagnostics
        return {
            "method": self.method,
            "n": self.n,
            "beta_t": self.beta_t,
            "se_t": self.se_t,
            "beta": dict(zip(("t", *self.x_names), map(float, self.beta))),
            "std_errors": dict(zip(("t", *self.x_names), map(float, self.std_errors))),
            "gamma": dict(zip(self.z_names, map(float, self.gamma))),
            "selected": [self.z_names[k] for k in self.selected],
            "screen_weights": None if self.screen_weights is None
            else dict(zip(self.z_names, map(float, self.screen_weights))),
            "sigma2_hat": float(self.sigma2_hat),
            "covariance": self.covariance.tolist(),
            "diagnostics": diag,
            **self.extra,
        }
