"""Instrumental-variable estimation with negative-control screening of invalid instruments."""

__version__ = "0.1.0"

from .data import ColumnSchema, Dataset, EstimateResult, TuningParams, center_nco, load_dataset, save_dataset
from .errors import ConvergenceError, EstimationError, NcoivError, NumericalWarning, SchemaError
from .iv_core import (
    MomentSet,
    check_regularity,
    cross_moments,
    gmm_estimate,
    iv_estimate,
    omega_opt,
    optimal_gamma,
    residualize_on_x,
    sandwich_variance,
)
from .selection import (
    build_system,
    estimate_with_selection,
    residual_auxiliary,
    smooth_weight,
    solve_gamma,
    tau_schedule,
)
from .alasso import PenaltySpec, adaptive_weights, fit_alasso, risk, selected_set
