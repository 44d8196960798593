"""Smooth cause-specific hazards over two time scales.

Competing-risks records are binned on a regular (age at diagnosis, time
since diagnosis) grid; per-cause hazard surfaces are penalized tensor-product
spline fits to the Poisson event counts with exposures as offsets.  Derived
quantities (cumulative hazards, overall survival, cumulative incidence) come
from rectangle-rule quadrature, standard errors from the delta method and
coefficient simulation, and a composite link model ungroups a coarse final
age interval onto the fine grid.
"""

__version__ = "0.1.0"

from .basis import BasisMatrix, DiffMatrix, KnotVector, difference_matrix, evaluate_basis, make_knots
from .errors import ConvergenceError, DataError, DomainError, Hazard2tsError
from .glam import ArrayModelWorkspace, linear_predictor, weighted_inner, weighted_rhs
from .incidence import (
    EvalGrid,
    Surfaces,
    compute_surfaces,
    cumulative_hazard,
    cumulative_incidence,
    default_eval_grid,
    evaluate_hazard,
    evaluate_log_hazard,
    overall_survival,
    surfaces_at_points,
    to_age_coordinates,
)
from .lexis import (
    BinnedData,
    IndividualRecord,
    LexisGrid,
    bin_records,
    build_grid,
    read_records_csv,
    write_records_csv,
)
from .pclm import (
    CompositionSpec,
    PclmFit,
    composition_matrix,
    fit_pclm,
    select_pclm_smoothing,
    ungroup_events,
    ungroup_exposure,
)
from .simulate import GroupedCounts, ScenarioSpec, grouped_view, hazard_family, simulate_cohort
from .smooth2d import (
    FitControl,
    FittedHazard,
    PenaltyConfig,
    SearchConfig,
    effective_dimension,
    fit_hazard,
    information_criteria,
    penalty_matrix,
    select_smoothing,
    zero_penalty,
)
from .uncertainty import (
    MonteCarloConfig,
    cif_standard_errors,
    coefficient_covariance,
    sample_coefficients,
    se_hazard,
    se_log_hazard,
    se_log_hazard_points,
)
