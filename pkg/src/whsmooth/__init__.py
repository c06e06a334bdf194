"""Whittaker-Henderson graduation toolkit.

Smoothing of 1D and 2D experience tables in the classical weighted
least-squares form and the generalized penalized-likelihood form, with
marginal-likelihood smoothing-parameter selection, eigenbasis rank
reduction, credible intervals and constrained extrapolation.
"""

from .duration import (
    AggregatedExposure,
    Portfolio,
    PortfolioRecord,
    aggregate_1d,
    aggregate_2d,
    crude_rates,
)
from .errors import (
    ConvergenceError,
    DataInconsistencyError,
    InvalidParameterError,
    NumericalError,
    SelectionError,
    SingularSystemError,
    SmoothingError,
    UndefinedPdetError,
)
from .extrapolation import (
    ExtrapolationResult,
    GridEmbedding,
    SmoothingState,
    build_embedding,
    credible_intervals_extended,
    extended_penalty,
    extrapolate_constrained,
    extrapolate_unconstrained,
)
from .gaussian import (
    GaussianFit,
    credible_intervals,
    fit_gaussian,
    gcv,
    marginal_loglik_norm,
    select_lambda_norm,
)
from .generalized import (
    GeneralizedFit,
    delta_lambda,
    delta_theta,
    initial_theta,
    laplace_marginal_loglik,
    loglik,
    marginal_loglik_at_infinity,
    newton_fit,
    penalized_loglik,
    select_lambda_outer,
    select_lambda_performance,
    theta_infinity,
)
from .optimize import OptimizeResult, SearchConfig, brent_maximize, nelder_mead_maximize
from .penalty import (
    PenaltyOperator,
    difference_matrix,
    log_pdet,
    penalty_1d,
    penalty_2d,
)
from .rank_reduction import (
    EigenBasis,
    EdfReport,
    ReducedFit,
    choose_p,
    eigen_basis,
    fit_reduced,
    select_lambda_reduced,
)
from .simulator import (
    EXPERIMENT_IDS,
    ExperimentReport,
    HazardLaw,
    SimConfig,
    child_seed,
    replicate_experiment,
    simulate,
)

__version__ = "0.1.0"
