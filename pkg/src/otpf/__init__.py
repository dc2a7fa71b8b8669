"""Bayesian inference by optimal transport of particle ensembles.

A coupling between the uniformly weighted prior ensemble and its importance
weights is solved as a transportation linear program; the induced Markov
matrix turns the ensemble into equally weighted posterior members, either
deterministically or by resampling.  Applied sequentially this gives a
particle filter, benchmarked here against an ensemble square root filter.
"""

from .dynamics import (
    NonConvergence,
    ObservationModel,
    SyntheticData,
    VectorField,
    gaussian_likelihood,
    implicit_midpoint_step,
    linear_observation_model,
    log_likelihoods,
    lorenz63,
    lorenz63_field,
    propagate,
    synthesize_observations,
)
from .ensemble_transform import Ensemble, et_transform, mean_identity_check, ot_resample
from .filters import (
    FilterConfig,
    FilterDiagnostics,
    esrf_analysis,
    etpf_analysis,
    inflate,
    run_filter,
    write_diagnostics,
)
from .inference import (
    DegenerateWeights,
    GaussianPosterior,
    TruncatedGaussianPosterior,
    WeightedSamples,
    analytic_posterior_moments,
    importance_weights,
    importance_weights_from_log,
    moment_summary,
    weighted_moments,
)
from .transport import (
    CostMatrix,
    Coupling,
    InfeasibleMarginals,
    MarginalPair,
    PivotLimitExceeded,
    TransitionMatrix,
    TransportError,
    check_cyclical_monotonicity,
    cost_matrix,
    coupling_support_pairs,
    sample_index_cycles,
    solve_transport,
    support_pattern,
    transition_from_coupling,
)

__version__ = "0.1.0"
