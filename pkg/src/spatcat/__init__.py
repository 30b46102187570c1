"""Identifiable reduced-rank spatial multinomial modeling.

A library and CLI for Bayesian inference on spatial categorical and
multinomial data whose class-level spatial effects share a small number of
latent factors: simulation, Metropolis-within-Gibbs fitting with
Laplace-approximation proposals, latent-dimension selection by WAIC and
PSIS-LOO, and joint posterior prediction for classes, class unions, and
area summaries.
"""

from .basis import (
    KnotSet,
    SpatialBasis,
    build_basis,
    build_knot_grid,
    build_precision,
    subsample_knots,
)
from .errors import (
    ChainAbortError,
    InvalidInputError,
    SingularMatrixError,
    SpatcatError,
)
from .model import (
    Dataset,
    FactorMatrix,
    Hyperpriors,
    ParamState,
    PriorSettings,
    compute_logits,
    factor_from_covariance,
    induced_row_covariance,
    log_likelihood,
    log_posterior_unnormalized,
    softmax,
)
from .prediction import (
    PredictiveGrid,
    area_occurrence,
    predict,
    summarize_predictions,
    union_probability,
)
from .sampler import (
    ChainStore,
    LaplaceProposal,
    SamplerConfig,
    gibbs_cycle,
    mh_laplace_update,
    newton_raphson_mode,
    run_chain,
    sample_omega,
    sample_phi,
)
from .selection import (
    DimSearchTrace,
    LpdMatrix,
    oos_lpd,
    psis_loo,
    ternary_search_u,
    waic,
)
from .simulation import (
    SimConfig,
    run_dimension_study,
    run_laplace_accuracy_study,
    simulate_dataset,
)

__version__ = "0.1.0"
