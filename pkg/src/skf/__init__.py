"""Partition-function-free moment filtering for polynomial SDEs.

Beliefs are represented by unnormalized exponential-family densities
exp(-lambda . phi) over a monomial basis. Score matching fits lambda from
moments through a linear solve, Stein identities close the moment ODE and
recover posterior moments, and Gaussian measurement updates are exact
coefficient additions. No normalizing constant is ever computed.
"""

__version__ = "0.1.0"

from .errors import (
    DegreeOverflow,
    DivergedClosure,
    EmptyTargets,
    IllConditioned,
    MissingMoment,
    RankDeficient,
    SingularGram,
    SkfError,
    UnderdeterminedSystem,
)
from .polybasis import (
    DegreeBasis,
    MomentVector,
    count_basis,
    enumerate_basis,
    enumerate_exact_degree,
    gaussian_moment_vector,
    mi_add,
    mi_degree,
    mi_sub,
)
from .sde_model import (
    MomentOdeOperator,
    Polynomial,
    PolynomialSDE,
    apply_generator,
    build_moment_operator,
    center_sde,
    excess_degree,
    mean_drift,
    shift_sde,
    transform_sde,
)
from .score_match import (
    CenteringTransform,
    GramSystem,
    ScoreParams,
    assemble_gram,
    center_moments,
    condition_estimate,
    fit_score,
    rescale_score,
    scale_moments,
    sm_gradient,
    sm_objective,
    uncenter_moments,
    unrescale_score,
    unscale_moments,
)
from .stein import (
    ClosureConfig,
    ClosureWindow,
    ConeCbf1dState,
    LstsqFactor,
    RecoveryConfig,
    SteinSystem,
    build_closure_system,
    build_recovery_system,
    calibrate_theta_inf,
    cbf_upper_bound,
    cone_cbf_closure_1d,
    count_system,
    diagnostics_record,
    dw_affine_system,
    factor_cache,
    hankel_lower_bound,
    layered_closure,
    solve_closure,
    solve_recovery,
    stein_lhs_coeffs,
    stein_row_residual,
)
from .update import (
    MeasurementModel,
    RefinementConfig,
    conjugate_update,
    likelihood_energy,
    likelihood_score_params,
    recover_posterior_moments,
    refine_consistency,
)
from .skf import (
    FilterConfig,
    FilterState,
    estimate,
    info_form_view,
    init_filter,
    predict,
    update_step,
)
from .baselines import (
    GaussianBelief,
    ekf_step,
    enkf_init,
    enkf_step,
    euler_maruyama,
    mc_moment_oracle,
    pf_estimate,
    pf_init,
    pf_step,
    sample_moments,
    simulate_path,
    ukf_step,
)
