"""Multivariate diffusion bridge simulation by coupling.

An approximate rejection sampler splices a forward diffusion onto the
backward reading of a time-reversed copy started at the target endpoint;
two MCMC correctors (a pseudo-marginal Metropolis-Hastings chain and a
simpler replace-on-hit chain) upgrade the draws to exact bridge samples.
Reference models (Ornstein-Uhlenbeck with an exact bridge oracle, the
hyperbolic diffusion) and a Gibbs sampler for Bayesian drift estimation
from discrete observations are included, plus distribution diagnostics and
a CLI.
"""

from .bridge import (
    ApproximateBridge,
    BridgeExhaustedError,
    BridgeSpec,
    CrossingCriterion,
    coupling_probability_lower_bound,
    default_general_criterion,
    detect_crossing_general,
    detect_crossing_reflection,
    reversed_increments,
    sample_approximate_bridge,
    sample_bridge_batch,
    simulate_coupled_forward,
)
from .coupling import (
    AmbiguousPolarFactorError,
    CouplingConfig,
    DegenerateDirectionError,
    coupled_increment,
    coupling_direction,
    orthogonal_correction,
    projection_matrix,
    reflection_matrix,
)
from .diagnostics import (
    MarginalDiagnostics,
    copula_sup_distance,
    empirical_copula,
    gaussian_marginal_diagnostics,
    ks_statistic,
    qq_data,
)
from .inference import (
    GibbsConfig,
    GibbsResult,
    ObservationSet,
    SufficientStats,
    gibbs_run,
    path_functionals,
    posterior_params,
    simulate_observations,
)
from .mcmc import (
    AltMCMCResult,
    AssociatedDiffusionRun,
    HitCount,
    HitCountExhaustedError,
    PMMHResult,
    RhoEstimate,
    alt_mcmc_run,
    chain_marginal,
    pi_regression_experiment,
    pi_variance_regression,
    pm_mh_run,
    reconstruct_lead_path,
    sample_hit_count,
    sample_hit_counts,
    simulate_associated_diffusion,
)
from .models import (
    HyperbolicModel,
    OUModel,
    UnstableDriftError,
    hyperbolic_drift,
    hyperbolic_log_density,
    make_hyperbolic_model,
    make_ou_model,
    ou_bridge_marginal,
    ou_exact_bridge_batch,
    ou_exact_bridge_sample,
    ou_gamma_t,
    ou_is_reversible,
    ou_stationary_covariance,
)
from .reversal import (
    ReversedModel,
    UnsupportedModelError,
    is_time_reversible,
    latin_hypercube_probes,
    reverse_model,
    reversed_drift,
    reversibility_residual,
)
from .sde import (
    DiffusionModel,
    SamplePath,
    SimulationBlowupError,
    SingularDiffusionError,
    TimeGrid,
    WienerIncrements,
    euler_step,
    read_path_csv,
    recover_increments,
    replicate_rng,
    simulate_path,
    task_rng,
    write_path_csv,
)

__version__ = "0.1.0"
