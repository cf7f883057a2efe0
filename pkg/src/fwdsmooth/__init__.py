"""Forward-only smoothing of additive functionals with particle methods."""

from ._backend import BACKEND
from .errors import (
    CapacityError,
    DegenerateBackwardKernelError,
    DegenerateWeightsError,
    FwdSmoothError,
    LambdaDomainError,
    NumericalError,
    ParameterDomainError,
)
from .filter import ParticleSet, ResamplingPolicy, bootstrap_step, ess, init_particles, resample, run_filter
from .functionals import (
    AdditiveFunctional,
    PolynomialFunctional,
    constant_functional,
    lgssm_benchmark_functional,
    state_functional,
)
from .learn import (
    OnlineEMEstimator,
    RMLEstimator,
    StepSchedule,
    batch_em_iteration,
    score_functional,
    step_discount_sequence,
    step_discount_sum,
    sv_lambda,
    sv_suff_stats,
)
from .models import (
    FiniteHMM,
    LinearGaussianModel,
    ModelParams,
    StateSpaceModel,
    StochasticVolatilityModel,
    load_model,
    model_from_spec,
    simulate,
)
from .oracle import (
    dense_joint_gaussian,
    exact_additive_functionals,
    hmm_exact_smoothed_functional,
    iid_path_variance,
    kalman_filter,
    kalman_smoother,
    rts_smoother,
)
from .smoother import (
    ffbs_backward,
    fixed_lag_estimate,
    fixed_lag_init,
    fixed_lag_update,
    fs_estimate,
    fs_init,
    fs_update,
    path_estimate,
    path_init,
    path_space_update,
    run_smoothers,
)

__version__ = "0.1.0"
