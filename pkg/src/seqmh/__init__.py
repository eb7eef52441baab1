"""Sequential mini-batch Metropolis-Hastings tests and the samplers built on them."""
from .errors import DegenerateScale, InfeasibleDesign, InsufficientData, InvalidArgument, InvalidMove
from .seqtest import (
    LogLikDiffPopulation,
    RunningMoments,
    SequentialTestSpec,
    TestDecision,
    compute_mu0,
    estimate_std,
    exact_mh_test,
    sequential_mh_test,
    sequential_mh_test_many,
    student_t_tail,
    t_statistic,
)
from .rwalk import (
    RandomWalkParams,
    RandomWalkProfile,
    StageDesign,
    delta_acceptance,
    dp_error_and_usage,
    rw_conditional_params,
    simulate_sequential_tests,
    worst_case_error,
)
from .design import DesignResult, MomentSample, average_design, worst_case_design

__version__ = "0.1.0"
