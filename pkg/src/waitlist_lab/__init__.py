"""Centralized daycare assignment with a waitlist bonus: mechanism, lottery
estimation, forward-looking list choice, synthetic markets, simulated
method of moments and counterfactual equilibria."""

from .counterfactual import (
    EquilibriumOutcome,
    Scenario,
    cutoff_histogram_report,
    iterate_equilibrium,
    run_scenarios,
    welfare_report,
)
from .lottery import (
    CutoffDistribution,
    Lottery,
    LotteryBelief,
    admission_prob,
    blend_two_period,
    bootstrap_cutoffs,
    lottery_from_rol,
)
from .market import (
    ApplicantHistory,
    MarketConfig,
    Panel,
    benefit_thresholds,
    default_market_config,
    delta_k,
    drop_safety,
    generate_market,
    recovery_market_config,
    summarize,
)
from .mechanism import (
    CLOSED,
    OPEN,
    Applicant,
    AssignmentResult,
    Cutoff,
    EmptyResultError,
    InvalidInputError,
    MarketCell,
    apply_waitlist_bonus,
    cutoff_transition_matrix,
    run_serial_dictatorship,
)
from .msm import MsmConfig, fit, individual_moments, simulated_moment_gap, weight_matrix
from .policy import (
    PolicyProblem,
    Theta,
    approx_optimal_pair,
    brute_force_optimal_pair,
    mia_benchmark,
    total_value,
)

__version__ = "0.1.0"
