"""Optimal dividend solver for shot-noise claim intensities with regime tipping.

Solves the two-dimensional (surplus x intensity) dividend control problem on
a finite grid by value iteration over precomputed transition kernels, chains
regimes backwards through a tipping point, and cross-validates policies with
an independent Monte Carlo evaluator.
"""

from .grid import GridSpec, ValueSurface, compute_x_bar, eval_surface, rho_down, sigma_up
from .kernel import (
    TransitionKernel,
    build_kernel,
    claim_redistribution,
    cumulative_hazard,
    decayed_intensity,
    jump_redistribution,
)
from .model import (
    Deterministic,
    Distribution,
    Erlang,
    Exponential,
    StateSpec,
    TippingProblem,
    TruncatedExponential,
    lambda_av,
    premium_rate,
)
from .simulate import (
    EstimateReport,
    PathConfig,
    cl_closed_form,
    cl_optimal_barrier,
    evaluate_policy,
    one_step_oracle,
    sample_path,
)
from .solver import (
    Action,
    NonConvergenceError,
    PolicyMap,
    RegionMap,
    SolveReport,
    apply_t0,
    apply_t1,
    apply_tf,
    bellman_sweep,
    default_tol,
    extract_regions,
    solve_chain,
    value_iteration,
)

__version__ = "0.1.0"
