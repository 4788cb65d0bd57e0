"""Certified set-valued control: interval-MDP abstraction, robust policy
synthesis, and set-constrained online MPC for stochastic systems."""

from .errors import (
    ContractViolation,
    Infeasible,
    InfeasibleAmbiguitySet,
    LabelAlignmentError,
    NonConvergence,
)
from .dynamics import (
    Box,
    SystemModel,
    MODEL_FACTORIES,
    deterministic_mean,
    double_integrator,
    dubins_car,
    mean_image_bounds,
    mountain_car,
    sample_noise,
    step,
    wrap_angle,
)
from .partition import (
    GOAL,
    NEUTRAL,
    UNSAFE,
    Partition,
    build_partition,
    cell_bounds,
    cell_center,
    locate,
    locate_many,
)
from .abstraction import (
    ActionSet,
    Imdp,
    build_action_set,
    build_imdp,
    estimate_transition_count,
    export_imdp,
    imdp_from_rows,
    interface_set,
    transition_interval,
    validate_imdp,
)
from .factored import (
    FactoredImdp,
    build_factored,
    factored_value_iteration,
)
from .imdp_synthesis import (
    RobustPolicy,
    ValueBounds,
    extremal_expectation,
    permissive_policy,
    robust_value_iteration,
    value_grid,
    worst_case_expectation,
)
from .pwa import (
    AffineModel,
    jacobians,
    linearize,
    pwa_table,
)
from .mpc import (
    MiqpInstance,
    MpcSolution,
    RegionData,
    build_miqp,
    solve_box_qp,
    solve_miqp,
    target_point,
)
from .simulation import (
    EpisodeRecord,
    MonteCarloSummary,
    MpcController,
    SweepRow,
    VanillaController,
    epsilon_sweep,
    monte_carlo,
    run_episode,
    synthesize_for,
)
from .config import (
    BenchmarkConfig,
    dump_config,
    load_config,
    make_model,
    parse_config,
)

__version__ = "0.1.0"
