"""Observation-impact toolkit: shallow-water 4D-Var, adjoint-based
sensitivities, matrix-free solvers, preconditioners, and multigrid."""

from .assimilation import (
    CostEvaluation,
    FourDVar,
    HessianOperator,
    MinimizerReport,
    assemble_dense_hessian,
    lbfgs_minimize,
)
from .config import ExperimentConfig, ScenarioConfig, load_config, parse_config_text
from .covariance import BackgroundCovariance, ObservationErrorModel
from .impact import (
    ForecastScoreSpec,
    ImpactResult,
    detect_fault_sites,
    forecast_score,
    observation_sensitivities,
    score_gradient,
    sensitivity_magnitude,
    solve_supersensitivity,
)
from .krylov import LanczosResult, SolveBudget, SolverReport, lanczos_eigenpairs, solve
from .multigrid import GridTransfer, MgSchedule, coarse_scenario_operator, mg_solve
from .observations import (
    ObservationSet,
    full_network,
    inject_faults,
    synthesize_observations,
)
from .pipeline import TwinSetup, build_twin, run_assimilation, spawn_rngs
from .precond import (
    PreconditionerHandle,
    build_b0_diagonal,
    build_eigenpair_lmp,
    build_exact_diagonal,
    build_lbfgs_lmp,
    build_probed_block,
    build_randomized_svd,
    build_row_sum,
)
from .swe import (
    CheckpointStore,
    Trajectory,
    flatten,
    make_reference_initial_state,
    mass,
    propagate,
    step,
    unflatten,
)
from .swef import field_to_csv, read_swef, write_swef
from .tangent import foa, soa, tlm

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
