"""Factor-graph model predictive control on R^3 x SO(3) x R^3.

On-manifold dynamics, reference, actuator-bound and control-barrier
factors over a sparse Levenberg-Marquardt solver, plus a receding-horizon
controller and a deterministic closed-loop simulator.
"""

from .controller import (
    FigureEightReference,
    HoverReference,
    LineReference,
    MpcConfig,
    MpcController,
    MpcSolution,
    MpcStepError,
    ReferenceTrajectory,
    WaypointReference,
    build_mpc_graph,
    predict_obstacles,
)
from .factors import (
    CbfDomainError,
    CbfParams,
    ControlBounds,
    DynamicsNoise,
    Obstacle,
    cbf_h,
    cbf_margin,
    cbf_residual,
    dynamics_covariance,
    dynamics_residual,
    vcbf_control_jacobian,
    vcbf_h,
    vcbf_margin,
    vcbf_residual,
)
from .graph_core import (
    FactorGraph,
    GraphError,
    Key,
    NoiseModel,
    SolverError,
    SolverParams,
    SolveStats,
    Values,
    check_jacobians,
    control_key,
    solve_lm,
    state_key,
)
from .manifold import (
    CutLocusError,
    State,
    exp_so3,
    h_theta,
    h_theta_inv,
    hat,
    log_so3,
    state_boxminus,
    state_boxplus,
)
from .sim import (
    Metrics,
    ObstacleMotion,
    ScenarioConfig,
    SimLog,
    SimRecord,
    compute_metrics,
    obstacle_state,
    run_scenario,
)
from .vehicle import (
    QuadrotorInput,
    QuadrotorModel,
    QuadrotorParams,
    UniversalInput,
    UniversalModel,
    affine_decompose,
    make_model,
    propagate_quadrotor,
    propagate_universal,
)

__version__ = "0.1.0"
