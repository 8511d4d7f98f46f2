"""Receding-horizon MPC over the factor graph.

Each control step rebuilds the horizon graph at the measured state,
warm-starts from the previous solution shifted by one step, solves by
Levenberg-Marquardt, and emits the first control. Safety enters as soft
barrier factors coupled to the optimized states (and controls, for the
velocity-extended barrier), solved jointly with tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .factors import (
    CbfParams,
    ControlBoundFactor,
    ControlBounds,
    ControlRateFactor,
    DistanceCbfFactor,
    DynamicsFactor,
    DynamicsNoise,
    Obstacle,
    StateErrorFactor,
    VelocityCbfFactor,
    dynamics_covariance,
)
from .graph_core import (
    FactorGraph,
    GraphError,
    NoiseModel,
    SolverError,
    SolverParams,
    SolveStats,
    Values,
    control_key,
    solve_lm,
    state_key,
)
from .manifold import State
from .vehicle import VehicleModel


class MpcStepError(RuntimeError):
    """Solve failed inside a control step; carries the partial SolveStats
    so the caller can decide a fallback policy."""

    def __init__(self, message: str, stats: SolveStats | None = None):
        super().__init__(message)
        self.stats = stats


# ---------------------------------------------------------------------------
# reference trajectories


class ReferenceTrajectory:
    """Time-indexed reference states; subclasses define state_at(t)."""

    def state_at(self, t: float) -> State:
        raise NotImplementedError

    def input_at(self, t: float):
        """Optional reference input; unused by the rate-factor formulation."""
        return None


class HoverReference(ReferenceTrajectory):
    def __init__(self, point):
        self._state = State(np.asarray(point, dtype=float), np.eye(3), np.zeros(3))

    def state_at(self, t: float) -> State:
        return self._state


class LineReference(ReferenceTrajectory):
    """Straight segment with a trapezoidal speed profile (ramp at the given
    acceleration to cruise speed, cruise, ramp down, then hold the goal)."""

    def __init__(self, start, goal, speed: float, accel: float = 1.0):
        self.start = np.asarray(start, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        if speed <= 0 or accel <= 0:
            raise ValueError("line reference needs speed > 0 and accel > 0")
        self.length = float(np.linalg.norm(self.goal - self.start))
        if self.length == 0:
            raise ValueError("line reference start and goal coincide")
        self.direction = (self.goal - self.start) / self.length
        # Degrade to a triangular profile when the segment is too short to
        # reach cruise speed.
        if speed * speed / accel > self.length:
            speed = math.sqrt(accel * self.length)
        self.speed = speed
        self.accel = accel
        self.t_ramp = speed / accel
        self.d_ramp = 0.5 * speed * self.t_ramp
        self.t_cruise = (self.length - 2.0 * self.d_ramp) / speed
        self.t_total = 2.0 * self.t_ramp + self.t_cruise

    def _profile(self, t: float) -> tuple[float, float]:
        if t <= 0.0:
            return 0.0, 0.0
        if t < self.t_ramp:
            return 0.5 * self.accel * t * t, self.accel * t
        if t < self.t_ramp + self.t_cruise:
            return self.d_ramp + self.speed * (t - self.t_ramp), self.speed
        if t < self.t_total:
            tau = t - self.t_ramp - self.t_cruise
            return (self.d_ramp + self.speed * self.t_cruise + self.speed * tau
                    - 0.5 * self.accel * tau * tau), self.speed - self.accel * tau
        return self.length, 0.0

    def state_at(self, t: float) -> State:
        s, v = self._profile(t)
        return State(self.start + s * self.direction, np.eye(3), v * self.direction)


class FigureEightReference(ReferenceTrajectory):
    """Planar lemniscate: x = A sin(w t), y = B sin(2 w t) around a center."""

    def __init__(self, center, amplitude_x: float, amplitude_y: float, period: float):
        if period <= 0:
            raise ValueError("figure-eight period must be positive")
        self.center = np.asarray(center, dtype=float)
        self.ax = float(amplitude_x)
        self.ay = float(amplitude_y)
        self.omega = 2.0 * math.pi / period

    def state_at(self, t: float) -> State:
        w = self.omega
        p = self.center + np.array([
            self.ax * math.sin(w * t),
            self.ay * math.sin(2.0 * w * t),
            0.0,
        ])
        v = np.array([
            self.ax * w * math.cos(w * t),
            2.0 * self.ay * w * math.cos(2.0 * w * t),
            0.0,
        ])
        return State(p, np.eye(3), v)


class WaypointReference(ReferenceTrajectory):
    """Piecewise-linear path through waypoints at per-segment speeds;
    holds the final waypoint once reached."""

    def __init__(self, waypoints: Sequence, speeds: Sequence[float]):
        pts = [np.asarray(p, dtype=float).reshape(3) for p in waypoints]
        if len(pts) < 2:
            raise ValueError("waypoint reference needs at least two waypoints")
        if len(speeds) != len(pts) - 1:
            raise ValueError("need one speed per segment")
        if any(s <= 0 for s in speeds):
            raise ValueError("segment speeds must be positive")
        self.points = pts
        self.speeds = [float(s) for s in speeds]
        self.t_knots = [0.0]
        for a, b, s in zip(pts[:-1], pts[1:], self.speeds):
            self.t_knots.append(self.t_knots[-1] + float(np.linalg.norm(b - a)) / s)

    def state_at(self, t: float) -> State:
        if t <= 0.0:
            return State(self.points[0], np.eye(3), np.zeros(3))
        if t >= self.t_knots[-1]:
            return State(self.points[-1], np.eye(3), np.zeros(3))
        for i in range(len(self.points) - 1):
            if t < self.t_knots[i + 1]:
                a, b = self.points[i], self.points[i + 1]
                seg = b - a
                seg_len = float(np.linalg.norm(seg))
                direction = seg / seg_len
                s = (t - self.t_knots[i]) * self.speeds[i]
                return State(a + s * direction, np.eye(3), self.speeds[i] * direction)
        return State(self.points[-1], np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# configuration


def _as_information(weight, dim: int, what: str) -> np.ndarray:
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        w = np.full(dim, float(w))
    if w.ndim == 1:
        if w.shape[0] != dim:
            raise GraphError(f"{what} diagonal must have length {dim}, got {w.shape[0]}")
        return np.diag(w)
    if w.shape != (dim, dim):
        raise GraphError(f"{what} must be {dim}x{dim}, got {w.shape}")
    return w


@dataclass
class MpcConfig:
    """Horizon layout, weights (information matrices or their diagonals),
    barrier parameters, actuator bounds, and solver schedule."""

    model: VehicleModel
    horizon: int = 20
    dt: float = 0.1
    state_weight: np.ndarray = field(default_factory=lambda: np.array(
        [50.0, 50.0, 50.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0]))
    terminal_weight: np.ndarray | None = None
    rate_weight: np.ndarray | float = 1.0
    bound_weight: np.ndarray | float = 1e4
    prior_weight: np.ndarray | float = 1e6
    sigma_a: float = 1.0
    sigma_omega: float = 1.0
    dynamics_weight: np.ndarray | None = None
    cbf: CbfParams = field(default_factory=CbfParams)
    bounds: ControlBounds | None = None
    solver: SolverParams = field(default_factory=SolverParams)

    def __post_init__(self):
        if self.horizon < 2:
            raise GraphError(f"horizon must be >= 2, got {self.horizon}")
        if self.dt <= 0:
            raise GraphError("dt must be positive")
        m = self.model.control_dim
        if self.bounds is None:
            self.bounds = ControlBounds(np.full(m, -np.inf), np.full(m, np.inf))
        if self.bounds.dim != m:
            raise GraphError(f"control bounds have dimension {self.bounds.dim}, "
                             f"model expects {m}")

    def build_noise_models(self) -> dict[str, NoiseModel]:
        m = self.model.control_dim
        if self.dynamics_weight is not None:
            dyn = NoiseModel.from_information(_as_information(self.dynamics_weight, 9,
                                                              "dynamics_weight"))
        else:
            cov = dynamics_covariance(DynamicsNoise(self.sigma_a, self.sigma_omega, self.dt))
            # Eq-of-motion noise integration leaves the covariance rank
            # deficient; a relative jitter bounds the whitened conditioning.
            dyn = NoiseModel.from_covariance(cov, jitter=1e-6 * float(np.max(np.diag(cov))))
        term = self.terminal_weight if self.terminal_weight is not None else self.state_weight
        return {
            "prior": NoiseModel.from_information(_as_information(self.prior_weight, 9, "prior_weight")),
            "dynamics": dyn,
            "reference": NoiseModel.from_information(_as_information(self.state_weight, 9, "state_weight")),
            "terminal": NoiseModel.from_information(_as_information(term, 9, "terminal_weight")),
            "bound": NoiseModel.from_information(_as_information(self.bound_weight, m, "bound_weight")),
            "rate": NoiseModel.from_information(_as_information(self.rate_weight, m, "rate_weight")),
            "cbf": NoiseModel.isotropic(1, self.cbf.weight),
        }


@dataclass
class MpcSolution:
    """Optimized horizon: states x_0..x_N, controls u_0..u_N-1, solver
    statistics, and whitened residual norms per factor family."""

    states: list[State]
    controls: list[np.ndarray]
    stats: SolveStats
    family_norms: dict[str, float]

    @property
    def u0(self) -> np.ndarray:
        return self.controls[0]


# ---------------------------------------------------------------------------
# graph construction


def predict_obstacles(obstacles: Sequence[Obstacle], horizon: int, dt: float
                      ) -> list[list[Obstacle]]:
    """Constant-velocity extrapolation of every obstacle over the horizon;
    entry k holds the obstacles displaced by k*dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = []
    for k in range(horizon + 1):
        out.append([
            Obstacle(o.position + o.velocity * (k * dt), o.velocity, o.radius)
            for o in obstacles
        ])
    return out


def _assemble_graph(config: MpcConfig, x_init: State, ref_states: Sequence[State],
                    predicted_obstacles: Sequence[Sequence[Obstacle]],
                    noises: dict[str, NoiseModel]) -> FactorGraph:
    N = config.horizon
    model = config.model
    m = model.control_dim
    graph = FactorGraph()
    for k in range(N + 1):
        graph.declare_state(k)
    for k in range(N):
        graph.declare_control(k, m)

    graph.insert(StateErrorFactor(0, x_init, noises["prior"], family="prior"))
    for k in range(N):
        graph.insert(DynamicsFactor(k, model, config.dt, noises["dynamics"]))
    for k in range(1, N + 1):
        noise = noises["terminal"] if k == N else noises["reference"]
        graph.insert(StateErrorFactor(k, ref_states[k], noise, family="reference"))
    for k in range(N):
        graph.insert(ControlBoundFactor(k, config.bounds, noises["bound"]))
    for k in range(N - 1):
        graph.insert(ControlRateFactor(k, m, noises["rate"]))
    use_vcbf = config.cbf.gamma > 0.0
    for k in range(N):
        for obs in predicted_obstacles[k]:
            if use_vcbf:
                graph.insert(VelocityCbfFactor(k, obs, config.cbf, model, noises["cbf"]))
            else:
                graph.insert(DistanceCbfFactor(k, obs, config.cbf, noises["cbf"]))
    return graph


def cold_start_values(config: MpcConfig, x_init: State) -> Values:
    """Hover-control rollout from the initial state."""
    values = Values()
    hover = config.model.hover_control()
    x = x_init
    values[state_key(0)] = x
    for k in range(config.horizon):
        values[control_key(k)] = hover.copy()
        x = config.model.propagate(x, hover, config.dt)
        values[state_key(k + 1)] = x
    return values


def build_mpc_graph(config: MpcConfig, x_init: State, ref_states: Sequence[State],
                    predicted_obstacles: Sequence[Sequence[Obstacle]] | None = None,
                    noises: dict[str, NoiseModel] | None = None,
                    ) -> tuple[FactorGraph, Values]:
    """Assemble the horizon graph and its cold-start values.

    Contents: one prior on x_0, N dynamics factors, reference factors on
    x_1..x_N, bound factors on every control, N-1 rate factors, and one
    barrier factor per (obstacle, step k < N) - velocity-extended when
    gamma > 0, distance-based otherwise. The cold start rolls out hover
    controls from x_init.
    """
    N = config.horizon
    if len(ref_states) < N + 1:
        raise GraphError(f"reference covers {len(ref_states)} steps, horizon needs {N + 1}")
    if predicted_obstacles is None:
        predicted_obstacles = [[] for _ in range(N + 1)]
    if len(predicted_obstacles) < N:
        raise GraphError("predicted obstacle schedule shorter than the horizon")
    noises = noises or config.build_noise_models()
    graph = _assemble_graph(config, x_init, ref_states, predicted_obstacles, noises)
    return graph, cold_start_values(config, x_init)


class MpcController:
    """Single-client receding-horizon controller; step() calls must be
    serialized, separate instances are independent."""

    def __init__(self, config: MpcConfig, reference: ReferenceTrajectory):
        self.config = config
        self.reference = reference
        self._noises = config.build_noise_models()
        self._prev: MpcSolution | None = None

    def reset(self):
        self._prev = None

    def step(self, x_meas: State, t: float, obstacles: Sequence[Obstacle] = ()
             ) -> tuple[np.ndarray, MpcSolution]:
        """Solve the horizon at time t from the measured state and return
        the first control; deterministic for identical inputs and history."""
        cfg = self.config
        N = cfg.horizon
        predicted = predict_obstacles(obstacles, N, cfg.dt)
        ref_states = [self.reference.state_at(t + k * cfg.dt) for k in range(N + 1)]
        if len(ref_states) < N + 1:
            raise GraphError("reference does not cover the horizon")
        graph = _assemble_graph(cfg, x_meas, ref_states, predicted, self._noises)
        if self._prev is not None:
            values = self._shift_warm_start(self._prev)
        else:
            values = cold_start_values(cfg, x_meas)
        try:
            solution_values, stats = solve_lm(graph, values, cfg.solver)
        except SolverError as exc:
            raise MpcStepError(f"MPC solve failed at t={t:.3f}: {exc}",
                               getattr(exc, "stats", None)) from exc
        states = [solution_values[state_key(k)] for k in range(N + 1)]
        controls = [solution_values[control_key(k)] for k in range(N)]
        solution = MpcSolution(states, controls, stats,
                               graph.family_residual_norms(solution_values))
        self._prev = solution
        return controls[0], solution

    def _shift_warm_start(self, prev: MpcSolution) -> Values:
        """Previous horizon shifted one step: last control duplicated, the
        final state extrapolated by propagation."""
        cfg = self.config
        N = cfg.horizon
        values = Values()
        states = list(prev.states[1:])
        states.append(cfg.model.propagate(prev.states[-1], prev.controls[-1], cfg.dt))
        controls = list(prev.controls[1:])
        controls.append(prev.controls[-1].copy())
        for k in range(N + 1):
            values[state_key(k)] = states[k]
        for k in range(N):
            values[control_key(k)] = controls[k]
        return values
