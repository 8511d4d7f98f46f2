"""Deterministic closed-loop simulation.

The loop samples obstacle states, calls the controller on the measured
(by default noise-free) state, then propagates the true vehicle with a
zero-order hold on the first control at an inner timestep dt_sim <= dt.
Everything is driven by the scenario seed, so a fixed scenario replays
identically; solver wall time is recorded but excluded from the
determinism signature since it is physical measurement, not state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import MpcConfig, MpcController, MpcStepError, ReferenceTrajectory
from .factors import CbfParams, Obstacle, cbf_h, vcbf_h
from .manifold import State, state_boxplus
from .vehicle import VehicleModel


@dataclass(frozen=True)
class ObstacleMotion:
    """Obstacle motion model: static, constant-velocity, or uniform
    elliptical in the horizontal plane."""

    kind: str
    radius: float
    position: np.ndarray | None = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray | None = None
    semi_axes: tuple[float, float] = (1.0, 1.0)
    rate: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "constant-velocity", "elliptical"):
            raise ValueError(f"unknown obstacle motion kind {self.kind!r}")
        if self.radius < 0:
            raise ValueError("obstacle radius must be >= 0")
        if self.kind in ("static", "constant-velocity"):
            if self.position is None:
                raise ValueError(f"{self.kind} obstacle needs a position")
            object.__setattr__(self, "position", np.asarray(self.position, float).reshape(3))
            object.__setattr__(self, "velocity", np.asarray(self.velocity, float).reshape(3))
        else:
            if self.center is None:
                raise ValueError("elliptical obstacle needs a center")
            object.__setattr__(self, "center", np.asarray(self.center, float).reshape(3))
            a, b = self.semi_axes
            if a <= 0 or b <= 0:
                raise ValueError("elliptical semi-axes must be positive")


def obstacle_state(motion: ObstacleMotion, t: float) -> Obstacle:
    """Obstacle position and velocity at time t >= 0."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if motion.kind == "static":
        return Obstacle(motion.position, np.zeros(3), motion.radius)
    if motion.kind == "constant-velocity":
        return Obstacle(motion.position + motion.velocity * t, motion.velocity, motion.radius)
    a, b = motion.semi_axes
    ang = motion.rate * t + motion.phase
    p = motion.center + np.array([a * math.cos(ang), b * math.sin(ang), 0.0])
    v = np.array([-a * motion.rate * math.sin(ang), b * motion.rate * math.cos(ang), 0.0])
    return Obstacle(p, v, motion.radius)


@dataclass(frozen=True)
class SimRecord:
    """One control step of the closed loop (true state, not measured)."""

    t: float
    state: State
    u: np.ndarray
    solve_ms: float
    boundary_distances: tuple[float, ...]
    min_h: float
    family_norms: dict[str, float]


@dataclass
class SimLog:
    records: list[SimRecord] = field(default_factory=list)
    aborted: bool = False
    abort_message: str = ""

    def signature(self):
        """Deterministic content: everything except solver wall time."""
        return tuple(
            (r.t, r.state.p.tobytes(), r.state.R.tobytes(), r.state.v.tobytes(),
             r.u.tobytes(), r.boundary_distances, r.min_h,
             tuple(sorted(r.family_norms.items())))
            for r in self.records
        )


@dataclass
class Metrics:
    tracking_rmse: float
    min_boundary_distance: float | None
    collision_count: int
    solve_time_median_ms: float
    solve_time_p99_ms: float

    def as_dict(self) -> dict:
        return {
            "tracking_rmse_m": self.tracking_rmse,
            "min_boundary_distance_m": self.min_boundary_distance,
            "collision_count": self.collision_count,
            "solve_time_median_ms": self.solve_time_median_ms,
            "solve_time_p99_ms": self.solve_time_p99_ms,
        }


@dataclass
class ScenarioConfig:
    """Everything that determines one closed-loop run.

    plant_model is the true vehicle propagated by the simulator; it may
    differ from mpc.model (e.g. drag enabled on the plant only) to probe
    model mismatch.
    """

    mpc: MpcConfig
    reference: ReferenceTrajectory
    plant_model: VehicleModel | None = None
    obstacles: list[ObstacleMotion] = field(default_factory=list)
    duration: float = 10.0
    dt_sim: float | None = None
    measurement_noise: float = 0.0
    seed: int = 0
    initial_state: State | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.plant_model is None:
            self.plant_model = self.mpc.model
        if self.dt_sim is None:
            self.dt_sim = self.mpc.dt / 10.0
        if self.dt_sim <= 0 or self.dt_sim > self.mpc.dt + 1e-12:
            raise ValueError("dt_sim must satisfy 0 < dt_sim <= dt")
        if self.measurement_noise < 0:
            raise ValueError("measurement_noise must be >= 0")


def _min_h(x: State, obstacles: Sequence[Obstacle], params: CbfParams) -> float:
    """Smallest barrier value over obstacles; the velocity-extended barrier
    when gamma > 0, the distance barrier otherwise."""
    if not obstacles:
        return math.inf
    if params.gamma > 0:
        return min(vcbf_h(x, o, params) for o in obstacles)
    return min(cbf_h(x.p, o, params.d_safe(o)) for o in obstacles)


def run_scenario(scenario: ScenarioConfig) -> SimLog:
    """Run the closed loop; on controller failure the partial log is
    returned with aborted=True."""
    controller = MpcController(scenario.mpc, scenario.reference)
    x = scenario.initial_state or scenario.reference.state_at(0.0)
    rng = np.random.default_rng(scenario.seed)
    dt = scenario.mpc.dt
    steps = max(1, round(scenario.duration / dt))
    inner = max(1, round(dt / scenario.dt_sim))
    dt_inner = dt / inner
    log = SimLog()
    for k in range(steps):
        t = k * dt
        obstacles = [obstacle_state(m, t) for m in scenario.obstacles]
        if scenario.measurement_noise > 0:
            x_meas = state_boxplus(x, scenario.measurement_noise * rng.standard_normal(9))
        else:
            x_meas = x
        try:
            u0, solution = controller.step(x_meas, t, obstacles)
        except MpcStepError as exc:
            log.aborted = True
            log.abort_message = str(exc)
            break
        boundary = tuple(
            float(np.linalg.norm(x.p - o.position)) - o.radius for o in obstacles
        )
        log.records.append(SimRecord(
            t=t,
            state=x,
            u=np.array(u0, dtype=float),
            solve_ms=solution.stats.wall_time_ms,
            boundary_distances=boundary,
            min_h=_min_h(x, obstacles, scenario.mpc.cbf),
            family_norms=solution.family_norms,
        ))
        for _ in range(inner):
            x = scenario.plant_model.propagate(x, u0, dt_inner)
    return log


def compute_metrics(log: SimLog, reference: ReferenceTrajectory) -> Metrics:
    """Position RMSE against the reference, worst clearance, collision
    count (steps with center distance below the obstacle radius), and
    solve-time order statistics."""
    if not log.records:
        raise ValueError("cannot compute metrics of an empty log")
    sq_err = 0.0
    min_bd: float | None = None
    collisions = 0
    times = []
    for rec in log.records:
        err = rec.state.p - reference.state_at(rec.t).p
        sq_err += float(err @ err)
        times.append(rec.solve_ms)
        if rec.boundary_distances:
            step_min = min(rec.boundary_distances)
            min_bd = step_min if min_bd is None else min(min_bd, step_min)
            if step_min < 0.0:
                collisions += 1
    return Metrics(
        tracking_rmse=math.sqrt(sq_err / len(log.records)),
        min_boundary_distance=min_bd,
        collision_count=collisions,
        solve_time_median_ms=float(np.percentile(times, 50)),
        solve_time_p99_ms=float(np.percentile(times, 99)),
    )
