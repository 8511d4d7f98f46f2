"""Continuous-time vehicle models and zero-order-hold propagation.

Two control interfaces are supported:

- universal: u = (omega [rad/s], a [m/s^2]) with a the body-frame linear
  acceleration, so any platform tracked by a thrust/attitude-rate inner
  loop can be driven through the same factor set;
- quadrotor: u = (omega [rad/s], T [N]) with collective thrust along the
  body z-axis, body acceleration e3 * T / m.

Propagation uses semi-implicit Euler with an exact rotation increment,
which makes the propagated triple an exact zero of the dynamics factor
residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import State, exp_so3, h_theta_inv, log_so3

GRAVITY = 9.81

E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class UniversalInput:
    """Body angular velocity plus body-frame linear acceleration."""

    omega: np.ndarray
    accel: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.omega, float), np.asarray(self.accel, float)])


@dataclass(frozen=True)
class QuadrotorInput:
    """Body angular velocity plus collective thrust (N, non-negative)."""

    omega: np.ndarray
    thrust: float

    def as_array(self) -> np.ndarray:
        return np.append(np.asarray(self.omega, float), float(self.thrust))


@dataclass(frozen=True)
class QuadrotorParams:
    """Quadrotor physical parameters.

    drag is the 3x3 body-frame linear drag matrix (negative semidefinite
    or zero); thrust limits are expressed through the controller's
    ControlBounds, not here.
    """

    mass: float = 1.0
    drag: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    gravity: float = GRAVITY

    def __post_init__(self):
        if self.mass <= 0.0:
            raise ValueError(f"quadrotor mass must be positive, got {self.mass}")
        object.__setattr__(self, "drag", np.asarray(self.drag, dtype=float).reshape(3, 3))


def _as_control(u, dim: int) -> np.ndarray:
    if hasattr(u, "as_array"):
        u = u.as_array()
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != dim:
        raise ValueError(f"expected control of dimension {dim}, got {u.shape[0]}")
    return u


def propagate_universal(x: State, u, dt: float, gravity: float = GRAVITY) -> State:
    """Zero-order-hold step of the universal model.

    p' = p + v dt + 0.5 (R a - g e3) dt^2
    R' = R exp(omega dt)
    v' = v + (R a - g e3) dt
    """
    u = _as_control(u, 6)
    a_world = x.R @ u[3:6] - gravity * E3
    return State._trusted(
        x.p + x.v * dt + 0.5 * a_world * dt * dt,
        x.R @ exp_so3(u[0:3] * dt),
        x.v + a_world * dt,
    )


def propagate_quadrotor(x: State, u, params: QuadrotorParams, dt: float) -> State:
    """Zero-order-hold step of the quadrotor model.

    World acceleration: -g e3 + R e3 T/m + R D R^T v / m, where D is the
    body-frame drag matrix (the drag force on the world velocity mapped
    through the current attitude).
    """
    u = _as_control(u, 4)
    a_world = (
        -params.gravity * E3
        + x.R @ E3 * (u[3] / params.mass)
        + x.R @ params.drag @ x.R.T @ x.v / params.mass
    )
    return State._trusted(
        x.p + x.v * dt + 0.5 * a_world * dt * dt,
        x.R @ exp_so3(u[0:3] * dt),
        x.v + a_world * dt,
    )


def affine_decompose(x: State, gravity: float = GRAVITY) -> tuple[np.ndarray, np.ndarray]:
    """Control-affine form xdot = f(x) + g(x) u in the rotation-vector chart.

    The chart state is (p, theta, v) with theta = log(R). Returns
    f = [v; 0; -g e3] and the 9x6 input matrix with h_theta(theta)^-1 in
    the attitude rows and R in the velocity rows.
    """
    theta = log_so3(x.R)
    f = np.concatenate([x.v, np.zeros(3), -gravity * E3])
    g = np.zeros((9, 6))
    g[3:6, 0:3] = h_theta_inv(theta)
    g[6:9, 3:6] = x.R
    return f, g


class UniversalModel:
    """Universal thrust/attitude-rate vehicle: direct body acceleration input."""

    kind = "universal"
    control_dim = 6

    def __init__(self, gravity: float = GRAVITY):
        self.gravity = float(gravity)

    def body_accel(self, u: np.ndarray) -> np.ndarray:
        return u[3:6]

    def body_accel_jacobian(self, u: np.ndarray) -> np.ndarray:
        J = np.zeros((3, 6))
        J[:, 3:6] = np.eye(3)
        return J

    def hover_control(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, 0.0, 0.0, self.gravity])

    def propagate(self, x: State, u, dt: float) -> State:
        return propagate_universal(x, u, dt, self.gravity)


class QuadrotorModel:
    """Quadrotor with collective-thrust input.

    The drag matrix applies only to plant propagation; the control-side
    factors (dynamics, CBF) use the drag-free model, so any drag shows up
    as a disturbance absorbed by receding-horizon feedback.
    """

    kind = "quadrotor"
    control_dim = 4

    def __init__(self, params: QuadrotorParams | None = None):
        self.params = params or QuadrotorParams()
        self.gravity = self.params.gravity
        self.mass = self.params.mass

    def body_accel(self, u: np.ndarray) -> np.ndarray:
        return E3 * (u[3] / self.mass)

    def body_accel_jacobian(self, u: np.ndarray) -> np.ndarray:
        J = np.zeros((3, 4))
        J[:, 3] = E3 / self.mass
        return J

    def hover_control(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, self.mass * self.gravity])

    def propagate(self, x: State, u, dt: float) -> State:
        return propagate_quadrotor(x, u, self.params, dt)


VehicleModel = UniversalModel | QuadrotorModel


def make_model(kind: str, **kwargs) -> VehicleModel:
    """Build a vehicle model from its config name."""
    if kind == "universal":
        return UniversalModel(gravity=kwargs.get("gravity", GRAVITY))
    if kind == "quadrotor":
        params = QuadrotorParams(
            mass=kwargs.get("mass", 1.0),
            drag=kwargs.get("drag", np.zeros((3, 3))),
            gravity=kwargs.get("gravity", GRAVITY),
        )
        return QuadrotorModel(params)
    raise ValueError(f"unknown vehicle kind {kind!r} (expected 'universal' or 'quadrotor')")
