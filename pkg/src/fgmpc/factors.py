"""MPC factor catalog.

Residuals and analytic tangent-space Jacobians for the six factor
families used by the receding-horizon controller: dynamics, prior,
reference, control bound, control rate, and the two obstacle-avoidance
barrier residuals (distance-based and velocity-extended).

Sign conventions: the barrier h is positive inside the safe set
(h >= 0 iff center distance >= d_safe); the barrier residuals penalize
violations of hdot + alpha * h >= 0 through a max clamp, so they are
zero whenever the safety condition already holds. At the clamp kink the
Jacobian is taken as zero (inactive convention), which keeps the solver
from chattering at the constraint boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph_core import Factor, NoiseModel, control_key, state_key
from .manifold import State, h_theta_inv, hat, log_so3, state_boxminus
from .vehicle import E3, VehicleModel

# Perturbations this close to the obstacle center make the barrier and
# its derivatives meaningless.
_MIN_CENTER_DISTANCE = 1e-9


class CbfDomainError(ValueError):
    """Robot and obstacle centers coincide; barrier undefined."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class DynamicsNoise:
    """Gaussian noise standard deviations driving the dynamics covariance."""

    sigma_a: float
    sigma_omega: float
    dt: float

    def __post_init__(self):
        if self.sigma_a <= 0 or self.sigma_omega <= 0 or self.dt <= 0:
            raise ValueError("DynamicsNoise requires sigma_a, sigma_omega, dt > 0")


@dataclass(frozen=True)
class ControlBounds:
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float).reshape(-1))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float).reshape(-1))
        if self.u_min.shape != self.u_max.shape:
            raise ValueError("u_min and u_max must have equal length")
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min must be elementwise <= u_max")

    @property
    def dim(self) -> int:
        return self.u_min.shape[0]


@dataclass(frozen=True)
class Obstacle:
    """Spherical obstacle: world-frame center, velocity and radius."""

    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        if self.radius < 0:
            raise ValueError(f"obstacle radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class CbfParams:
    """Barrier shaping parameters.

    alpha is the class-K gain, gamma the velocity-extension gain (0
    recovers the pure distance barrier), d_margin the clearance added to
    each obstacle radius, weight the scalar information on the barrier
    residual. classk_mode selects what the alpha term multiplies in the
    velocity-extended residual: 'paper-exact' uses the distance barrier,
    'theory-consistent' the velocity-extended one.
    """

    alpha: float = 1.0
    gamma: float = 0.0
    d_margin: float = 0.3
    weight: float = 1.0
    classk_mode: str = "paper-exact"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.weight <= 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")
        if self.classk_mode not in ("paper-exact", "theory-consistent"):
            raise ValueError(f"unknown classk_mode {self.classk_mode!r}")

    def d_safe(self, obstacle: Obstacle) -> float:
        ds = obstacle.radius + self.d_margin
        if ds <= 0:
            raise ValueError(f"d_safe must be > 0, got {ds}")
        return ds


# ---------------------------------------------------------------------------
# dynamics

def _dynamics_core(x_k: State, x_k1: State, dt: float, gravity: float):
    """Shared pieces of the dynamics rows: (R_k^T, position defect A,
    velocity defect B, relative rotation vector phi)."""
    RkT = x_k.R.T
    A = x_k1.p - x_k.v * dt + (0.5 * gravity * dt * dt) * E3 - x_k.p
    B = x_k1.v - x_k.v + (gravity * dt) * E3
    phi = log_so3(RkT @ x_k1.R)
    return RkT, A, B, phi


def _dynamics_res(core, u: np.ndarray, dt: float) -> np.ndarray:
    RkT, A, B, phi = core
    r = np.empty(9)
    r[0:3] = RkT @ A - 0.5 * dt * dt * u[3:6]
    r[3:6] = phi - u[0:3] * dt
    r[6:9] = RkT @ B - u[3:6] * dt
    return r


def _dynamics_state_jacs(core, dt: float) -> tuple[np.ndarray, np.ndarray]:
    RkT, A, B, phi = core
    Hinv = h_theta_inv(phi)
    J_xk = np.zeros((9, 9))
    J_xk[0:3, 0:3] = -RkT
    J_xk[0:3, 3:6] = hat(RkT @ A)
    J_xk[0:3, 6:9] = -dt * RkT
    J_xk[3:6, 3:6] = -Hinv.T  # h_theta_inv(-phi) == h_theta_inv(phi)^T
    J_xk[6:9, 3:6] = hat(RkT @ B)
    J_xk[6:9, 6:9] = -RkT

    J_xk1 = np.zeros((9, 9))
    J_xk1[0:3, 0:3] = RkT
    J_xk1[3:6, 3:6] = Hinv
    J_xk1[6:9, 6:9] = RkT
    return J_xk, J_xk1


def _dynamics_control_jac6(dt: float) -> np.ndarray:
    """Constant Jacobian of the dynamics residual w.r.t. (omega, a_body)."""
    J_u = np.zeros((9, 6))
    dt_eye = dt * np.eye(3)
    J_u[0:3, 3:6] = -0.5 * dt * dt_eye
    J_u[3:6, 0:3] = -dt_eye
    J_u[6:9, 3:6] = -dt_eye
    return J_u


def dynamics_residual(x_k: State, u: np.ndarray, x_k1: State, dt: float,
                      gravity: float) -> np.ndarray:
    """Discrete dynamics residual for u = (omega, a_body); zero exactly on
    zero-order-hold propagated triples.

    Rows: position   R_k^T (p_k1 - v_k dt + 0.5 e3 g dt^2 - p_k) - 0.5 a dt^2
          rotation   log(R_k^T R_k1) - omega dt
          velocity   R_k^T (v_k1 - v_k + e3 g dt) - a dt
    """
    u = np.asarray(u, dtype=float)
    return _dynamics_res(_dynamics_core(x_k, x_k1, dt, gravity), u, dt)


def dynamics_jacobians(x_k: State, u: np.ndarray, x_k1: State, dt: float,
                       gravity: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic Jacobians of dynamics_residual w.r.t. the tangent of x_k,
    the control (omega, a_body), and the tangent of x_k1."""
    J_xk, J_xk1 = _dynamics_state_jacs(_dynamics_core(x_k, x_k1, dt, gravity), dt)
    return J_xk, _dynamics_control_jac6(dt), J_xk1


def dynamics_covariance(noise: DynamicsNoise) -> np.ndarray:
    """9x9 covariance of the dynamics residual from the input noise stds.

    Exact integration of white acceleration noise couples the position
    and velocity blocks, so the result is symmetric PSD but rank
    deficient; add jitter before inverting it into an information matrix.
    """
    dt, sa2, sw2 = noise.dt, noise.sigma_a ** 2, noise.sigma_omega ** 2
    P = np.zeros((9, 9))
    I3 = np.eye(3)
    P[0:3, 0:3] = 0.25 * dt * dt * sa2 * I3
    P[0:3, 6:9] = 0.5 * dt * sa2 * I3
    P[6:9, 0:3] = 0.5 * dt * sa2 * I3
    P[3:6, 3:6] = sw2 * I3
    P[6:9, 6:9] = sa2 * I3
    return dt * dt * P


# ---------------------------------------------------------------------------
# bounds, rate, reference

def control_bound_residual(u: np.ndarray, bounds: ControlBounds) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.maximum(u - bounds.u_max, 0.0) + np.maximum(bounds.u_min - u, 0.0)


def control_bound_jacobian(u: np.ndarray, bounds: ControlBounds) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    g = np.where(u > bounds.u_max, 1.0, 0.0) + np.where(u < bounds.u_min, -1.0, 0.0)
    return np.diag(g)


def control_rate_residual(u_k: np.ndarray, u_k1: np.ndarray) -> np.ndarray:
    u_k = np.asarray(u_k, dtype=float)
    u_k1 = np.asarray(u_k1, dtype=float)
    if u_k.shape != u_k1.shape:
        raise ValueError("control rate residual requires equal dimensions")
    return u_k - u_k1


def state_error_residual(x: State, x_ref: State) -> np.ndarray:
    """x boxminus x_ref; serves both the reference and the prior factor."""
    return state_boxminus(x, x_ref)


def state_error_jacobian(x: State, x_ref: State) -> np.ndarray:
    J = np.eye(9)
    J[3:6, 3:6] = h_theta_inv(log_so3(x_ref.R.T @ x.R))
    return J


# ---------------------------------------------------------------------------
# barriers

def cbf_h(p_b: np.ndarray, obstacle: Obstacle, d_safe: float) -> float:
    """Distance barrier 1/d_safe - 1/d_o; >= 0 iff d_o >= d_safe."""
    q = np.asarray(p_b, dtype=float) - obstacle.position
    d = math.sqrt(float(q @ q))
    if d < _MIN_CENTER_DISTANCE:
        raise CbfDomainError("robot position coincides with the obstacle center")
    return 1.0 / d_safe - 1.0 / d


def cbf_margin(x: State, obstacle: Obstacle, params: CbfParams) -> float:
    """Signed violation -alpha h - hdot of the distance-barrier condition,
    with hdot = q^T v_b / d^3 (the obstacle's own motion does not enter the
    derivative). Positive means the condition is violated."""
    q = x.p - obstacle.position
    d = math.sqrt(float(q @ q))
    if d < _MIN_CENTER_DISTANCE:
        raise CbfDomainError("robot position coincides with the obstacle center")
    h = 1.0 / params.d_safe(obstacle) - 1.0 / d
    hdot = float(q @ x.v) / d ** 3
    return -params.alpha * h - hdot


def cbf_residual(x: State, obstacle: Obstacle, params: CbfParams) -> float:
    """max(-alpha h - hdot, 0): zero whenever the barrier condition holds."""
    return max(cbf_margin(x, obstacle, params), 0.0)


def cbf_state_jacobian(x: State, obstacle: Obstacle, params: CbfParams) -> np.ndarray:
    """1x9 derivative of cbf_residual over the state tangent; zero on the
    inactive branch and at the kink."""
    q = x.p - obstacle.position
    d = math.sqrt(float(q @ q))
    if d < _MIN_CENTER_DISTANCE:
        raise CbfDomainError("robot position coincides with the obstacle center")
    h = 1.0 / params.d_safe(obstacle) - 1.0 / d
    qv = float(q @ x.v)
    val = -params.alpha * h - qv / d ** 3
    J = np.zeros((1, 9))
    if val <= 0.0:
        return J
    J[0, 0:3] = -params.alpha * q / d ** 3 - x.v / d ** 3 + 3.0 * qv * q / d ** 5
    J[0, 6:9] = -q / d ** 3
    return J


def vcbf_h(x: State, obstacle: Obstacle, params: CbfParams) -> float:
    """Velocity-extended barrier: the distance barrier plus gamma times the
    relative velocity projected on the inter-centroid unit vector."""
    q = x.p - obstacle.position
    d = math.sqrt(float(q @ q))
    if d < _MIN_CENTER_DISTANCE:
        raise CbfDomainError("robot position coincides with the obstacle center")
    n = q / d
    return 1.0 / params.d_safe(obstacle) - 1.0 / d + params.gamma * float(n @ (x.v - obstacle.velocity))


def _vcbf_terms(x: State, u: np.ndarray, obstacle: Obstacle, params: CbfParams,
                model: VehicleModel):
    """Shared geometry for the velocity-extended residual and its Jacobians."""
    q = x.p - obstacle.position
    d = math.sqrt(float(q @ q))
    if d < _MIN_CENTER_DISTANCE:
        raise CbfDomainError("robot position coincides with the obstacle center")
    n = q / d
    s = x.v - obstacle.velocity
    gamma = params.gamma
    # gradient of h wrt p and v
    grad_p = q / d ** 3 + gamma * (s - n * float(n @ s)) / d
    a_b = model.body_accel(np.asarray(u, dtype=float))
    w = x.R @ a_b - model.gravity * E3
    hdot = float(grad_p @ x.v) + gamma * float(n @ w)
    h_c = 1.0 / params.d_safe(obstacle) - 1.0 / d
    h_v = h_c + gamma * float(n @ s)
    h_k = h_c if params.classk_mode == "paper-exact" else h_v
    val = -hdot - params.alpha * h_k
    return q, d, n, s, grad_p, a_b, w, h_c, h_v, val


def vcbf_margin(x: State, u: np.ndarray, obstacle: Obstacle, params: CbfParams,
                model: VehicleModel) -> float:
    """Signed violation -hdot_vcbf - alpha h_classK of the velocity-extended
    barrier condition; positive means violated."""
    *_, val = _vcbf_terms(x, u, obstacle, params, model)
    return val


def vcbf_residual(x: State, u: np.ndarray, obstacle: Obstacle, params: CbfParams,
                  model: VehicleModel) -> float:
    """max(-hdot_vcbf - alpha h_classK, 0), the velocity-extended barrier
    condition driven through the control-affine dynamics."""
    *_, val = _vcbf_terms(x, u, obstacle, params, model)
    return max(val, 0.0)


def _vcbf_state_jac(terms, x: State, params: CbfParams) -> np.ndarray:
    q, d, n, s, grad_p, a_b, w, h_c, h_v, val = terms
    J = np.zeros((1, 9))
    if val <= 0.0:
        return J
    gamma, alpha = params.gamma, params.alpha
    v = x.v
    qv = float(q @ v)
    proj = np.eye(3) - np.outer(n, n)
    # d(hdot)/dp, assembled from the three p-dependent pieces of hdot
    f2 = float(s @ proj @ v)
    dhdot_dp = (v / d ** 3 - 3.0 * qv * q / d ** 5
                + gamma * (-f2 * q / d ** 3
                           - (float(n @ v) * s + float(s @ n) * v) @ proj / d ** 2)
                + gamma * (w @ proj) / d)
    dhdot_dv = q / d ** 3 + gamma * (v + s) @ proj / d
    if params.classk_mode == "paper-exact":
        dhk_dp = q / d ** 3
        dhk_dv = np.zeros(3)
    else:
        dhk_dp = grad_p
        dhk_dv = gamma * n
    J[0, 0:3] = -dhdot_dp - alpha * dhk_dp
    J[0, 3:6] = gamma * (n @ x.R @ hat(a_b))
    J[0, 6:9] = -dhdot_dv - alpha * dhk_dv
    return J


def _vcbf_control_jac(terms, x: State, u: np.ndarray, params: CbfParams,
                      model: VehicleModel) -> np.ndarray:
    q, d, n, s, grad_p, a_b, w, h_c, h_v, val = terms
    m = model.control_dim
    if val <= 0.0:
        return np.zeros((1, m))
    J_a = model.body_accel_jacobian(np.asarray(u, dtype=float))
    return (-params.gamma * (n @ x.R @ J_a)).reshape(1, m)


def vcbf_state_jacobian(x: State, u: np.ndarray, obstacle: Obstacle, params: CbfParams,
                        model: VehicleModel) -> np.ndarray:
    """1x9 derivative of vcbf_residual over the state tangent; zero on the
    inactive branch and at the kink."""
    terms = _vcbf_terms(x, u, obstacle, params, model)
    return _vcbf_state_jac(terms, x, params)


def vcbf_control_jacobian(x: State, u: np.ndarray, obstacle: Obstacle, params: CbfParams,
                          model: VehicleModel) -> np.ndarray:
    """1xm derivative of vcbf_residual w.r.t. the control; for the quadrotor
    this is -gamma cos(theta)/m in the thrust column (theta the angle
    between the inter-centroid direction and the body z-axis) and zero in
    the angular-rate columns."""
    terms = _vcbf_terms(x, u, obstacle, params, model)
    return _vcbf_control_jac(terms, x, u, params, model)


# ---------------------------------------------------------------------------
# factor classes

class StateErrorFactor(Factor):
    """Unary boxminus penalty against a fixed target state; family 'prior'
    for the initial-state anchor, 'reference' for trajectory tracking."""

    def __init__(self, index: int, x_ref: State, noise: NoiseModel, family: str = "reference"):
        self.keys = (state_key(index),)
        self.dim = 9
        self.noise = noise
        self.family = family
        self.x_ref = x_ref

    _J_TEMPLATE = np.eye(9)

    def residual(self, x: State) -> np.ndarray:
        return state_error_residual(x, self.x_ref)

    def jacobians(self, x: State):
        return (state_error_jacobian(x, self.x_ref),)

    def residual_and_jacobians(self, x: State):
        r = state_error_residual(x, self.x_ref)
        J = self._J_TEMPLATE.copy()
        J[3:6, 3:6] = h_theta_inv(r[3:6])
        return r, (J,)


class DynamicsFactor(Factor):
    """Ternary factor (x_k, u_k, x_k+1) enforcing the discrete dynamics of
    the given vehicle model."""

    family = "dynamics"

    def __init__(self, index: int, model: VehicleModel, dt: float, noise: NoiseModel):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.keys = (state_key(index), control_key(index), state_key(index + 1))
        self.dim = 9
        self.noise = noise
        self.model = model
        self.dt = dt
        # Both vehicle models map control to body acceleration affinely, so
        # the control Jacobian is a constant of the factor.
        J_u6 = _dynamics_control_jac6(dt)
        m = model.control_dim
        self._J_u = np.zeros((9, m))
        self._J_u[:, 0:3] = J_u6[:, 0:3]
        self._J_u += J_u6[:, 3:6] @ model.body_accel_jacobian(model.hover_control())

    def _universal_control(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.concatenate([u[0:3], self.model.body_accel(u)])

    def residual(self, x_k: State, u: np.ndarray, x_k1: State) -> np.ndarray:
        core = _dynamics_core(x_k, x_k1, self.dt, self.model.gravity)
        return _dynamics_res(core, self._universal_control(u), self.dt)

    def jacobians(self, x_k: State, u: np.ndarray, x_k1: State):
        core = _dynamics_core(x_k, x_k1, self.dt, self.model.gravity)
        J_xk, J_xk1 = _dynamics_state_jacs(core, self.dt)
        return J_xk, self._J_u, J_xk1

    def residual_and_jacobians(self, x_k: State, u: np.ndarray, x_k1: State):
        core = _dynamics_core(x_k, x_k1, self.dt, self.model.gravity)
        r = _dynamics_res(core, self._universal_control(u), self.dt)
        J_xk, J_xk1 = _dynamics_state_jacs(core, self.dt)
        return r, (J_xk, self._J_u, J_xk1)


class ControlBoundFactor(Factor):
    family = "bound"

    def __init__(self, index: int, bounds: ControlBounds, noise: NoiseModel):
        self.keys = (control_key(index),)
        self.dim = bounds.dim
        self.noise = noise
        self.bounds = bounds

    def residual(self, u: np.ndarray) -> np.ndarray:
        return control_bound_residual(u, self.bounds)

    def jacobians(self, u: np.ndarray):
        return (control_bound_jacobian(u, self.bounds),)


class ControlRateFactor(Factor):
    family = "rate"

    def __init__(self, index: int, dim: int, noise: NoiseModel):
        self.keys = (control_key(index), control_key(index + 1))
        self.dim = dim
        self.noise = noise
        self._eye = np.eye(dim)

    def residual(self, u_k: np.ndarray, u_k1: np.ndarray) -> np.ndarray:
        return control_rate_residual(u_k, u_k1)

    def jacobians(self, u_k, u_k1):
        return (self._eye, -self._eye)


class DistanceCbfFactor(Factor):
    """Unary barrier factor on a state, using the obstacle position
    predicted for that horizon step."""

    family = "cbf"

    def __init__(self, index: int, obstacle: Obstacle, params: CbfParams, noise: NoiseModel):
        self.keys = (state_key(index),)
        self.dim = 1
        self.noise = noise
        self.obstacle = obstacle
        self.params = params

    def residual(self, x: State) -> np.ndarray:
        return np.array([cbf_residual(x, self.obstacle, self.params)])

    def jacobians(self, x: State):
        return (cbf_state_jacobian(x, self.obstacle, self.params),)


class VelocityCbfFactor(Factor):
    """Binary barrier factor on (x_k, u_k): the velocity-extended condition
    couples the control through the commanded acceleration."""

    family = "cbf"

    def __init__(self, index: int, obstacle: Obstacle, params: CbfParams,
                 model: VehicleModel, noise: NoiseModel):
        self.keys = (state_key(index), control_key(index))
        self.dim = 1
        self.noise = noise
        self.obstacle = obstacle
        self.params = params
        self.model = model

    def residual(self, x: State, u: np.ndarray) -> np.ndarray:
        return np.array([vcbf_residual(x, u, self.obstacle, self.params, self.model)])

    def jacobians(self, x: State, u: np.ndarray):
        terms = _vcbf_terms(x, u, self.obstacle, self.params, self.model)
        return (_vcbf_state_jac(terms, x, self.params),
                _vcbf_control_jac(terms, x, u, self.params, self.model))

    def residual_and_jacobians(self, x: State, u: np.ndarray):
        terms = _vcbf_terms(x, u, self.obstacle, self.params, self.model)
        r = np.array([max(terms[-1], 0.0)])
        return r, (_vcbf_state_jac(terms, x, self.params),
                   _vcbf_control_jac(terms, x, u, self.params, self.model))
