"""SO(3) and composite-state manifold primitives.

Conventions used throughout the package:

- Rotations are 3x3 direction-cosine matrices mapping body-frame vectors
  into the world frame (``R @ v_body = v_world``).
- The vehicle state lives on R^3 x SO(3) x R^3 as ``(p, R, v)`` with
  position and velocity expressed in the world frame.
- Tangent vectors are 9-vectors ordered ``(dp, dtheta, dv)`` where
  ``dtheta`` is a rotation-vector increment applied on the right:
  ``R' = R @ exp_so3(dtheta)``.

All operations are pure functions over immutable values and are safe to
call from any thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this angle the closed forms are replaced by Taylor expansions
# (2nd order for exp/log, 4th order for the rotation-rate map), keeping
# relative error under ~1e-12 near zero.
SMALL_ANGLE = 1e-6

# trace(R) must exceed -1 by this much for the log to be well defined.
CUT_LOCUS_TRACE_MARGIN = 1e-9

_EYE3 = np.eye(3)


class CutLocusError(ValueError):
    """Rotation logarithm requested too close to the pi cut locus."""


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    x, y, z = v
    S = np.zeros((3, 3))
    S[0, 1] = -z
    S[0, 2] = y
    S[1, 0] = z
    S[1, 2] = -x
    S[2, 0] = -y
    S[2, 1] = x
    return S


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of hat: extract the 3-vector from a skew-symmetric matrix."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> SO(3) via the Rodrigues closed form."""
    theta = np.asarray(theta, dtype=float)
    angle = math.sqrt(float(theta @ theta))
    S = hat(theta)
    if angle < SMALL_ANGLE:
        return _EYE3 + S + 0.5 * (S @ S)
    c1 = math.sin(angle) / angle
    c2 = (1.0 - math.cos(angle)) / (angle * angle)
    return _EYE3 + c1 * S + c2 * (S @ S)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Logarithmic map SO(3) -> so(3), returning a rotation vector.

    Raises:
        CutLocusError: if the rotation angle is within ~3e-5 rad of pi.
            In the MPC setting increments never approach pi in one step,
            so hitting this indicates a bug rather than a state to recover
            from; no best-effort value is returned.
    """
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace <= -1.0 + CUT_LOCUS_TRACE_MARGIN:
        raise CutLocusError(
            f"rotation log near cut locus: trace(R) = {trace:.12f} <= -1 + 1e-9"
        )
    w = np.empty(3)
    w[0] = 0.5 * (R[2, 1] - R[1, 2])  # == sin(angle) * axis
    w[1] = 0.5 * (R[0, 2] - R[2, 0])
    w[2] = 0.5 * (R[1, 0] - R[0, 1])
    cos_angle = 0.5 * (trace - 1.0)
    sin_angle = math.sqrt(float(w @ w))
    angle = math.atan2(sin_angle, cos_angle)
    if angle < SMALL_ANGLE:
        # log(R) ~ w * (1 + angle^2/6), 2nd-order Taylor of angle/sin(angle)
        return w * (1.0 + angle * angle / 6.0)
    return w * (angle / sin_angle)


def h_theta(theta: np.ndarray) -> np.ndarray:
    """Rotation-rate map sum_k (-1)^k/(k+1)! hat(theta)^k (right Jacobian of SO(3)).

    Relates a body angular velocity to the time derivative of the
    rotation-vector chart: dtheta/dt = h_theta(theta)^-1 @ omega.
    Satisfies h_theta(theta) @ theta == theta exactly.
    """
    theta = np.asarray(theta, dtype=float)
    angle2 = float(theta @ theta)
    angle = math.sqrt(angle2)
    S = hat(theta)
    if angle < SMALL_ANGLE:
        a = 0.5 - angle2 / 24.0 + angle2 * angle2 / 720.0
        b = 1.0 / 6.0 - angle2 / 120.0 + angle2 * angle2 / 5040.0
    else:
        a = (1.0 - math.cos(angle)) / angle2
        b = (angle - math.sin(angle)) / (angle2 * angle)
    return _EYE3 - a * S + b * (S @ S)


def h_theta_inv(theta: np.ndarray) -> np.ndarray:
    """Closed-form inverse of h_theta (inverse right Jacobian of SO(3))."""
    theta = np.asarray(theta, dtype=float)
    angle2 = float(theta @ theta)
    angle = math.sqrt(angle2)
    S = hat(theta)
    if angle < SMALL_ANGLE:
        c = 1.0 / 12.0 + angle2 / 720.0
    else:
        c = 1.0 / angle2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return _EYE3 + 0.5 * S + c * (S @ S)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    """True if R is orthonormal with determinant +1 within tol (Frobenius)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    E = R.T @ R
    E[0, 0] -= 1.0
    E[1, 1] -= 1.0
    E[2, 2] -= 1.0
    if math.sqrt(float((E * E).sum())) > tol:
        return False
    det = (R[0, 0] * (R[1, 1] * R[2, 2] - R[1, 2] * R[2, 1])
           - R[0, 1] * (R[1, 0] * R[2, 2] - R[1, 2] * R[2, 0])
           + R[0, 2] * (R[1, 0] * R[2, 1] - R[1, 1] * R[2, 0]))
    return abs(det - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class State:
    """Vehicle state on R^3 x SO(3) x R^3.

    Attributes:
        p: position in the world frame [m].
        R: body-to-world rotation matrix.
        v: velocity in the world frame [m/s].
    """

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray

    TANGENT_DIM = 9

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        if not is_rotation(self.R, tol=1e-6):
            raise ValueError("State.R is not a rotation matrix (orthonormality/det check failed)")

    @classmethod
    def identity(cls) -> "State":
        return cls(np.zeros(3), np.eye(3), np.zeros(3))

    @classmethod
    def _trusted(cls, p: np.ndarray, R: np.ndarray, v: np.ndarray) -> "State":
        """Constructor bypass for internal retractions and propagation,
        where the rotation is orthonormal by construction."""
        out = object.__new__(cls)
        object.__setattr__(out, "p", p)
        object.__setattr__(out, "R", R)
        object.__setattr__(out, "v", v)
        return out

    def rotvec(self) -> np.ndarray:
        """Rotation expressed as a rotation vector, log_so3(R)."""
        return log_so3(self.R)


def state_boxplus(x: State, delta: np.ndarray) -> State:
    """Retract a 9-vector tangent increment (dp, dtheta, dv) onto the state."""
    delta = np.asarray(delta, dtype=float).reshape(9)
    return State._trusted(
        x.p + delta[0:3],
        x.R @ exp_so3(delta[3:6]),
        x.v + delta[6:9],
    )


def state_boxminus(x1: State, x2: State) -> np.ndarray:
    """Tangent-space difference (p1-p2, log(R2^T R1), v1-v2) such that
    x2 boxplus (x1 boxminus x2) == x1.

    Raises:
        CutLocusError: if the relative rotation angle reaches pi.
    """
    out = np.empty(9)
    out[0:3] = x1.p - x2.p
    out[3:6] = log_so3(x2.R.T @ x1.R)
    out[6:9] = x1.v - x2.v
    return out
