import numpy as np
import pytest

from fgmpc.factors import dynamics_residual
from fgmpc.manifold import State, exp_so3, is_rotation, log_so3
from fgmpc.vehicle import (
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

G = 9.81


def random_state(rng):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return State(rng.standard_normal(3), exp_so3(axis * rng.uniform(0, 1.5)),
                 rng.standard_normal(3))


def test_hover_is_equilibrium():
    x = State(np.array([1.0, 2.0, 3.0]), np.eye(3), np.zeros(3))
    u = np.array([0, 0, 0, 0, 0, G])
    y = propagate_universal(x, u, 0.1, G)
    np.testing.assert_allclose(y.p, x.p, atol=1e-15)
    np.testing.assert_allclose(y.R, x.R, atol=1e-15)
    np.testing.assert_allclose(y.v, x.v, atol=1e-15)


def test_free_fall_kinematics():
    x = State.identity()
    u = np.zeros(6)
    y = propagate_universal(x, u, 1.0, G)
    np.testing.assert_allclose(y.v, [0, 0, -9.81], atol=1e-12)
    np.testing.assert_allclose(y.p, [0, 0, -4.905], atol=1e-12)


def test_propagation_zeroes_dynamics_residual():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = random_state(rng)
        u = rng.standard_normal(6) * 2.0
        dt = rng.uniform(0.01, 0.1)
        y = propagate_universal(x, u, dt, G)
        r = dynamics_residual(x, u, y, dt, G)
        assert np.abs(r).max() < 1e-12


def test_input_dataclasses_round_trip():
    u = UniversalInput(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(u.as_array(), [0.1, 0.2, 0.3, 1, 2, 3])
    q = QuadrotorInput(np.zeros(3), 12.0)
    np.testing.assert_allclose(q.as_array(), [0, 0, 0, 12.0])
    x = State.identity()
    y1 = propagate_universal(x, u, 0.1, G)
    y2 = propagate_universal(x, u.as_array(), 0.1, G)
    np.testing.assert_allclose(y1.p, y2.p, atol=1e-15)


# -- quadrotor ---------------------------------------------------------------

def test_quadrotor_hover_thrust():
    params = QuadrotorParams(mass=1.3)
    x = State(np.zeros(3), np.eye(3), np.zeros(3))
    u = np.array([0, 0, 0, 1.3 * G])
    y = propagate_quadrotor(x, u, params, 0.1)
    np.testing.assert_allclose(y.p, x.p, atol=1e-14)
    np.testing.assert_allclose(y.v, x.v, atol=1e-14)


def test_quadrotor_nests_universal_when_dragless():
    rng = np.random.default_rng(4)
    params = QuadrotorParams(mass=1.7)
    for _ in range(20):
        x = random_state(rng)
        u4 = np.append(rng.standard_normal(3), rng.uniform(0, 30))
        u6 = np.concatenate([u4[0:3], [0, 0, u4[3] / params.mass]])
        yq = propagate_quadrotor(x, u4, params, 0.05)
        yu = propagate_universal(x, u6, 0.05, params.gravity)
        np.testing.assert_array_equal(yq.p, yu.p)
        np.testing.assert_array_equal(yq.R, yu.R)
        np.testing.assert_array_equal(yq.v, yu.v)


def test_quadrotor_drag_decelerates_level_flight():
    params = QuadrotorParams(mass=1.0, drag=-0.1 * np.eye(3))
    x = State(np.zeros(3), np.eye(3), np.array([2.0, 0, 0]))
    u = np.array([0, 0, 0, params.mass * G])
    y = propagate_quadrotor(x, u, params, 0.1)
    # drag oracle: a = R D R^T v / m = -0.1 * 2 / 1 along x
    np.testing.assert_allclose(y.v, [2.0 - 0.02, 0, 0], atol=1e-12)
    assert y.v[0] < x.v[0]


def test_quadrotor_energy_conservation_ballistic():
    # D = 0, omega = 0, T = 0: the discretization conserves mechanical energy
    params = QuadrotorParams(mass=1.0)
    x = State(np.zeros(3), np.eye(3), np.array([1.0, 0.5, 2.0]))
    u = np.zeros(4)

    def energy(s):
        return 0.5 * float(s.v @ s.v) + G * s.p[2]

    e0 = energy(x)
    for _ in range(1000):
        x = propagate_quadrotor(x, u, params, 1e-3)
    assert abs(energy(x) - e0) / abs(e0) < 1e-3


def test_rotation_validity_over_long_chains():
    rng = np.random.default_rng(5)
    params = QuadrotorParams(mass=1.0)
    x = State.identity()
    u = np.array([0.7, -0.4, 0.3, G])
    for _ in range(10_000):
        x = propagate_quadrotor(x, u, params, 0.001)
    assert is_rotation(x.R, tol=1e-9)


def test_quadrotor_params_validation():
    with pytest.raises(ValueError):
        QuadrotorParams(mass=0.0)


# -- affine decomposition ----------------------------------------------------

def test_affine_identity_chart():
    x = State(np.zeros(3), np.eye(3), np.array([1.0, 2.0, 3.0]))
    f, g = affine_decompose(x, G)
    np.testing.assert_allclose(f[0:3], [1, 2, 3], atol=1e-15)
    np.testing.assert_allclose(f[3:6], 0, atol=1e-15)
    np.testing.assert_allclose(f[6:9], [0, 0, -G], atol=1e-15)
    np.testing.assert_allclose(g[3:6, 0:3], np.eye(3), atol=1e-15)
    np.testing.assert_allclose(g[6:9, 3:6], np.eye(3), atol=1e-15)


def test_affine_matches_finite_difference_flow():
    # chart-rate oracle: the (p, log R, v) derivative of a tiny propagation
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = random_state(rng)
        u = rng.standard_normal(6)
        f, g = affine_decompose(x, G)
        xdot = f + g @ u
        eps = 1e-6
        xp = propagate_universal(x, u, eps, G)
        xm = propagate_universal(x, u, -eps, G)
        fd = np.concatenate([
            (xp.p - xm.p) / (2 * eps),
            (log_so3(xp.R) - log_so3(xm.R)) / (2 * eps),
            (xp.v - xm.v) / (2 * eps),
        ])
        np.testing.assert_allclose(xdot, fd, atol=1e-5)


def test_make_model():
    q = make_model("quadrotor", mass=2.0)
    assert isinstance(q, QuadrotorModel) and q.mass == 2.0
    u = make_model("universal")
    assert isinstance(u, UniversalModel)
    with pytest.raises(ValueError):
        make_model("bicycle")


def test_model_hover_controls():
    q = QuadrotorModel(QuadrotorParams(mass=2.0))
    np.testing.assert_allclose(q.hover_control(), [0, 0, 0, 2.0 * G])
    u = UniversalModel()
    np.testing.assert_allclose(u.hover_control(), [0, 0, 0, 0, 0, G])
