import numpy as np
import pytest

from fgmpc.cli import jacobian_case_generators
from fgmpc.factors import (
    CbfDomainError,
    CbfParams,
    ControlBounds,
    DynamicsNoise,
    Obstacle,
    VelocityCbfFactor,
    cbf_h,
    cbf_margin,
    cbf_residual,
    cbf_state_jacobian,
    control_bound_jacobian,
    control_bound_residual,
    control_rate_residual,
    dynamics_covariance,
    dynamics_residual,
    state_error_residual,
    vcbf_control_jacobian,
    vcbf_h,
    vcbf_residual,
)
from fgmpc.graph_core import NoiseModel, Values, control_key, jacobian_fd_errors, state_key
from fgmpc.manifold import State, exp_so3
from fgmpc.vehicle import QuadrotorModel, QuadrotorParams, UniversalModel, propagate_universal

G = 9.81
UNIVERSAL = UniversalModel()
QUAD = QuadrotorModel(QuadrotorParams(mass=1.2))


def random_state(rng, max_angle=1.5):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return State(2 * rng.standard_normal(3), exp_so3(axis * rng.uniform(0, max_angle)),
                 2 * rng.standard_normal(3))


# -- dynamics ------------------------------------------------------------------

def test_dynamics_residual_zero_at_hover():
    x = State(np.array([0.0, 0, 1]), np.eye(3), np.zeros(3))
    u = np.array([0, 0, 0, 0, 0, G])
    r = dynamics_residual(x, u, x, 0.1, G)
    np.testing.assert_allclose(r, np.zeros(9), atol=1e-14)


def test_dynamics_residual_zero_on_propagated_triples():
    rng = np.random.default_rng(10)
    for _ in range(100):
        x = random_state(rng)
        u = 2 * rng.standard_normal(6)
        dt = rng.uniform(0.01, 0.1)
        y = propagate_universal(x, u, dt, G)
        assert np.abs(dynamics_residual(x, u, y, dt, G)).max() <= 1e-12


def test_dynamics_residual_nonzero_off_propagation():
    rng = np.random.default_rng(11)
    x = random_state(rng)
    u = rng.standard_normal(6)
    y = propagate_universal(x, u, 0.1, G)
    y_off = State(y.p + [0.01, 0, 0], y.R, y.v)
    assert np.abs(dynamics_residual(x, u, y_off, 0.1, G)).max() > 1e-4


def test_dynamics_residual_pure_yaw_rate_rotation_row():
    x = State(np.zeros(3), np.eye(3), np.zeros(3))
    u = np.array([0, 0, 1.0, 0, 0, 0])
    r = dynamics_residual(x, u, x, 0.1, G)
    # hand evaluation: Log(I) - omega dt
    np.testing.assert_allclose(r[3:6], [0, 0, -0.1], atol=1e-14)


def test_dynamics_covariance_hand_values():
    P = dynamics_covariance(DynamicsNoise(sigma_a=1.0, sigma_omega=1.0, dt=0.1))
    np.testing.assert_allclose(P[0:3, 0:3], 2.5e-5 * np.eye(3), atol=1e-18)
    np.testing.assert_allclose(P[3:6, 3:6], 1e-2 * np.eye(3), atol=1e-18)
    np.testing.assert_allclose(P[0:3, 6:9], 5e-4 * np.eye(3), atol=1e-18)
    np.testing.assert_allclose(P[6:9, 6:9], 1e-2 * np.eye(3), atol=1e-18)


def test_dynamics_covariance_symmetric_psd():
    rng = np.random.default_rng(12)
    for _ in range(100):
        noise = DynamicsNoise(sigma_a=rng.uniform(0.1, 3), sigma_omega=rng.uniform(0.1, 3),
                              dt=rng.uniform(0.01, 0.5))
        P = dynamics_covariance(noise)
        np.testing.assert_array_equal(P, P.T)
        assert np.linalg.eigvalsh(P).min() >= -1e-12


def test_dynamics_noise_validation():
    with pytest.raises(ValueError):
        DynamicsNoise(sigma_a=0.0, sigma_omega=1.0, dt=0.1)


# -- bounds and rate -------------------------------------------------------------

BOUNDS = ControlBounds(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


def test_bound_zero_inside():
    np.testing.assert_array_equal(control_bound_residual(np.array([0.2, -0.9]), BOUNDS),
                                  np.zeros(2))


def test_bound_upper_violation():
    r = control_bound_residual(np.array([1.5, 0.0]), BOUNDS)
    np.testing.assert_allclose(r, [0.5, 0.0], atol=1e-15)


def test_bound_lower_violation():
    r = control_bound_residual(np.array([0.0, -2.0]), BOUNDS)
    np.testing.assert_allclose(r, [0.0, 1.0], atol=1e-15)


def test_bound_nonnegative_and_zero_on_box():
    rng = np.random.default_rng(13)
    for _ in range(200):
        u = rng.uniform(-3, 3, size=2)
        r = control_bound_residual(u, BOUNDS)
        assert np.all(r >= 0)
        if np.all(u >= BOUNDS.u_min) and np.all(u <= BOUNDS.u_max):
            assert np.all(r == 0)


def test_bound_jacobian_signs_and_kink():
    J = control_bound_jacobian(np.array([1.5, -2.0]), BOUNDS)
    np.testing.assert_array_equal(np.diag(J), [1.0, -1.0])
    # exactly at the bound the subgradient convention is zero
    J_at = control_bound_jacobian(np.array([1.0, -1.0]), BOUNDS)
    np.testing.assert_array_equal(J_at, np.zeros((2, 2)))


def test_bounds_validation():
    with pytest.raises(ValueError):
        ControlBounds(np.array([1.0]), np.array([-1.0]))


def test_rate_residual():
    np.testing.assert_array_equal(control_rate_residual(np.array([1.0, 0]), np.array([1.0, 0])),
                                  np.zeros(2))
    np.testing.assert_array_equal(control_rate_residual(np.array([1.0, 0]), np.array([0.0, 1])),
                                  [1.0, -1.0])


def test_rate_antisymmetry():
    rng = np.random.default_rng(14)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_array_equal(control_rate_residual(a, b), -control_rate_residual(b, a))


# -- reference -------------------------------------------------------------------

def test_state_error_zero_at_target():
    rng = np.random.default_rng(15)
    x = random_state(rng)
    np.testing.assert_allclose(state_error_residual(x, x), np.zeros(9), atol=1e-12)


def test_state_error_position_block():
    x_ref = State.identity()
    x = State(np.array([1.0, 2, 3]), np.eye(3), np.zeros(3))
    np.testing.assert_allclose(state_error_residual(x, x_ref),
                               [1, 2, 3, 0, 0, 0, 0, 0, 0], atol=1e-14)


def test_state_error_yaw_block():
    x_ref = State.identity()
    x = State(np.zeros(3), exp_so3([0, 0, 0.3]), np.zeros(3))
    r = state_error_residual(x, x_ref)
    np.testing.assert_allclose(r[3:6], [0, 0, 0.3], atol=1e-12)


# -- distance barrier --------------------------------------------------------------

STATIC_OBS = Obstacle(np.zeros(3), np.zeros(3), 0.0)


def test_cbf_h_boundary():
    assert cbf_h(np.array([1.0, 0, 0]), STATIC_OBS, d_safe=1.0) == 0.0


def test_cbf_h_direct_value():
    np.testing.assert_allclose(cbf_h(np.array([2.0, 0, 0]), STATIC_OBS, 1.0), 0.5,
                               atol=1e-15)


def test_cbf_h_asymptote():
    assert abs(cbf_h(np.array([1e9, 0, 0]), STATIC_OBS, 1.0) - 1.0) < 1e-8


def test_cbf_h_sign_semantics():
    rng = np.random.default_rng(16)
    for _ in range(200):
        p = rng.standard_normal(3) * 3
        d_safe = rng.uniform(0.2, 2.0)
        d = np.linalg.norm(p)
        if d < 1e-6:
            continue
        assert (cbf_h(p, STATIC_OBS, d_safe) >= 0) == (d >= d_safe)


def test_cbf_h_domain_error():
    with pytest.raises(CbfDomainError):
        cbf_h(np.zeros(3), STATIC_OBS, 1.0)


def test_cbf_residual_boundary_equilibrium():
    params = CbfParams(alpha=1.0, d_margin=1.0)
    x = State(np.array([1.0, 0, 0]), np.eye(3), np.zeros(3))
    assert cbf_residual(x, STATIC_OBS, params) == 0.0


def test_cbf_residual_hand_value():
    # d_safe=1, alpha=1, p=[2,0,0], v=[-8,0,0]: alpha*h + hdot = 0.5 - 2 = -1.5
    params = CbfParams(alpha=1.0, d_margin=1.0)
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([-8.0, 0, 0]))
    np.testing.assert_allclose(cbf_residual(x, STATIC_OBS, params), 1.5, atol=1e-12)


def test_cbf_residual_receding_inactive():
    params = CbfParams(alpha=1.0, d_margin=1.0)
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([5.0, 0, 0]))
    assert cbf_residual(x, STATIC_OBS, params) == 0.0


def test_cbf_jacobian_zero_on_inactive_branch():
    params = CbfParams(alpha=1.0, d_margin=1.0)
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([5.0, 0, 0]))
    np.testing.assert_array_equal(cbf_state_jacobian(x, STATIC_OBS, params),
                                  np.zeros((1, 9)))


# -- velocity-extended barrier -------------------------------------------------------

def test_vcbf_h_reduces_to_cbf_h_at_gamma_zero():
    rng = np.random.default_rng(17)
    params = CbfParams(alpha=1.0, gamma=0.0, d_margin=0.5)
    for _ in range(100):
        x = random_state(rng)
        obs = Obstacle(x.p + rng.uniform(0.5, 3) * rng.standard_normal(3),
                       rng.standard_normal(3), 0.2)
        np.testing.assert_allclose(vcbf_h(x, obs, params),
                                   cbf_h(x.p, obs, params.d_safe(obs)), atol=1e-15)


def test_vcbf_h_boundary_receding():
    # at the boundary, h is gamma times the receding speed along n
    params = CbfParams(alpha=1.0, gamma=1.3, d_margin=1.0)
    x = State(np.array([1.0, 0, 0]), np.eye(3), np.array([0.7, 0, 0]))
    np.testing.assert_allclose(vcbf_h(x, STATIC_OBS, params), 1.3 * 0.7, atol=1e-12)


def test_vcbf_h_direct_value():
    # 1/1 - 1/2 + 1.3 * [1,0,0].(v_b - v_o) with closing speed 1
    params = CbfParams(alpha=1.0, gamma=1.3, d_margin=1.0)
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([-1.0, 0, 0]))
    np.testing.assert_allclose(vcbf_h(x, STATIC_OBS, params), 0.5 - 1.3, atol=1e-12)


def test_vcbf_residual_gamma_zero_reduction():
    rng = np.random.default_rng(18)
    for mode in ("paper-exact", "theory-consistent"):
        params = CbfParams(alpha=0.8, gamma=0.0, d_margin=0.4, classk_mode=mode)
        for _ in range(200):
            x = random_state(rng)
            obs = Obstacle(x.p + rng.uniform(0.5, 3) * rng.standard_normal(3),
                           rng.standard_normal(3), 0.2)
            u = np.append(rng.standard_normal(3), rng.uniform(0, 30))
            got = vcbf_residual(x, u, obs, params, QUAD)
            want = cbf_residual(x, obs, params)
            assert abs(got - want) <= 1e-12


def test_vcbf_residual_inactive_far_and_receding():
    params = CbfParams(alpha=1.0, gamma=0.5, d_margin=0.3)
    x = State(np.array([10.0, 0, 0]), np.eye(3), np.array([3.0, 0, 0]))
    u = np.array([0, 0, 0, 0, 0, G])
    assert vcbf_residual(x, u, STATIC_OBS, params, UNIVERSAL) == 0.0


def test_vcbf_residual_hand_case_both_modes():
    # static obstacle at origin, p=[2,0,0], v=[-3,0,0], R=I, a=g e3,
    # gamma=0.5, alpha=1, d_safe=1:
    #   grad_p = q/d^3 = [0.25,0,0] ((I-nn^T)s vanishes head-on)
    #   hdot = -0.75, h_cbf = 0.5, h_vcbf = 0.5 + 0.5*(-3) = -1.0
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([-3.0, 0, 0]))
    u = np.array([0, 0, 0, 0, 0, G])
    pe = CbfParams(alpha=1.0, gamma=0.5, d_margin=1.0, classk_mode="paper-exact")
    tc = CbfParams(alpha=1.0, gamma=0.5, d_margin=1.0, classk_mode="theory-consistent")
    np.testing.assert_allclose(vcbf_residual(x, u, STATIC_OBS, pe, UNIVERSAL), 0.25,
                               atol=1e-12)
    np.testing.assert_allclose(vcbf_residual(x, u, STATIC_OBS, tc, UNIVERSAL), 1.75,
                               atol=1e-12)


def test_vcbf_residual_against_flow_derivative_oracle():
    # independent oracle: differentiate h_vcbf numerically along the simulated
    # flow (obstacle frozen, as in the factor's derivative) and rebuild the
    # residual from -dh/dt - alpha*h.
    rng = np.random.default_rng(19)
    checked = 0
    while checked < 25:
        x = random_state(rng)
        obs = Obstacle(x.p + rng.uniform(1.0, 3.0) * _unit(rng), np.zeros(3), 0.3)
        params = CbfParams(alpha=rng.uniform(0.3, 1.5), gamma=rng.uniform(0.1, 1.5),
                           d_margin=rng.uniform(0.1, 0.5), classk_mode="paper-exact")
        u = 2 * rng.standard_normal(6)
        eps = 1e-6
        xp = propagate_universal(x, u, eps, G)
        xm = propagate_universal(x, u, -eps, G)
        hdot_fd = (vcbf_h(xp, obs, params) - vcbf_h(xm, obs, params)) / (2 * eps)
        want = max(-hdot_fd - params.alpha * cbf_h(x.p, obs, params.d_safe(obs)), 0.0)
        got = vcbf_residual(x, u, obs, params, UNIVERSAL)
        if abs(want) < 1e-4:
            continue  # skip near-kink samples where fd flips the branch
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)
        checked += 1


def _unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def test_vcbf_control_jacobian_inactive_zero_row():
    params = CbfParams(alpha=1.0, gamma=0.5, d_margin=0.3)
    x = State(np.array([10.0, 0, 0]), np.eye(3), np.array([3.0, 0, 0]))
    u = QUAD.hover_control()
    np.testing.assert_array_equal(vcbf_control_jacobian(x, u, STATIC_OBS, params, QUAD),
                                  np.zeros((1, 4)))


def test_vcbf_control_jacobian_thrust_column_structure():
    # active, obstacle along +x from the robot, R = I: n orthogonal to body z
    # so the thrust entry is -gamma cos(pi/2)/m = 0
    params = CbfParams(alpha=2.0, gamma=1.0, d_margin=1.5)
    x = State(np.array([1.8, 0, 0]), np.eye(3), np.array([-2.0, 0, 0]))
    u = QUAD.hover_control()
    r = vcbf_residual(x, u, STATIC_OBS, params, QUAD)
    assert r > 0
    J = vcbf_control_jacobian(x, u, STATIC_OBS, params, QUAD)
    np.testing.assert_array_equal(J[0, 0:3], np.zeros(3))
    assert abs(J[0, 3]) < 1e-15


def test_vcbf_control_jacobian_cos_theta_value():
    # tilt the body so n and R e3 subtend a known angle
    params = CbfParams(alpha=2.0, gamma=1.0, d_margin=1.5)
    tilt = exp_so3([0, -np.pi / 4, 0])  # body z leans toward +x
    x = State(np.array([1.8, 0, 0]), tilt, np.array([-2.0, 0, 0]))
    u = QUAD.hover_control()
    assert vcbf_residual(x, u, STATIC_OBS, params, QUAD) > 0
    J = vcbf_control_jacobian(x, u, STATIC_OBS, params, QUAD)
    cos_theta = float(np.array([1.0, 0, 0]) @ tilt @ np.array([0, 0, 1.0]))
    np.testing.assert_allclose(J[0, 3], -params.gamma * cos_theta / QUAD.mass,
                               atol=1e-12)


def test_cbf_factor_weight_enters_cost():
    params = CbfParams(alpha=1.0, gamma=0.5, d_margin=1.0, weight=100.0)
    f = VelocityCbfFactor(0, STATIC_OBS, params, UNIVERSAL,
                          NoiseModel.isotropic(1, params.weight))
    x = State(np.array([2.0, 0, 0]), np.eye(3), np.array([-3.0, 0, 0]))
    u = np.array([0, 0, 0, 0, 0, G])
    rw = f.noise.whiten(f.residual(x, u))
    np.testing.assert_allclose(float(rw @ rw), 100.0 * 0.25 ** 2, atol=1e-10)


# -- finite-difference sweep over every family (spec invariant) -----------------------

def test_all_factor_families_match_finite_differences():
    models = {"universal": UNIVERSAL, "quadrotor": QUAD}
    for family, gen in jacobian_case_generators(models).items():
        rng = np.random.default_rng(99)
        worst_rel = worst_abs = 0.0
        for _ in range(100):
            factor, values = gen(rng)
            rel, ab = jacobian_fd_errors(factor, values, 1e-6)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, ab)
        assert worst_rel < 1e-5, f"{family}: rel {worst_rel}"
        assert worst_abs < 1e-7, f"{family}: abs {worst_abs}"
