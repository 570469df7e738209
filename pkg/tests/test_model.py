"""Dynamics and kinematics checks against independent numeric oracles."""

import numpy as np
import pytest

from armnmpc import model
from armnmpc.model import ModelParams

DEFAULT = ModelParams()
NO_GRAV = ModelParams(g=0.0)
FRICTION = ModelParams(b1=12.0, b2=5.0)


def random_states(n, seed, th_scale=np.pi, td_scale=2.0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-th_scale, th_scale, (n, 2))
    theta_dot = rng.uniform(-td_scale, td_scale, (n, 2))
    return theta, theta_dot


# ---------------------------------------------------------------- mass matrix

def test_mass_matrix_symmetric():
    H = model.mass_matrix([0.0, 0.0], DEFAULT)
    assert H[0, 1] == H[1, 0]


def test_mass_matrix_matches_kinetic_energy_polarization():
    """H_ij recovered exactly from T(v) = 1/2 v^T H v via polarization."""
    theta = np.array([0.3, -1.2])
    H = model.mass_matrix(theta, DEFAULT)
    e = np.eye(2)
    for i in range(2):
        for j in range(2):
            tij = model.kinetic_energy(theta, e[i] + e[j], DEFAULT)
            ti = model.kinetic_energy(theta, e[i], DEFAULT)
            tj = model.kinetic_energy(theta, e[j], DEFAULT)
            np.testing.assert_allclose(H[i, j], tij - ti - tj, rtol=1e-12)


def test_mass_matrix_positive_definite_everywhere():
    theta, _ = random_states(10_000, seed=1)
    H = model.mass_matrix(theta, DEFAULT)
    # Cholesky succeeds iff H is SPD
    np.linalg.cholesky(H)
    eigs = np.linalg.eigvalsh(H)
    assert eigs.min() > 0.0


# ---------------------------------------------------------------- bias vector

def test_bias_zero_at_rest_without_gravity():
    h = model.bias_vector([0.4, -0.9], [0.0, 0.0], NO_GRAV)
    np.testing.assert_allclose(h, [0.0, 0.0], atol=1e-15)


def test_bias_pure_gravity_matches_potential_gradient():
    """At rest the bias equals dV/dtheta (central finite difference)."""
    theta = np.array([np.pi / 2, 0.0])
    h = model.bias_vector(theta, [0.0, 0.0], DEFAULT)
    eps = 1e-6
    for i in range(2):
        d = np.zeros(2)
        d[i] = eps
        dv = (model.potential_energy(theta + d, DEFAULT)
              - model.potential_energy(theta - d, DEFAULT)) / (2 * eps)
        np.testing.assert_allclose(h[i], dv, rtol=1e-7, atol=1e-7)


def test_bias_matches_lagrangian_oracle():
    """h = d/dt(dT/dthd) - dT/dth + dV/dth + friction, all from scalar energies."""
    rng = np.random.default_rng(7)

    def dT_dtd(theta, theta_dot, params, eps=1e-3):
        # T is exactly quadratic in theta_dot, so the central difference is
        # truncation-free; a large step keeps round-off negligible
        out = np.zeros(2)
        for i in range(2):
            d = np.zeros(2)
            d[i] = eps
            out[i] = (model.kinetic_energy(theta, theta_dot + d, params)
                      - model.kinetic_energy(theta, theta_dot - d, params)) / (2 * eps)
        return out

    for params in (DEFAULT, FRICTION):
        for _ in range(20):
            theta = rng.uniform(-np.pi, np.pi, 2)
            theta_dot = rng.uniform(-2, 2, 2)
            eps = 1e-5
            # time derivative of dT/dthd along theta(t) = theta + t*theta_dot
            # with theta_dot held constant (i.e. the thdd = 0 path)
            p_plus = dT_dtd(theta + eps * theta_dot, theta_dot, params)
            p_minus = dT_dtd(theta - eps * theta_dot, theta_dot, params)
            dp_dt = (p_plus - p_minus) / (2 * eps)
            dT_dth = np.zeros(2)
            dV_dth = np.zeros(2)
            for i in range(2):
                d = np.zeros(2)
                d[i] = eps
                dT_dth[i] = (model.kinetic_energy(theta + d, theta_dot, params)
                             - model.kinetic_energy(theta - d, theta_dot, params)) / (2 * eps)
                dV_dth[i] = (model.potential_energy(theta + d, params)
                             - model.potential_energy(theta - d, params)) / (2 * eps)
            oracle = dp_dt - dT_dth + dV_dth + params.friction * theta_dot
            h = model.bias_vector(theta, theta_dot, params)
            scale = 1.0 + np.abs(h).max()
            np.testing.assert_allclose(h, oracle, rtol=1e-5, atol=1e-5 * scale)


# ----------------------------------------------------- inverse/forward dynamics

def test_inverse_dynamics_equilibrium():
    f = model.inverse_dynamics([0.2, 0.3], [0.0, 0.0], [0.0, 0.0], NO_GRAV)
    np.testing.assert_allclose(f, [0.0, 0.0], atol=1e-15)


def test_inverse_dynamics_unit_accel_gives_mass_column():
    theta = np.array([0.7, -1.1])
    f = model.inverse_dynamics(theta, [0.0, 0.0], [1.0, 0.0], NO_GRAV)
    H = model.mass_matrix(theta, NO_GRAV)
    np.testing.assert_allclose(f, H[:, 0], rtol=1e-14)


def test_forward_inverse_round_trip():
    """inverse_dynamics(forward_dynamics(f)) == f to 1e-9 relative, 1e4 samples."""
    theta, theta_dot = random_states(10_000, seed=2)
    rng = np.random.default_rng(3)
    f = rng.uniform(-5e4, 5e4, (10_000, 2))
    thdd = model.forward_dynamics(theta, theta_dot, f, DEFAULT)
    f_back = model.inverse_dynamics(theta, theta_dot, thdd, DEFAULT)
    err = np.abs(f_back - f) / np.maximum(1.0, np.abs(f))
    assert err.max() <= 1e-9


def test_forward_dynamics_cancelled_bias_is_rest():
    theta, theta_dot = np.array([0.5, -0.8]), np.array([0.3, -0.2])
    f = model.bias_vector(theta, theta_dot, DEFAULT)
    np.testing.assert_allclose(
        model.forward_dynamics(theta, theta_dot, f, DEFAULT), [0.0, 0.0], atol=1e-12)


def test_forward_dynamics_residual():
    theta, theta_dot = random_states(200, seed=4)
    rng = np.random.default_rng(5)
    f = rng.uniform(-2e4, 2e4, (200, 2))
    thdd = model.forward_dynamics(theta, theta_dot, f, DEFAULT)
    H = model.mass_matrix(theta, DEFAULT)
    h = model.bias_vector(theta, theta_dot, DEFAULT)
    res = (H @ thdd[..., None])[..., 0] + h - f
    assert np.abs(res).max() / max(1.0, np.abs(f).max()) <= 1e-9


def test_rest_stays_at_rest():
    thdd = model.forward_dynamics([0.1, 0.2], [0.0, 0.0], [0.0, 0.0], NO_GRAV)
    np.testing.assert_allclose(thdd, [0.0, 0.0], atol=1e-15)


# ------------------------------------------------------------------ kinematics

def test_forward_kinematics_extended():
    p = ModelParams(l1=2.5, l2=1.5, lc1=1.25, lc2=0.75)
    np.testing.assert_allclose(
        model.forward_kinematics([0.0, 0.0], p), [4.0, 0.0], atol=1e-14)


def test_forward_kinematics_right_angle():
    p = ModelParams(l1=2.5, l2=1.5, lc1=1.25, lc2=0.75)
    np.testing.assert_allclose(
        model.forward_kinematics([np.pi / 2, -np.pi / 2], p), [1.5, 2.5], atol=1e-12)


def test_workspace_bound():
    theta, _ = random_states(500, seed=6)
    x = model.forward_kinematics(theta, DEFAULT)
    assert np.all(np.linalg.norm(x, axis=-1) <= DEFAULT.l1 + DEFAULT.l2 + 1e-12)


def test_jacobian_matches_finite_difference():
    theta, _ = random_states(1000, seed=8)
    J = model.jacobian(theta, DEFAULT)
    eps = 1e-6
    for i in range(2):
        d = np.zeros(2)
        d[i] = eps
        col = (model.forward_kinematics(theta + d, DEFAULT)
               - model.forward_kinematics(theta - d, DEFAULT)) / (2 * eps)
        err = np.abs(J[..., i] - col) / np.maximum(1.0, np.abs(J[..., i]))
        assert err.max() <= 1e-6


def test_jacobian_singular_straight_arm():
    J = model.jacobian([0.0, 0.0], DEFAULT)
    assert abs(np.linalg.det(J)) < 1e-12


def test_tcp_twist_is_jacobian_times_rate():
    theta, theta_dot = random_states(100, seed=9)
    xd = model.tcp_twist(theta, theta_dot, DEFAULT)
    np.testing.assert_allclose(
        xd, (model.jacobian(theta, DEFAULT) @ theta_dot[..., None])[..., 0], rtol=1e-14)
    np.testing.assert_allclose(
        model.tcp_twist(theta[0], [0.0, 0.0], DEFAULT), [0.0, 0.0], atol=1e-15)


def test_tcp_twist_straight_arm_rigid_rotation():
    omega = 0.37
    xd = model.tcp_twist([0.4, 0.0], [omega, 0.0], DEFAULT)
    np.testing.assert_allclose(
        np.linalg.norm(xd), (DEFAULT.l1 + DEFAULT.l2) * omega, rtol=1e-12)


def test_tcp_twist_matches_time_derivative_of_fk():
    theta, theta_dot = random_states(50, seed=10)
    eps = 1e-6
    xd_fd = (model.forward_kinematics(theta + eps * theta_dot, DEFAULT)
             - model.forward_kinematics(theta - eps * theta_dot, DEFAULT)) / (2 * eps)
    np.testing.assert_allclose(
        model.tcp_twist(theta, theta_dot, DEFAULT), xd_fd, rtol=1e-6, atol=1e-8)


def test_tcp_twist_partial_theta_finite_difference():
    theta, theta_dot = random_states(200, seed=11)
    D = model.tcp_twist_partial_theta(theta, theta_dot, DEFAULT)
    eps = 1e-6
    for i in range(2):
        d = np.zeros(2)
        d[i] = eps
        col = (model.tcp_twist(theta + d, theta_dot, DEFAULT)
               - model.tcp_twist(theta - d, theta_dot, DEFAULT)) / (2 * eps)
        np.testing.assert_allclose(D[..., i], col, rtol=1e-5, atol=1e-7)


# ----------------------------------------------------------- dynamics partials

def test_partial_wrt_effort_is_inverse_inertia():
    theta = np.array([0.9, -0.6])
    _, _, d_df = model.dynamics_partials(theta, [0.1, 0.2], [100.0, -50.0], DEFAULT)
    H = model.mass_matrix(theta, DEFAULT)
    np.testing.assert_allclose(H @ d_df, np.eye(2), atol=1e-12)


def test_partials_match_finite_differences():
    theta, theta_dot = random_states(1000, seed=12)
    rng = np.random.default_rng(13)
    f = rng.uniform(-1e4, 1e4, (1000, 2))
    d_th, d_td, d_f = model.dynamics_partials(theta, theta_dot, f, DEFAULT)
    eps = 1e-6

    def rel_ok(analytic, fd):
        err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
        assert err.max() <= 1e-5

    for i in range(2):
        d = np.zeros(2)
        d[i] = eps
        rel_ok(d_th[..., i],
               (model.forward_dynamics(theta + d, theta_dot, f, DEFAULT)
                - model.forward_dynamics(theta - d, theta_dot, f, DEFAULT)) / (2 * eps))
        rel_ok(d_td[..., i],
               (model.forward_dynamics(theta, theta_dot + d, f, DEFAULT)
                - model.forward_dynamics(theta, theta_dot - d, f, DEFAULT)) / (2 * eps))
        df = np.zeros(2)
        df[i] = 1.0  # effort scale: unit step is fine, FD is linear in f
        rel_ok(d_f[..., i],
               (model.forward_dynamics(theta, theta_dot, f + df, DEFAULT)
                - model.forward_dynamics(theta, theta_dot, f - df, DEFAULT)) / 2.0)


def test_coriolis_partial_vanishes_at_rest():
    _, d_td, _ = model.dynamics_partials([0.3, 0.4], [0.0, 0.0], [0.0, 0.0], NO_GRAV)
    np.testing.assert_allclose(d_td, np.zeros((2, 2)), atol=1e-14)


# ------------------------------------------------------------------ energy

def test_energy_conserved_without_inputs():
    """Free swing with g=0, b=0: kinetic energy drift <= 1e-4 over 10 s RK4."""
    from armnmpc.transcription import integrate_step, Integrator

    params = NO_GRAV
    theta = np.array([0.3, -1.0])
    theta_dot = np.array([0.8, -0.5])
    e0 = model.kinetic_energy(theta, theta_dot, params)
    dt = 1e-3
    for _ in range(10_000):
        thdd = model.forward_dynamics(theta, theta_dot, [0.0, 0.0], params)
        theta, theta_dot = integrate_step(theta, theta_dot, thdd, dt,
                                          Integrator.RK4, params)
    e1 = model.kinetic_energy(theta, theta_dot, params)
    assert abs(e1 - e0) / e0 <= 1e-4


# ------------------------------------------------------------------ types

def test_joint_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        model.JointState(np.array([np.nan, 0.0]), np.array([0.0, 0.0]))


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(l1=-1.0)
    with pytest.raises(ValueError):
        ModelParams(lc1=5.0)


def test_inverse_kinematics_round_trip():
    rng = np.random.default_rng(14)
    for _ in range(50):
        theta = np.array([rng.uniform(-1, 1.5), rng.uniform(-2.5, -0.3)])
        x = model.forward_kinematics(theta, DEFAULT)
        theta_ik = model.inverse_kinematics(x, DEFAULT, elbow_down=True)
        np.testing.assert_allclose(
            model.forward_kinematics(theta_ik, DEFAULT), x, atol=1e-10)
    with pytest.raises(ValueError):
        model.inverse_kinematics([10.0, 0.0], DEFAULT)
