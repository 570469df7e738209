"""Multiple-shooting transcription: layout, integration, costs, derivatives."""

import numpy as np
import pytest

from armnmpc import model, transcription as tr
from armnmpc.model import JointState, ModelParams
from armnmpc.reference import TrajectoryKind, TrajectorySpec, sample_window
from armnmpc.transcription import (
    Bounds, Integrator, OcpConfig, NlpFunctions, build_nlp, defect_residuals,
    inequality_values, integrate_step, nlp_jacobians, pack, rollout,
    running_cost, terminal_cost, total_cost, unpack)

PARAMS = ModelParams()
CIRCLE = TrajectorySpec(kind=TrajectoryKind.CIRCLE)

WIDE = Bounds(th_min=np.array([-3.0, -3.0]), th_max=np.array([3.0, 3.0]),
              thd_min=np.array([-3.0, -3.0]), thd_max=np.array([3.0, 3.0]),
              thdd_min=np.array([-20.0, -20.0]), thdd_max=np.array([20.0, 20.0]),
              x_min=np.array([-5.0, -5.0]), x_max=np.array([5.0, 5.0]),
              xd_min=np.array([-10.0, -10.0]), xd_max=np.array([10.0, 10.0]))


def make_config(n=3, integrator=Integrator.EULER, bounds=WIDE):
    return OcpConfig(horizon=n, dt=0.3, integrator=integrator, bounds=bounds)


def mid_workspace_state():
    theta = model.inverse_kinematics([3.2, 0.6], PARAMS)
    return JointState(theta, np.zeros(2))


def random_z(config, rng, f_scale=2e3, th_center=None):
    n = config.horizon
    controls = rng.uniform(-f_scale, f_scale, (n, 2))
    base = th_center if th_center is not None else np.array([0.6, -1.5])
    states = np.empty((n, 4))
    states[:, :2] = base + rng.uniform(-0.3, 0.3, (n, 2))
    states[:, 2:] = rng.uniform(-0.5, 0.5, (n, 2))
    return pack(controls, states)


# ------------------------------------------------------------------- layout

def test_pack_zero_dimension():
    z = pack(np.zeros((2, 2)), np.zeros((2, 4)))
    assert z.shape == (12,)
    np.testing.assert_array_equal(z, 0.0)


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(0)
    z = rng.normal(size=30)
    c, s = unpack(z, 5)
    np.testing.assert_array_equal(pack(c, s), z)


def test_layout_flat_indices():
    """f_k[i] at 6k+i, theta_{k+1}[i] at 6k+2+i, thdot_{k+1}[i] at 6k+4+i."""
    n = 4
    controls = np.arange(n * 2).reshape(n, 2) * 1.0
    states = (100 + np.arange(n * 4)).reshape(n, 4) * 1.0
    z = pack(controls, states)
    for k in range(n):
        for i in range(2):
            assert z[6 * k + i] == controls[k, i]
            assert z[6 * k + 2 + i] == states[k, i]
            assert z[6 * k + 4 + i] == states[k, 2 + i]


def test_pack_dimension_mismatch():
    with pytest.raises(ValueError):
        pack(np.zeros((3, 2)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        unpack(np.zeros(13), 2)


# -------------------------------------------------------------- integration

def test_euler_constant_velocity():
    th, td = integrate_step([0.1, 0.2], [0.5, -0.5], [0.0, 0.0], 0.1,
                            Integrator.EULER)
    np.testing.assert_allclose(td, [0.5, -0.5])
    np.testing.assert_allclose(th, [0.15, 0.15])


def test_euler_rule_arithmetic():
    th, td = integrate_step([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], 0.3,
                            Integrator.EULER)
    np.testing.assert_allclose(th, [0.3, 0.0])
    np.testing.assert_allclose(td, [1.3, 0.0])


def test_rk4_beats_euler_on_free_pendulum():
    """Endpoint after 1 s vs an independent fine-step rollout oracle.

    RK4 at dt=1e-3 should land within 1e-6 of the truth, plain Euler at the
    same step should not.
    """
    from scipy.integrate import solve_ivp

    params = ModelParams(g=9.81)
    th0 = np.array([0.9, -1.1])
    td0 = np.array([0.0, 0.0])

    def run(scheme, dt, steps):
        th, td = th0.copy(), td0.copy()
        for _ in range(steps):
            thdd = model.forward_dynamics(th, td, [0.0, 0.0], params)
            th, td = integrate_step(th, td, thdd, dt, scheme, params)
        return th

    def rhs(_t, s):
        thdd = model.forward_dynamics(s[:2], s[2:], [0.0, 0.0], params)
        return np.concatenate([s[2:], thdd])

    sol = solve_ivp(rhs, (0.0, 1.0), np.concatenate([th0, td0]),
                    method="DOP853", rtol=1e-12, atol=1e-12)
    oracle = sol.y[:2, -1]

    rk4_err = np.abs(run(Integrator.RK4, 1e-3, 1000) - oracle).max()
    eul_err = np.abs(run(Integrator.EULER, 1e-3, 1000) - oracle).max()
    assert rk4_err <= 1e-6
    assert eul_err > 100 * rk4_err


def test_heun_and_rk4_need_params():
    with pytest.raises(ValueError):
        integrate_step([0.0, 0.0], [0.0, 0.0], [0.0, 0.0], 0.1, Integrator.HEUN)
    with pytest.raises(ValueError):
        integrate_step([0.0, 0.0], [0.0, 0.0], [0.0, 0.0], -0.1, Integrator.EULER)


# -------------------------------------------------------------------- costs

def test_running_cost_zero_on_reference():
    theta = np.array([0.6, -1.5])
    x = model.forward_kinematics(theta, PARAMS)
    xd = model.tcp_twist(theta, [0.1, 0.1], PARAMS)
    c = running_cost(theta, [0.1, 0.1], [0.0, 0.0], x, xd, make_config(), PARAMS)
    assert c == pytest.approx(0.0, abs=1e-18)


def test_running_cost_paper_weight_arithmetic():
    """Qx = diag(1e5, 1e5) and a 0.01 m x-error alone gives 1e5 * 1e-4 = 10."""
    config = make_config()
    theta = np.array([0.6, -1.5])
    x = model.forward_kinematics(theta, PARAMS)
    xd = model.tcp_twist(theta, [0.0, 0.0], PARAMS)
    c = running_cost(theta, [0.0, 0.0], [0.0, 0.0], x - [0.01, 0.0], xd,
                     config, PARAMS)
    assert c == pytest.approx(10.0, rel=1e-9)


def test_running_and_terminal_match_direct_recomputation():
    rng = np.random.default_rng(1)
    config = make_config()
    for _ in range(20):
        theta = rng.uniform(-1, 1, 2)
        theta_dot = rng.uniform(-1, 1, 2)
        f = rng.uniform(-100, 100, 2)
        x_ref = rng.uniform(-1, 4, 2)
        xd_ref = rng.uniform(-1, 1, 2)
        x = model.forward_kinematics(theta, PARAMS)
        xd = model.tcp_twist(theta, theta_dot, PARAMS)
        expect = (np.sum(config.qx * (x - x_ref) ** 2)
                  + np.sum(config.qxd * (xd - xd_ref) ** 2)
                  + np.sum(config.r * f ** 2))
        got = running_cost(theta, theta_dot, f, x_ref, xd_ref, config, PARAMS)
        np.testing.assert_allclose(got, expect, rtol=1e-12)
        expect_t = (np.sum(config.qx_n * (x - x_ref) ** 2)
                    + np.sum(config.qxd_n * (xd - xd_ref) ** 2))
        got_t = terminal_cost(theta, theta_dot, x_ref, xd_ref, config, PARAMS)
        np.testing.assert_allclose(got_t, expect_t, rtol=1e-12)


def test_total_cost_zero_on_reference_with_zero_effort():
    """States placed exactly on the reference with f = 0 cost nothing."""
    config = make_config()
    n = config.horizon
    thetas = np.array([model.inverse_kinematics([3.2 - 0.05 * k, 0.6], PARAMS)
                       for k in range(n + 1)])
    # build a window whose samples coincide with the FK of those states
    xs = model.forward_kinematics(thetas, PARAMS)
    window = sample_window(CIRCLE, 0.0, n, config.dt)
    window = type(window)(x_ref=xs, xd_ref=np.zeros((n + 1, 2)), t0=0.0,
                          dt=config.dt)
    measured = JointState(thetas[0], np.zeros(2))
    states = np.hstack([thetas[1:], np.zeros((n, 2))])
    z = pack(np.zeros((n, 2)), states)
    assert total_cost(z, window, measured, config, PARAMS) == pytest.approx(0.0, abs=1e-18)


def test_total_cost_additive_and_matches_brute_force():
    rng = np.random.default_rng(2)
    config = make_config()
    n = config.horizon
    window = sample_window(CIRCLE, 0.7, n, config.dt)
    measured = mid_workspace_state()
    z = random_z(config, rng)
    controls, states = unpack(z, n)

    brute = running_cost(measured.theta, measured.theta_dot, controls[0],
                         window.x_ref[0], window.xd_ref[0], config, PARAMS)
    for k in range(1, n):
        brute += running_cost(states[k - 1, :2], states[k - 1, 2:], controls[k],
                              window.x_ref[k], window.xd_ref[k], config, PARAMS)
    brute += terminal_cost(states[n - 1, :2], states[n - 1, 2:],
                           window.x_ref[n], window.xd_ref[n], config, PARAMS)
    np.testing.assert_allclose(total_cost(z, window, measured, config, PARAMS),
                               0.5 * brute, rtol=1e-12)

    # single-stage perturbation changes J by exactly that stage's cost delta
    z2 = z.copy()
    z2[6 * 1 + 2] += 0.05  # theta_2 of stage 1
    delta = (total_cost(z2, window, measured, config, PARAMS)
             - total_cost(z, window, measured, config, PARAMS))
    c2, s2 = unpack(z2, n)
    stage_old = running_cost(states[1, :2], states[1, 2:], controls[2],
                             window.x_ref[2], window.xd_ref[2], config, PARAMS)
    stage_new = running_cost(s2[1, :2], s2[1, 2:], c2[2],
                             window.x_ref[2], window.xd_ref[2], config, PARAMS)
    np.testing.assert_allclose(delta, 0.5 * (stage_new - stage_old), rtol=1e-9)


def test_zero_weight_cost_property():
    config = OcpConfig(horizon=3, dt=0.3, qx=np.zeros(2), qxd=np.zeros(2),
                       qx_n=np.zeros(2), qxd_n=np.zeros(2), r=np.zeros(2),
                       bounds=WIDE)
    rng = np.random.default_rng(3)
    window = sample_window(CIRCLE, 0.0, 3, 0.3)
    measured = mid_workspace_state()
    for _ in range(5):
        z = random_z(config, rng)
        assert total_cost(z, window, measured, config, PARAMS) == 0.0


# ----------------------------------------------------------------- defects

@pytest.mark.parametrize("scheme", [Integrator.EULER, Integrator.HEUN,
                                    Integrator.RK4])
def test_rollout_is_defect_feasible(scheme):
    """Forward-rolled z gives exactly zero defects for every scheme."""
    rng = np.random.default_rng(4)
    config = make_config(n=4, integrator=scheme)
    measured = mid_workspace_state()
    controls = rng.uniform(-500, 500, (4, 2))
    z = rollout(measured, controls, config, PARAMS)
    res = defect_residuals(z, measured, config, PARAMS)
    np.testing.assert_array_equal(res, np.zeros(16))


def test_defect_linear_in_shot_state():
    rng = np.random.default_rng(5)
    config = make_config()
    measured = mid_workspace_state()
    z = random_z(config, rng)
    res = defect_residuals(z, measured, config, PARAMS)
    delta = 0.01
    z2 = z.copy()
    z2[2] += delta  # theta_1[0], stage 0 decided state
    res2 = defect_residuals(z2, measured, config, PARAMS)
    assert res2[0] - res[0] == pytest.approx(delta, rel=1e-12)


def test_defects_match_per_stage_recomputation():
    rng = np.random.default_rng(6)
    for scheme in (Integrator.EULER, Integrator.RK4):
        config = make_config(n=3, integrator=scheme)
        measured = mid_workspace_state()
        z = random_z(config, rng)
        controls, states = unpack(z, 3)
        res = defect_residuals(z, measured, config, PARAMS).reshape(3, 4)
        th_prev, td_prev = measured.theta, measured.theta_dot
        for k in range(3):
            thdd = model.forward_dynamics(th_prev, td_prev, controls[k], PARAMS)
            th_hat, td_hat = integrate_step(th_prev, td_prev, thdd, config.dt,
                                            scheme, PARAMS)
            np.testing.assert_allclose(res[k, :2], states[k, :2] - th_hat,
                                       atol=1e-11)
            np.testing.assert_allclose(res[k, 2:], states[k, 2:] - td_hat,
                                       atol=1e-11)
            th_prev, td_prev = states[k, :2], states[k, 2:]


# -------------------------------------------------------------- inequalities

def test_inequalities_interior_at_rest():
    config = make_config(bounds=Bounds())  # paper limit set
    measured = JointState(np.array([0.5, -1.2]), np.zeros(2))
    n = config.horizon
    states = np.tile(np.concatenate([measured.theta, np.zeros(2)]), (n, 1))
    grav = model.gravity_vector(measured.theta, PARAMS)
    controls = np.tile(grav, (n, 1))  # hold against gravity: thdd = 0
    z = pack(controls, states)
    rep = inequality_values(z, measured, config, PARAMS)
    act = rep.actionable
    assert np.all(rep.values[act] > rep.lower[act])
    assert np.all(rep.values[act] < rep.upper[act])


def test_inequality_boundary_case():
    config = make_config(bounds=Bounds())
    measured = JointState(np.array([0.5, -1.2]), np.zeros(2))
    n = config.horizon
    states = np.tile(np.concatenate([measured.theta, np.zeros(2)]), (n, 1))
    states[1, :2] = config.bounds.th_max  # stage-2 position pinned at the box
    z = pack(np.zeros((n, 2)), states)
    rep = inequality_values(z, measured, config, PARAMS)
    rows = [i for i, lab in enumerate(rep.labels)
            if lab[0] == "th" and lab[1] == 2]
    np.testing.assert_array_equal(rep.values[rows], config.bounds.th_max)
    np.testing.assert_array_equal(rep.values[rows], rep.upper[rows])


def test_inequality_rows_match_model_calls():
    rng = np.random.default_rng(7)
    config = make_config()
    measured = mid_workspace_state()
    z = random_z(config, rng)
    controls, states = unpack(z, 3)
    rep = inequality_values(z, measured, config, PARAMS)
    th_all = np.vstack([measured.theta, states[:, :2]])
    td_all = np.vstack([measured.theta_dot, states[:, 2:]])
    for i, (family, stage, axis) in enumerate(rep.labels):
        if family == "x":
            expect = model.forward_kinematics(th_all[stage], PARAMS)[axis]
        elif family == "xd":
            expect = model.tcp_twist(th_all[stage], td_all[stage], PARAMS)[axis]
        elif family == "th":
            expect = th_all[stage][axis]
        elif family == "thd":
            expect = td_all[stage][axis]
        elif family == "thdd":
            expect = model.forward_dynamics(th_all[stage], td_all[stage],
                                            controls[stage], PARAMS)[axis]
        else:
            expect = controls[stage][axis]
        np.testing.assert_allclose(rep.values[i], expect, rtol=1e-12)


# ---------------------------------------------------------------- Jacobians

def fd_jacobian(fun, z, eps_scale=1e-6):
    f0 = fun(z)
    J = np.zeros((f0.size, z.size))
    for j in range(z.size):
        h = eps_scale * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        J[:, j] = (fun(zp) - fun(zm)) / (2 * h)
    return J


def rel_err(analytic, fd):
    return np.abs(analytic - fd).max() / (1.0 + np.abs(analytic).max())


@pytest.mark.parametrize("scheme", [Integrator.EULER, Integrator.HEUN,
                                    Integrator.RK4])
def test_nlp_derivatives_match_finite_differences(scheme):
    """Cost gradient and both Jacobians vs central differences, 100 points."""
    rng = np.random.default_rng(8)
    config = make_config(n=3, integrator=scheme)
    window = sample_window(CIRCLE, 0.4, 3, config.dt)
    measured = mid_workspace_state()
    nlp = build_nlp(window, measured, config, PARAMS)
    n_pts = 100 if scheme is Integrator.EULER else 25
    for _ in range(n_pts):
        z = random_z(config, rng, f_scale=5e3)
        d = nlp.derivatives(z)
        g_fd = fd_jacobian(lambda v: np.array([nlp.cost(v)]), z)[0]
        assert rel_err(d.grad, g_fd) <= 1e-5
        Jeq_fd = fd_jacobian(nlp.eq_residuals, z)
        assert rel_err(d.J_eq, Jeq_fd) <= 1e-5
        Jin_fd = fd_jacobian(nlp.ineq_values, z)
        assert rel_err(d.J_in, Jin_fd) <= 1e-5


def test_defect_jacobian_identity_blocks():
    rng = np.random.default_rng(9)
    config = make_config()
    window = sample_window(CIRCLE, 0.0, 3, config.dt)
    nlp = build_nlp(window, mid_workspace_state(), config, PARAMS)
    Jeq = nlp.eq_jacobian(random_z(config, rng)).toarray()
    for k in range(3):
        np.testing.assert_array_equal(
            Jeq[4 * k:4 * k + 4, 6 * k + 2:6 * k + 6], np.eye(4))


def test_jacobian_sparsity_is_stage_banded():
    """No coupling beyond adjacent stages in either Jacobian."""
    rng = np.random.default_rng(10)
    config = make_config(n=5)
    window = sample_window(CIRCLE, 0.0, 5, config.dt)
    nlp = build_nlp(window, mid_workspace_state(), config, PARAMS)
    z = random_z(config, rng)
    Jeq = nlp.eq_jacobian(z).toarray()
    for k in range(5):  # defect block k only touches z-stages k-1 and k
        for j in range(5):
            block = Jeq[4 * k:4 * k + 4, 6 * j:6 * j + 6]
            if j not in (k - 1, k):
                np.testing.assert_array_equal(block, 0.0)
    Jin = nlp.ineq_jacobian(z).toarray()
    d = nlp.derivatives(z)
    assert Jin.shape == d.J_in.shape
    n = 5
    for r in range(Jin.shape[0]):
        if r < 2 * n:
            stage = r // 2 + 1
        elif r < 4 * n:
            stage = (r - 2 * n) // 2 + 1
        else:
            stage = (r - 4 * n) // 2
        for j in range(5):
            seg = Jin[r, 6 * j:6 * j + 6]
            # x/xd rows live on stage state columns (z-stage stage-1);
            # thdd rows touch f at z-stage `stage` and state at stage-1
            if j not in (stage - 1, stage):
                np.testing.assert_array_equal(seg, 0.0)


def test_nlp_jacobians_public_wrapper():
    rng = np.random.default_rng(11)
    config = make_config()
    window = sample_window(CIRCLE, 0.0, 3, config.dt)
    measured = mid_workspace_state()
    z = random_z(config, rng)
    Jeq, Jin, grad = nlp_jacobians(z, window, measured, config, PARAMS)
    nlp = build_nlp(window, measured, config, PARAMS)
    np.testing.assert_array_equal(Jeq.toarray(), nlp.eq_jacobian(z).toarray())
    np.testing.assert_array_equal(Jin.toarray(), nlp.ineq_jacobian(z).toarray())
    np.testing.assert_array_equal(grad, nlp.cost_gradient(z))


def test_cost_invariant_under_pack_unpack():
    rng = np.random.default_rng(12)
    config = make_config()
    window = sample_window(CIRCLE, 0.0, 3, config.dt)
    measured = mid_workspace_state()
    z = random_z(config, rng)
    c, s = unpack(z, 3)
    np.testing.assert_array_equal(
        total_cost(pack(c, s), window, measured, config, PARAMS),
        total_cost(z, window, measured, config, PARAMS))


def test_config_validation():
    with pytest.raises(ValueError):
        OcpConfig(horizon=1)
    with pytest.raises(ValueError):
        OcpConfig(dt=0.0)
    with pytest.raises(ValueError):
        OcpConfig(qx=np.array([-1.0, 0.0]))
    with pytest.raises(ValueError):
        Bounds(th_min=np.array([1.0, 0.0]), th_max=np.array([0.0, 0.0]))
