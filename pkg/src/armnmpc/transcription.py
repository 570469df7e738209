"""Multiple-shooting transcription of the tracking OCP into a finite NLP.

Decision vector layout (n = 2 joints, N horizon nodes, dim 6N):

    stage k = 0..N-1:  z[6k:6k+2] = f_k          (stage effort)
                       z[6k+2:6k+4] = theta_{k+1} (decided position)
                       z[6k+4:6k+6] = thdot_{k+1} (decided velocity)

The stage-0 state is not a decision variable: it is pinned to the
measurement, which enforces closed-loop feedback by construction.  Shooting
defects link each decided state to the one-step integration of its
predecessor under the stage-constant effort.  Joint position/velocity and
effort boxes are plain variable bounds on z; Cartesian position/velocity
and joint acceleration boxes are nonlinear inequality rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import model
from .model import JointState, ModelParams
from .reference import ReferenceWindow


class Integrator(enum.Enum):
    EULER = "euler"              # explicit: theta advances by the old rate
    SEMI_EULER = "semi_euler"    # symplectic: theta advances by the new rate
    HEUN = "heun"
    RK4 = "rk4"


@dataclass(frozen=True)
class Bounds:
    """Box limits for every constrained quantity (min <= max elementwise)."""

    x_min: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0]))
    x_max: np.ndarray = field(default_factory=lambda: np.array([4.0, 1.3]))
    xd_min: np.ndarray = field(default_factory=lambda: np.array([-10.0, -10.0]))
    xd_max: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0]))
    th_min: np.ndarray = field(default_factory=lambda: np.array([-0.2, -1.9]))
    th_max: np.ndarray = field(default_factory=lambda: np.array([1.0, -0.7]))
    thd_min: np.ndarray = field(default_factory=lambda: np.array([-0.35, -0.35]))
    thd_max: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.35]))
    thdd_min: np.ndarray = field(default_factory=lambda: np.array([-0.3, -0.3]))
    thdd_max: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3]))
    f_min: np.ndarray = field(default_factory=lambda: np.array([-5e4, -5e4]))
    f_max: np.ndarray = field(default_factory=lambda: np.array([5e4, 5e4]))

    def __post_init__(self):
        for lo_name, hi_name in (("x_min", "x_max"), ("xd_min", "xd_max"),
                                 ("th_min", "th_max"), ("thd_min", "thd_max"),
                                 ("thdd_min", "thdd_max"), ("f_min", "f_max")):
            lo = np.asarray(getattr(self, lo_name), dtype=float)
            hi = np.asarray(getattr(self, hi_name), dtype=float)
            object.__setattr__(self, lo_name, lo)
            object.__setattr__(self, hi_name, hi)
            if lo.shape != (2,) or hi.shape != (2,):
                raise ValueError(f"{lo_name}/{hi_name} must be 2-vectors")
            if np.any(lo > hi):
                raise ValueError(f"{lo_name} exceeds {hi_name}")


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, integrator, weights and limits of the finite-horizon OCP."""

    horizon: int = 3                  # node count N
    dt: float = 0.3                   # node spacing [s]
    integrator: Integrator = Integrator.EULER
    qx: np.ndarray = field(default_factory=lambda: np.array([1e5, 1e5]))
    qxd: np.ndarray = field(default_factory=lambda: np.array([1e-12, 1e-12]))
    qx_n: np.ndarray = field(default_factory=lambda: np.array([1e5, 1e5]))
    qxd_n: np.ndarray = field(default_factory=lambda: np.array([1e-12, 1e-12]))
    r: np.ndarray = field(default_factory=lambda: np.array([1e-12, 1e-12]))
    bounds: Bounds = field(default_factory=Bounds)

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        for name in ("qx", "qxd", "qx_n", "qxd_n", "r"):
            w = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, w)
            if w.shape != (2,) or np.any(w < 0.0):
                raise ValueError(f"weight diagonal {name} must be >= 0")

    @property
    def dim(self) -> int:
        return 6 * self.horizon


# ----------------------------------------------------------------- packing

def pack(controls: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Flatten stage efforts (N,2) and decided states (N,4) into z (6N,)."""
    controls = np.asarray(controls, dtype=float)
    states = np.asarray(states, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != 2:
        raise ValueError("controls must be (N, 2)")
    if states.shape != (controls.shape[0], 4):
        raise ValueError("states must be (N, 4) matching controls")
    return np.hstack([controls, states]).reshape(-1)


def unpack(z: np.ndarray, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of pack: z (6N,) -> (controls (N,2), states (N,4))."""
    z = np.asarray(z, dtype=float)
    if z.shape != (6 * horizon,):
        raise ValueError(f"decision vector must have length {6 * horizon}")
    stages = z.reshape(horizon, 6)
    return stages[:, :2].copy(), stages[:, 2:].copy()


# --------------------------------------------------------------- integration

def _ode_rhs(theta, theta_dot, f, params):
    """State derivative of the manipulator under constant effort."""
    return theta_dot, model.forward_dynamics(theta, theta_dot, f, params)


def step_from_effort(theta, theta_dot, f, dt: float, scheme: Integrator,
                     params: ModelParams):
    """One integration step under stage-constant effort (batched)."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    f = np.asarray(f, dtype=float)
    if scheme is Integrator.EULER:
        thdd = model.forward_dynamics(theta, theta_dot, f, params)
        return theta + dt * theta_dot, theta_dot + dt * thdd
    if scheme is Integrator.SEMI_EULER:
        thdd = model.forward_dynamics(theta, theta_dot, f, params)
        td_next = theta_dot + dt * thdd
        return theta + dt * td_next, td_next
    if scheme is Integrator.HEUN:
        k1_th, k1_td = _ode_rhs(theta, theta_dot, f, params)
        k2_th, k2_td = _ode_rhs(theta + dt * k1_th, theta_dot + dt * k1_td, f, params)
        return (theta + 0.5 * dt * (k1_th + k2_th),
                theta_dot + 0.5 * dt * (k1_td + k2_td))
    k1_th, k1_td = _ode_rhs(theta, theta_dot, f, params)
    k2_th, k2_td = _ode_rhs(theta + 0.5 * dt * k1_th, theta_dot + 0.5 * dt * k1_td,
                            f, params)
    k3_th, k3_td = _ode_rhs(theta + 0.5 * dt * k2_th, theta_dot + 0.5 * dt * k2_td,
                            f, params)
    k4_th, k4_td = _ode_rhs(theta + dt * k3_th, theta_dot + dt * k3_td, f, params)
    return (theta + dt / 6.0 * (k1_th + 2 * k2_th + 2 * k3_th + k4_th),
            theta_dot + dt / 6.0 * (k1_td + 2 * k2_td + 2 * k3_td + k4_td))


def integrate_step(theta, theta_dot, theta_ddot, dt: float, scheme: Integrator,
                   params: ModelParams | None = None):
    """Predict the next joint state from the stage acceleration.

    The Euler variants hold the passed acceleration constant and need no
    parameters (the semi-implicit one advances the position with the
    updated rate); Heun and RK4 recover the stage-constant effort via
    inverse dynamics and re-evaluate the forward dynamics internally.
    """
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    theta_ddot = np.asarray(theta_ddot, dtype=float)
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if scheme is Integrator.EULER:
        return theta + dt * theta_dot, theta_dot + dt * theta_ddot
    if scheme is Integrator.SEMI_EULER:
        td_next = theta_dot + dt * theta_ddot
        return theta + dt * td_next, td_next
    if params is None:
        raise ValueError(f"{scheme.name} integration requires model parameters")
    f = model.inverse_dynamics(theta, theta_dot, theta_ddot, params)
    return step_from_effort(theta, theta_dot, f, dt, scheme, params)


def _step_with_partials(theta, theta_dot, f, dt: float, scheme: Integrator,
                        params: ModelParams):
    """Step plus sensitivities d(next state)/d(state, effort), batched.

    Returns (theta_next, thdot_next, A, B) with A (..., 4, 4) the state
    sensitivity and B (..., 4, 2) the effort sensitivity, propagated through
    the Runge-Kutta stages by the chain rule.
    """
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    f = np.asarray(f, dtype=float)
    batch = theta.shape[:-1]
    eye4 = np.broadcast_to(np.eye(4), batch + (4, 4))

    if scheme is Integrator.SEMI_EULER:
        thdd = model.forward_dynamics(theta, theta_dot, f, params)
        d_th, d_td, d_f = model.dynamics_partials(theta, theta_dot, f, params)
        td_next = theta_dot + dt * thdd
        th_next = theta + dt * td_next
        A = np.zeros(batch + (4, 4))
        # velocity rows: d(td + dt*FD)/d(state)
        A[..., 2:, 0:2] = dt * d_th
        A[..., 2:, 2:4] = dt * d_td
        A[..., 2, 2] += 1.0
        A[..., 3, 3] += 1.0
        # position rows: theta + dt * (updated velocity)
        A[..., 0:2, :] = dt * A[..., 2:, :]
        A[..., 0, 0] += 1.0
        A[..., 1, 1] += 1.0
        B = np.zeros(batch + (4, 2))
        B[..., 2:, :] = dt * d_f
        B[..., 0:2, :] = dt * B[..., 2:, :]
        return th_next, td_next, A, B

    def rhs_with_partials(th, td):
        thdd = model.forward_dynamics(th, td, f, params)
        d_th, d_td, d_f = model.dynamics_partials(th, td, f, params)
        G = np.zeros(batch + (4, 4))
        G[..., 0, 2] = 1.0
        G[..., 1, 3] = 1.0
        G[..., 2:, 0:2] = d_th
        G[..., 2:, 2:4] = d_td
        Gf = np.zeros(batch + (4, 2))
        Gf[..., 2:, :] = d_f
        k = np.concatenate([td, thdd], axis=-1)
        return k, G, Gf

    if scheme is Integrator.EULER:
        k1, G1, Gf1 = rhs_with_partials(theta, theta_dot)
        s_next = np.concatenate([theta, theta_dot], axis=-1) + dt * k1
        A = eye4 + dt * G1
        B = dt * Gf1
        return s_next[..., :2], s_next[..., 2:], A, B

    s0 = np.concatenate([theta, theta_dot], axis=-1)
    if scheme is Integrator.HEUN:
        k1, G1, Gf1 = rhs_with_partials(theta, theta_dot)
        s1 = s0 + dt * k1
        k2, G2, Gf2 = rhs_with_partials(s1[..., :2], s1[..., 2:])
        S1, F1 = G1, Gf1
        S2 = G2 @ (eye4 + dt * S1)
        F2 = G2 @ (dt * F1) + Gf2
        s_next = s0 + 0.5 * dt * (k1 + k2)
        A = eye4 + 0.5 * dt * (S1 + S2)
        B = 0.5 * dt * (F1 + F2)
        return s_next[..., :2], s_next[..., 2:], A, B

    # RK4
    k1, G1, Gf1 = rhs_with_partials(theta, theta_dot)
    S1, F1 = G1, Gf1
    s2 = s0 + 0.5 * dt * k1
    k2, G2, Gf2 = rhs_with_partials(s2[..., :2], s2[..., 2:])
    S2 = G2 @ (eye4 + 0.5 * dt * S1)
    F2 = G2 @ (0.5 * dt * F1) + Gf2
    s3 = s0 + 0.5 * dt * k2
    k3, G3, Gf3 = rhs_with_partials(s3[..., :2], s3[..., 2:])
    S3 = G3 @ (eye4 + 0.5 * dt * S2)
    F3 = G3 @ (0.5 * dt * F2) + Gf3
    s4 = s0 + dt * k3
    k4, G4, Gf4 = rhs_with_partials(s4[..., :2], s4[..., 2:])
    S4 = G4 @ (eye4 + dt * S3)
    F4 = G4 @ (dt * F3) + Gf4
    s_next = s0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    A = eye4 + dt / 6.0 * (S1 + 2 * S2 + 2 * S3 + S4)
    B = dt / 6.0 * (F1 + 2 * F2 + 2 * F3 + F4)
    return s_next[..., :2], s_next[..., 2:], A, B


def reference_seeded_guess(window: ReferenceWindow, measured: JointState,
                           config: OcpConfig, params: ModelParams) -> np.ndarray:
    """Primal guess from the reference path: IK states, ID efforts.

    Joint states come from elbow-down inverse kinematics of the reference
    samples (clamped to the reachable annulus), velocities from the Jacobian
    inverse where well conditioned, efforts from inverse dynamics of the
    finite-difference accelerations.  Everything is clipped to the boxes, so
    the guess respects all variable bounds; defects are O(dt^2).
    """
    n = config.horizon
    b = config.bounds
    th = np.empty((n + 1, 2))
    td = np.empty((n + 1, 2))
    th[0], td[0] = measured.theta, measured.theta_dot
    reach_hi = params.l1 + params.l2
    reach_lo = abs(params.l1 - params.l2)
    for k in range(1, n + 1):
        x = window.x_ref[k].copy()
        r = float(np.linalg.norm(x))
        if r > reach_hi:
            x *= 0.999 * reach_hi / r
        elif r < max(reach_lo, 1e-9):
            x *= 1.001 * max(reach_lo, 1e-9) / max(r, 1e-12)
        th[k] = np.clip(model.inverse_kinematics(x, params), b.th_min, b.th_max)
        J = model.jacobian(th[k], params)
        det = float(np.linalg.det(J))
        if abs(det) > 1e-6:
            td[k] = np.linalg.solve(J, window.xd_ref[k])
        else:
            td[k] = 0.0
        td[k] = np.clip(td[k], b.thd_min, b.thd_max)
    thdd = (td[1:] - td[:-1]) / config.dt
    f = model.inverse_dynamics(th[:n], td[:n], thdd, params)
    f = np.clip(f, b.f_min, b.f_max)
    return pack(f, np.hstack([th[1:], td[1:]]))


def rollout(measured: JointState, controls: np.ndarray, config: OcpConfig,
            params: ModelParams) -> np.ndarray:
    """Build the defect-feasible z obtained by integrating the controls forward."""
    controls = np.asarray(controls, dtype=float)
    n = config.horizon
    if controls.shape != (n, 2):
        raise ValueError("controls must be (N, 2)")
    states = np.empty((n, 4))
    th, td = measured.theta, measured.theta_dot
    for k in range(n):
        th, td = step_from_effort(th, td, controls[k], config.dt,
                                  config.integrator, params)
        states[k, :2] = th
        states[k, 2:] = td
    return pack(controls, states)


# ------------------------------------------------------------------- costs

def _weighted_sq(v: np.ndarray, diag: np.ndarray) -> float:
    return float(np.sum(diag * v * v))


def running_cost(theta, theta_dot, f, x_ref, xd_ref, config: OcpConfig,
                 params: ModelParams) -> float:
    """Stage cost: position + velocity tracking plus effort penalty."""
    x = model.forward_kinematics(theta, params)
    xd = model.tcp_twist(theta, theta_dot, params)
    return (_weighted_sq(x - np.asarray(x_ref), config.qx)
            + _weighted_sq(xd - np.asarray(xd_ref), config.qxd)
            + _weighted_sq(np.asarray(f, dtype=float), config.r))


def terminal_cost(theta, theta_dot, x_ref, xd_ref, config: OcpConfig,
                  params: ModelParams) -> float:
    """Final-node cost with its own weights and no effort term."""
    x = model.forward_kinematics(theta, params)
    xd = model.tcp_twist(theta, theta_dot, params)
    return (_weighted_sq(x - np.asarray(x_ref), config.qx_n)
            + _weighted_sq(xd - np.asarray(xd_ref), config.qxd_n))


def total_cost(z: np.ndarray, window: ReferenceWindow, measured: JointState,
               config: OcpConfig, params: ModelParams) -> float:
    """J = 1/2 (sum_{k=0}^{N-1} L_k + L_N), stage 0 at the pinned measurement."""
    n = config.horizon
    controls, states = unpack(z, n)
    total = running_cost(measured.theta, measured.theta_dot, controls[0],
                         window.x_ref[0], window.xd_ref[0], config, params)
    for k in range(1, n):
        total += running_cost(states[k - 1, :2], states[k - 1, 2:], controls[k],
                              window.x_ref[k], window.xd_ref[k], config, params)
    total += terminal_cost(states[n - 1, :2], states[n - 1, 2:],
                           window.x_ref[n], window.xd_ref[n], config, params)
    return 0.5 * total


# ----------------------------------------------------------------- residuals

def defect_residuals(z: np.ndarray, measured: JointState, config: OcpConfig,
                     params: ModelParams) -> np.ndarray:
    """Shooting defects (4N,): decided state minus integrated prediction."""
    n = config.horizon
    controls, states = unpack(z, n)
    th_all = np.vstack([measured.theta, states[:, :2]])
    td_all = np.vstack([measured.theta_dot, states[:, 2:]])
    th_hat, td_hat = step_from_effort(th_all[:n], td_all[:n], controls,
                                      config.dt, config.integrator, params)
    res = np.empty((n, 4))
    res[:, :2] = th_all[1:] - th_hat
    res[:, 2:] = td_all[1:] - td_hat
    return res.reshape(-1)


@dataclass(frozen=True)
class ConstraintReport:
    """Stacked constraint values with bounds and row identification.

    Row labels are (family, stage, axis) with family one of
    x / xd / th / thd / thdd / f. Rows on the pinned stage-0 state are
    reported for logging but are not actionable by the optimizer.
    """

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    labels: tuple
    actionable: np.ndarray

    def rows(self, family: str):
        idx = [i for i, lab in enumerate(self.labels) if lab[0] == family]
        return np.array(idx, dtype=int)


def inequality_values(z: np.ndarray, measured: JointState, config: OcpConfig,
                      params: ModelParams) -> ConstraintReport:
    """Evaluate every bound family along the horizon.

    theta/thdot rows are plain variable bounds on z; Cartesian and
    acceleration rows are nonlinear in the decision variables.
    """
    n = config.horizon
    b = config.bounds
    controls, states = unpack(z, n)
    th_all = np.vstack([measured.theta, states[:, :2]])
    td_all = np.vstack([measured.theta_dot, states[:, 2:]])
    x_all = model.forward_kinematics(th_all, params)
    xd_all = model.tcp_twist(th_all, td_all, params)
    thdd = model.forward_dynamics(th_all[:n], td_all[:n], controls, params)

    values, lower, upper, labels, actionable = [], [], [], [], []

    def add(family, stage, vec, lo, hi, act):
        for axis in range(2):
            values.append(vec[axis])
            lower.append(lo[axis])
            upper.append(hi[axis])
            labels.append((family, stage, axis))
            actionable.append(act)

    for k in range(n + 1):
        add("x", k, x_all[k], b.x_min, b.x_max, k > 0)
    for k in range(n + 1):
        add("xd", k, xd_all[k], b.xd_min, b.xd_max, k > 0)
    for k in range(1, n + 1):
        add("th", k, th_all[k], b.th_min, b.th_max, True)
    for k in range(1, n + 1):
        add("thd", k, td_all[k], b.thd_min, b.thd_max, True)
    for k in range(n):
        add("thdd", k, thdd[k], b.thdd_min, b.thdd_max, True)
    for k in range(n):
        add("f", k, controls[k], b.f_min, b.f_max, True)

    return ConstraintReport(values=np.array(values), lower=np.array(lower),
                            upper=np.array(upper), labels=tuple(labels),
                            actionable=np.array(actionable, dtype=bool))


# ------------------------------------------------------------- NLP bundle

def _static_arrays(config: OcpConfig, params: ModelParams):
    """Horizon-tiled bounds/weights/scales, memoized on the config object
    (the NLP bundle is rebuilt every control cycle; these never change)."""
    cached = config.__dict__.get("_static_arrays")
    if cached is not None and cached[0] is params:
        return cached[1]
    n = config.horizon
    b = config.bounds
    z_lower = np.tile(np.concatenate([b.f_min, b.th_min, b.thd_min]), n)
    z_upper = np.tile(np.concatenate([b.f_max, b.th_max, b.thd_max]), n)
    # state boxes may be elastically relaxed by the solver, effort boxes not
    soft = np.concatenate([np.zeros(2, dtype=bool), np.ones(4, dtype=bool)])
    z_bound_soft = np.tile(soft, n)
    # effort entries live at gravity-torque scale; the solver equilibrates
    f_scale = max(1.0, float(np.abs(
        model.gravity_vector(np.zeros(2), params)).max()))
    z_scales = np.tile(np.array([f_scale, f_scale, 1.0, 1.0, 1.0, 1.0]), n)
    ineq_lower = np.concatenate([
        np.tile(b.x_min, n), np.tile(b.xd_min, n), np.tile(b.thdd_min, n)])
    ineq_upper = np.concatenate([
        np.tile(b.x_max, n), np.tile(b.xd_max, n), np.tile(b.thdd_max, n)])
    qx_stages = np.vstack([np.tile(config.qx, (n - 1, 1)), config.qx_n])
    qxd_stages = np.vstack([np.tile(config.qxd, (n - 1, 1)), config.qxd_n])
    arrays = (z_lower, z_upper, z_bound_soft, z_scales, ineq_lower,
              ineq_upper, qx_stages, qxd_stages)
    object.__setattr__(config, "_static_arrays", (params, arrays))
    return arrays


@dataclass
class DerivBundle:
    """One-pass NLP derivatives at a fixed z (dense blocks)."""

    cost: float
    grad: np.ndarray
    c_eq: np.ndarray
    J_eq: np.ndarray
    c_in: np.ndarray
    J_in: np.ndarray


class NlpFunctions:
    """Callable bundle of the transcribed NLP for one reference window.

    Immutable after construction; cost/constraint evaluations at the same z
    share a single cached workspace pass, so interleaved calls stay cheap
    inside the control loop.
    """

    def __init__(self, window: ReferenceWindow, measured: JointState,
                 config: OcpConfig, params: ModelParams):
        n = config.horizon
        if window.x_ref.shape[0] != n + 1:
            raise ValueError("reference window does not match the horizon")
        self.window = window
        self.measured = measured
        self.config = config
        self.params = params
        self.dim = 6 * n
        self.n_eq = 4 * n
        self.n_in = 6 * n

        static = _static_arrays(config, params)
        (self.z_lower, self.z_upper, self.z_bound_soft, self.z_scales,
         self.ineq_lower, self.ineq_upper, self._qx_stages,
         self._qxd_stages) = static

        # stage-0 cost contribution is constant except for the f_0 effort term
        self._x0 = model.forward_kinematics(measured.theta, params)
        self._xd0 = model.tcp_twist(measured.theta, measured.theta_dot, params)
        self._l0_state = (_weighted_sq(self._x0 - window.x_ref[0], config.qx)
                          + _weighted_sq(self._xd0 - window.xd_ref[0], config.qxd))
        self._vals_key = None
        self._vals = None
        self._derivs_key = None
        self._derivs = None

    # -- fused passes -----------------------------------------------------

    def _value_pass(self, z: np.ndarray, key: bytes):
        """One shared workspace pass, cached by the bytes of z."""
        if key == self._vals_key:
            return self._vals
        cfg, params, n = self.config, self.params, self.config.horizon
        controls = z.reshape(n, 6)[:, :2]
        states = z.reshape(n, 6)[:, 2:]
        th_all = np.vstack([self.measured.theta, states[:, :2]])
        td_all = np.vstack([self.measured.theta_dot, states[:, 2:]])

        H = model.mass_matrix(th_all[:n], params)
        h = model.bias_vector(th_all[:n], td_all[:n], params)
        if np.max(model._cond_estimate(H)) > 1e12:
            raise model.IllConditionedDynamicsError(
                "inertia matrix condition exceeds 1e12")
        thdd = model._spd_solve(H, controls - h)
        if cfg.integrator is Integrator.EULER:
            th_hat = th_all[:n] + cfg.dt * td_all[:n]
            td_hat = td_all[:n] + cfg.dt * thdd
        elif cfg.integrator is Integrator.SEMI_EULER:
            td_hat = td_all[:n] + cfg.dt * thdd
            th_hat = th_all[:n] + cfg.dt * td_hat
        else:
            th_hat, td_hat = step_from_effort(th_all[:n], td_all[:n], controls,
                                              cfg.dt, cfg.integrator, params)
        c_eq = np.empty((n, 4))
        c_eq[:, :2] = th_all[1:] - th_hat
        c_eq[:, 2:] = td_all[1:] - td_hat

        x = model.forward_kinematics(th_all[1:], params)
        J = model.jacobian(th_all[1:], params)
        xd = (J @ td_all[1:, :, None])[..., 0]
        c_in = np.concatenate([x.reshape(-1), xd.reshape(-1), thdd.reshape(-1)])

        ex = x - self.window.x_ref[1:]
        ev = xd - self.window.xd_ref[1:]
        cost = 0.5 * (self._l0_state
                      + float(np.sum(self._qx_stages * ex * ex))
                      + float(np.sum(self._qxd_stages * ev * ev))
                      + float(np.sum(cfg.r * controls * controls)))
        work = (cost, c_eq.reshape(-1), c_in,
                (controls, th_all, td_all, thdd, H, x, J, xd, ex, ev))
        self._vals = work
        self._vals_key = key
        return work

    def values(self, z) -> tuple[float, np.ndarray, np.ndarray]:
        """Fused (cost, equality residuals, inequality values) at z."""
        z = np.ascontiguousarray(z, dtype=float)
        cost, c_eq, c_in, _ = self._value_pass(z, z.tobytes())
        return cost, c_eq, c_in

    def derivatives(self, z) -> DerivBundle:
        """Fused values + dense first derivatives at z."""
        z = np.ascontiguousarray(z, dtype=float)
        key = z.tobytes()
        if key == self._derivs_key:
            return self._derivs
        cfg, params, n = self.config, self.params, self.config.horizon
        cost, c_eq, c_in, work = self._value_pass(z, key)
        controls, th_all, td_all, thdd, H, x, J, xd, ex, ev = work
        qx, qxd = self._qx_stages, self._qxd_stages

        # cost gradient
        grad = np.zeros(self.dim)
        gz = grad.reshape(n, 6)
        gz[:, :2] = cfg.r * controls
        D = model.tcp_twist_partial_theta(th_all[1:], td_all[1:], params)
        wx = qx * ex
        wv = qxd * ev
        gz[:, 2:4] = (np.transpose(J, (0, 2, 1)) @ wx[:, :, None])[..., 0] \
            + (np.transpose(D, (0, 2, 1)) @ wv[:, :, None])[..., 0]
        gz[:, 4:6] = (np.transpose(J, (0, 2, 1)) @ wv[:, :, None])[..., 0]

        # forward-dynamics partials are shared by the defect and
        # acceleration-row Jacobians
        fd_th, fd_td, fd_f = model._dynamics_partials_core(
            th_all[:n], td_all[:n], thdd, H, params)

        # defect Jacobian
        if cfg.integrator is Integrator.EULER:
            A = np.zeros((n, 4, 4))
            A[:, 0, 0] = A[:, 1, 1] = A[:, 2, 2] = A[:, 3, 3] = 1.0
            A[:, 0, 2] = A[:, 1, 3] = cfg.dt
            A[:, 2:, 0:2] = cfg.dt * fd_th
            A[:, 2:, 2:4] += cfg.dt * fd_td
            B = np.zeros((n, 4, 2))
            B[:, 2:, :] = cfg.dt * fd_f
        elif cfg.integrator is Integrator.SEMI_EULER:
            A = np.zeros((n, 4, 4))
            A[:, 2:, 0:2] = cfg.dt * fd_th
            A[:, 2:, 2:4] = cfg.dt * fd_td
            A[:, 2, 2] += 1.0
            A[:, 3, 3] += 1.0
            A[:, 0:2, :] = cfg.dt * A[:, 2:, :]
            A[:, 0, 0] += 1.0
            A[:, 1, 1] += 1.0
            B = np.zeros((n, 4, 2))
            B[:, 2:, :] = cfg.dt * fd_f
            B[:, 0:2, :] = cfg.dt * B[:, 2:, :]
        else:
            _, _, A, B = _step_with_partials(th_all[:n], td_all[:n], controls,
                                             cfg.dt, cfg.integrator, params)
        J_eq = np.zeros((self.n_eq, self.dim))
        for k in range(n):
            r0 = 4 * k
            J_eq[r0:r0 + 4, 6 * k + 2:6 * k + 6] = np.eye(4)
            J_eq[r0:r0 + 4, 6 * k:6 * k + 2] = -B[k]
            if k > 0:
                J_eq[r0:r0 + 4, 6 * (k - 1) + 2:6 * (k - 1) + 6] = -A[k]

        # inequality Jacobian: x rows, xd rows, thdd rows
        J_in = np.zeros((self.n_in, self.dim))
        for k in range(1, n + 1):
            col = 6 * (k - 1) + 2
            J_in[2 * (k - 1):2 * k, col:col + 2] = J[k - 1]
            r_xd = 2 * n + 2 * (k - 1)
            J_in[r_xd:r_xd + 2, col:col + 2] = D[k - 1]
            J_in[r_xd:r_xd + 2, col + 2:col + 4] = J[k - 1]
        for k in range(n):
            r_dd = 4 * n + 2 * k
            J_in[r_dd:r_dd + 2, 6 * k:6 * k + 2] = fd_f[k]
            if k > 0:
                col = 6 * (k - 1) + 2
                J_in[r_dd:r_dd + 2, col:col + 2] = fd_th[k]
                J_in[r_dd:r_dd + 2, col + 2:col + 4] = fd_td[k]

        self._derivs = DerivBundle(cost=cost, grad=grad, c_eq=c_eq, J_eq=J_eq,
                                   c_in=c_in, J_in=J_in)
        self._derivs_key = key
        return self._derivs

    def gauss_newton_seed(self, z) -> np.ndarray:
        """Gauss-Newton Hessian of the tracking cost at z (positive
        semidefinite; the solver adds its own regularization floor).

        Used to seed the quasi-Newton matrix: with weights spanning many
        orders of magnitude a scaled identity start needs dozens of rank-2
        corrections before the first useful step.
        """
        cfg, params, n = self.config, self.params, self.config.horizon
        z = np.ascontiguousarray(z, dtype=float)
        states = z.reshape(n, 6)[:, 2:]
        th = states[:, :2]
        td = states[:, 2:]
        J = model.jacobian(th, params)
        D = model.tcp_twist_partial_theta(th, td, params)
        qx = np.vstack([np.tile(cfg.qx, (n - 1, 1)), cfg.qx_n])
        qxd = np.vstack([np.tile(cfg.qxd, (n - 1, 1)), cfg.qxd_n])
        B = np.zeros((self.dim, self.dim))
        for k in range(n):
            # stage output map [x; xd] wrt (theta, thdot) is [[J, 0], [D, J]]
            Ck = np.zeros((4, 4))
            Ck[:2, :2] = J[k]
            Ck[2:, :2] = D[k]
            Ck[2:, 2:] = J[k]
            W = np.concatenate([qx[k], qxd[k]])
            blk = Ck.T @ (W[:, None] * Ck)
            i = 6 * k
            B[i:i + 2, i:i + 2] = np.diag(cfg.r)
            B[i + 2:i + 6, i + 2:i + 6] = blk
        return B

    # -- spec-shaped callables --------------------------------------------

    def cost(self, z) -> float:
        return self.values(z)[0]

    def cost_gradient(self, z) -> np.ndarray:
        return self.derivatives(z).grad.copy()

    def eq_residuals(self, z) -> np.ndarray:
        return self.values(z)[1].copy()

    def eq_jacobian(self, z) -> sparse.csr_matrix:
        return sparse.csr_matrix(self.derivatives(z).J_eq)

    def ineq_values(self, z) -> np.ndarray:
        return self.values(z)[2].copy()

    def ineq_jacobian(self, z) -> sparse.csr_matrix:
        return sparse.csr_matrix(self.derivatives(z).J_in)


def build_nlp(window: ReferenceWindow, measured: JointState, config: OcpConfig,
              params: ModelParams) -> NlpFunctions:
    """Construct the NLP evaluator bundle for one window and measurement."""
    return NlpFunctions(window, measured, config, params)


def nlp_jacobians(z: np.ndarray, window: ReferenceWindow, measured: JointState,
                  config: OcpConfig, params: ModelParams):
    """Sparse defect/inequality Jacobians and the cost gradient at z."""
    nlp = build_nlp(window, measured, config, params)
    d = nlp.derivatives(np.asarray(z, dtype=float))
    return sparse.csr_matrix(d.J_eq), sparse.csr_matrix(d.J_in), d.grad.copy()
