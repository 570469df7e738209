"""Closed-form kinematics and dynamics of a planar 2-link revolute arm.

All operations are pure functions over value inputs and broadcast over a
leading batch axis: joint arguments of shape (..., 2) produce results of
shape (..., 2) or (..., 2, 2).  The rigid-body terms are the standard
two-link expressions with center-of-mass offsets, link inertias, gravity
and viscous joint friction:

    f = H(theta) @ theta_ddot + h(theta, theta_dot)

with h collecting Coriolis/centrifugal, gravity and friction effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_COND_LIMIT = 1e12


class IllConditionedDynamicsError(ValueError):
    """Inertia matrix condition estimate exceeded the safe limit."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the 2-link arm (heavy-duty scale defaults)."""

    l1: float = 2.9          # link lengths [m]
    l2: float = 1.6
    m1: float = 300.0        # link masses [kg]
    m2: float = 150.0
    lc1: float = 1.45        # COM offsets along the link [m]
    lc2: float = 0.8
    i1: float = 210.25       # link inertias about COM [kg m^2]
    i2: float = 32.0
    g: float = 9.81          # gravity [m/s^2]
    b1: float = 0.0          # viscous friction [N m s/rad]
    b2: float = 0.0

    def __post_init__(self):
        for name in ("l1", "l2", "m1", "m2", "lc1", "lc2", "i1", "i2"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.lc1 > self.l1 or self.lc2 > self.l2:
            raise ValueError("COM offsets must not exceed link lengths")
        if self.g < 0.0 or self.b1 < 0.0 or self.b2 < 0.0:
            raise ValueError("g and friction coefficients must be >= 0")

    @property
    def friction(self) -> np.ndarray:
        return np.array([self.b1, self.b2])


@dataclass(frozen=True)
class JointState:
    """Joint positions and velocities of the 2-DoF arm."""

    theta: np.ndarray
    theta_dot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _finite_pair(self.theta, "theta"))
        object.__setattr__(self, "theta_dot", _finite_pair(self.theta_dot, "theta_dot"))


@dataclass(frozen=True)
class JointEffort:
    """Generalized joint forces/torques [N m]."""

    f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", _finite_pair(self.f, "f"))


@dataclass(frozen=True)
class TcpState:
    """Tool-center-point planar position [m] and twist [m/s]."""

    x: np.ndarray
    x_dot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _finite_pair(self.x, "x"))
        object.__setattr__(self, "x_dot", _finite_pair(self.x_dot, "x_dot"))


def _finite_pair(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (2,):
        raise ValueError(f"{name} must be a 2-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def _coeffs(params: ModelParams):
    """Dynamic coefficients a1, a2, a3 of the two-link inertia matrix."""
    a1 = params.i1 + params.i2 + params.m1 * params.lc1**2 \
        + params.m2 * (params.l1**2 + params.lc2**2)
    a2 = params.m2 * params.l1 * params.lc2
    a3 = params.i2 + params.m2 * params.lc2**2
    return a1, a2, a3


def mass_matrix(theta, params: ModelParams) -> np.ndarray:
    """Generalized inertia matrix H(theta), symmetric positive definite.

    Only the elbow angle theta[..., 1] enters; shape (..., 2) -> (..., 2, 2).
    """
    theta = np.asarray(theta, dtype=float)
    a1, a2, a3 = _coeffs(params)
    c2 = np.cos(theta[..., 1])
    H = np.empty(theta.shape[:-1] + (2, 2))
    H[..., 0, 0] = a1 + 2.0 * a2 * c2
    H[..., 0, 1] = a3 + a2 * c2
    H[..., 1, 0] = H[..., 0, 1]
    H[..., 1, 1] = a3
    return H


def gravity_vector(theta, params: ModelParams) -> np.ndarray:
    """Gravity torque g(theta) = dV/dtheta."""
    theta = np.asarray(theta, dtype=float)
    c1 = np.cos(theta[..., 0])
    c12 = np.cos(theta[..., 0] + theta[..., 1])
    out = np.empty(theta.shape)
    out[..., 1] = params.m2 * params.lc2 * params.g * c12
    out[..., 0] = (params.m1 * params.lc1 + params.m2 * params.l1) \
        * params.g * c1 + out[..., 1]
    return out


def bias_vector(theta, theta_dot, params: ModelParams) -> np.ndarray:
    """Coriolis/centrifugal + gravity + viscous friction vector h(theta, theta_dot)."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    _, a2, _ = _coeffs(params)
    s2 = np.sin(theta[..., 1])
    td1 = theta_dot[..., 0]
    td2 = theta_dot[..., 1]
    out = gravity_vector(theta, params)
    out[..., 0] += -a2 * s2 * (2.0 * td1 * td2 + td2 * td2) + params.b1 * td1
    out[..., 1] += a2 * s2 * td1 * td1 + params.b2 * td2
    return out


def inverse_dynamics(theta, theta_dot, theta_ddot, params: ModelParams) -> np.ndarray:
    """Joint effort required for the given acceleration: f = H @ thdd + h."""
    theta_ddot = np.asarray(theta_ddot, dtype=float)
    H = mass_matrix(theta, params)
    return (H @ theta_ddot[..., None])[..., 0] + bias_vector(theta, theta_dot, params)


def _chol2(H: np.ndarray):
    """Cholesky entries of batched symmetric positive definite 2x2 H."""
    l11 = np.sqrt(H[..., 0, 0])
    l21 = H[..., 1, 0] / l11
    l22 = np.sqrt(H[..., 1, 1] - l21 * l21)
    return l11, l21, l22


def _spd_solve(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve H x = rhs for batched symmetric positive definite 2x2 H.

    Explicit Cholesky factorization; never forms H^-1.
    """
    l11, l21, l22 = _chol2(H)
    # forward substitution L y = rhs, then back substitution L^T x = y
    y1 = rhs[..., 0] / l11
    y2 = (rhs[..., 1] - l21 * y1) / l22
    out = np.empty(np.broadcast_shapes(rhs.shape, H.shape[:-2] + (2,)))
    x2 = y2 / l22
    out[..., 1] = x2
    out[..., 0] = (y1 - l21 * x2) / l11
    return out


def _cond_estimate(H: np.ndarray) -> np.ndarray:
    """Condition number of batched symmetric 2x2 matrices (eigenvalue ratio)."""
    a = H[..., 0, 0]
    b = H[..., 0, 1]
    c = H[..., 1, 1]
    mean = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lo = mean - disc
    hi = mean + disc
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lo > 0.0, hi / lo, np.inf)


def forward_dynamics(theta, theta_dot, f, params: ModelParams) -> np.ndarray:
    """Joint acceleration thdd = H(theta)^-1 (f - h(theta, theta_dot)).

    Raises IllConditionedDynamicsError if cond(H) > 1e12 (unreachable for
    valid parameters).
    """
    f = np.asarray(f, dtype=float)
    H = mass_matrix(theta, params)
    if np.max(_cond_estimate(H)) > _COND_LIMIT:
        raise IllConditionedDynamicsError("inertia matrix condition exceeds 1e12")
    return _spd_solve(H, f - bias_vector(theta, theta_dot, params))


def forward_kinematics(theta, params: ModelParams) -> np.ndarray:
    """Planar TCP position [l1 c1 + l2 c12, l1 s1 + l2 s12]."""
    theta = np.asarray(theta, dtype=float)
    t1 = theta[..., 0]
    t12 = theta[..., 0] + theta[..., 1]
    out = np.empty(theta.shape)
    out[..., 0] = params.l1 * np.cos(t1) + params.l2 * np.cos(t12)
    out[..., 1] = params.l1 * np.sin(t1) + params.l2 * np.sin(t12)
    return out


def jacobian(theta, params: ModelParams) -> np.ndarray:
    """TCP Jacobian J(theta) = d(forward_kinematics)/d(theta).

    Singular at theta2 in {0, pi}; returned as-is, callers must not invert.
    """
    theta = np.asarray(theta, dtype=float)
    t1 = theta[..., 0]
    t12 = theta[..., 0] + theta[..., 1]
    s1, c1 = np.sin(t1), np.cos(t1)
    s12, c12 = np.sin(t12), np.cos(t12)
    J = np.empty(theta.shape[:-1] + (2, 2))
    J[..., 0, 0] = -params.l1 * s1 - params.l2 * s12
    J[..., 0, 1] = -params.l2 * s12
    J[..., 1, 0] = params.l1 * c1 + params.l2 * c12
    J[..., 1, 1] = params.l2 * c12
    return J


def tcp_twist(theta, theta_dot, params: ModelParams) -> np.ndarray:
    """TCP velocity J(theta) @ theta_dot."""
    theta_dot = np.asarray(theta_dot, dtype=float)
    return (jacobian(theta, params) @ theta_dot[..., None])[..., 0]


def tcp_twist_partial_theta(theta, theta_dot, params: ModelParams) -> np.ndarray:
    """d(J(theta) theta_dot)/d(theta), needed for velocity-tracking gradients."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    t1 = theta[..., 0]
    t12 = theta[..., 0] + theta[..., 1]
    s1, c1 = np.sin(t1), np.cos(t1)
    s12, c12 = np.sin(t12), np.cos(t12)
    td1 = theta_dot[..., 0]
    tds = theta_dot[..., 0] + theta_dot[..., 1]
    D = np.empty(theta.shape[:-1] + (2, 2))
    D[..., 0, 0] = -params.l1 * c1 * td1 - params.l2 * c12 * tds
    D[..., 0, 1] = -params.l2 * c12 * tds
    D[..., 1, 0] = -params.l1 * s1 * td1 - params.l2 * s12 * tds
    D[..., 1, 1] = -params.l2 * s12 * tds
    return D


def _bias_partials(theta, theta_dot, params: ModelParams):
    """dh/dtheta and dh/dtheta_dot, closed form."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    _, a2, _ = _coeffs(params)
    s1 = np.sin(theta[..., 0])
    s2 = np.sin(theta[..., 1])
    c2 = np.cos(theta[..., 1])
    s12 = np.sin(theta[..., 0] + theta[..., 1])
    td1 = theta_dot[..., 0]
    td2 = theta_dot[..., 1]
    g_lift = (params.m1 * params.lc1 + params.m2 * params.l1) * params.g
    g_tilt = params.m2 * params.lc2 * params.g

    dh_dth = np.empty(theta.shape[:-1] + (2, 2))
    dh_dth[..., 0, 0] = -g_lift * s1 - g_tilt * s12
    dh_dth[..., 1, 0] = -g_tilt * s12
    dh_dth[..., 0, 1] = -a2 * c2 * (2.0 * td1 * td2 + td2 * td2) - g_tilt * s12
    dh_dth[..., 1, 1] = a2 * c2 * td1 * td1 - g_tilt * s12

    dh_dtd = np.empty_like(dh_dth)
    dh_dtd[..., 0, 0] = -2.0 * a2 * s2 * td2 + params.b1
    dh_dtd[..., 0, 1] = -2.0 * a2 * s2 * (td1 + td2)
    dh_dtd[..., 1, 0] = 2.0 * a2 * s2 * td1
    dh_dtd[..., 1, 1] = params.b2
    return dh_dth, dh_dtd


def dynamics_partials(theta, theta_dot, f, params: ModelParams):
    """First derivatives of forward_dynamics: (d thdd/d theta, /d theta_dot, /d f)."""
    theta = np.asarray(theta, dtype=float)
    f = np.asarray(f, dtype=float)
    H = mass_matrix(theta, params)
    h = bias_vector(theta, theta_dot, params)
    thdd = _spd_solve(H, f - h)
    return _dynamics_partials_core(theta, theta_dot, thdd, H, params)


def _dynamics_partials_core(theta, theta_dot, thdd, H, params: ModelParams):
    """Partials given the already-computed acceleration and inertia matrix."""
    dh_dth, dh_dtd = _bias_partials(theta, theta_dot, params)
    _, a2, _ = _coeffs(params)
    s2 = np.sin(theta[..., 1])
    # dH/dtheta2 @ thdd (dH/dtheta1 = 0)
    rhs_th = dh_dth.copy()
    rhs_th[..., 0, 1] += -a2 * s2 * (2.0 * thdd[..., 0] + thdd[..., 1])
    rhs_th[..., 1, 1] += -a2 * s2 * thdd[..., 0]
    d_dth = -_spd_solve_mat(H, rhs_th)
    d_dtd = -_spd_solve_mat(H, dh_dtd)
    eye = np.zeros(H.shape)
    eye[..., 0, 0] = 1.0
    eye[..., 1, 1] = 1.0
    d_df = _spd_solve_mat(H, eye)
    return d_dth, d_dtd, d_df


def _spd_solve_mat(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """SPD solve with a 2x2 matrix right-hand side (factor once)."""
    l11, l21, l22 = _chol2(H)
    l11 = l11[..., None]
    l21 = l21[..., None]
    l22 = l22[..., None]
    y1 = rhs[..., 0, :] / l11
    y2 = (rhs[..., 1, :] - l21 * y1) / l22
    out = np.empty(np.broadcast_shapes(rhs.shape, H.shape))
    x2 = y2 / l22
    out[..., 1, :] = x2
    out[..., 0, :] = (y1 - l21 * x2) / l11
    return out


def kinetic_energy(theta, theta_dot, params: ModelParams) -> np.ndarray:
    """T = 1/2 theta_dot^T H(theta) theta_dot."""
    theta_dot = np.asarray(theta_dot, dtype=float)
    H = mass_matrix(theta, params)
    return 0.5 * np.einsum("...i,...ij,...j->...", theta_dot, H, theta_dot)


def potential_energy(theta, params: ModelParams) -> np.ndarray:
    """Gravitational potential, zero level at the base joint height."""
    theta = np.asarray(theta, dtype=float)
    s1 = np.sin(theta[..., 0])
    s12 = np.sin(theta[..., 0] + theta[..., 1])
    return params.g * (params.m1 * params.lc1 * s1
                       + params.m2 * (params.l1 * s1 + params.lc2 * s12))


def inverse_kinematics(x, params: ModelParams, elbow_down: bool = True) -> np.ndarray:
    """Joint angles reaching planar TCP position x (convenience for setup).

    Raises ValueError when x lies outside the reachable annulus.
    """
    x = np.asarray(x, dtype=float)
    d2 = float(x[0] ** 2 + x[1] ** 2)
    c2 = (d2 - params.l1**2 - params.l2**2) / (2.0 * params.l1 * params.l2)
    if c2 > 1.0 + 1e-12 or c2 < -1.0 - 1e-12:
        raise ValueError(f"TCP target {x} outside the reachable workspace")
    c2 = min(1.0, max(-1.0, c2))
    t2 = -math.acos(c2) if elbow_down else math.acos(c2)
    t1 = math.atan2(x[1], x[0]) - math.atan2(
        params.l2 * math.sin(t2), params.l1 + params.l2 * math.cos(t2))
    return np.array([t1, t2])
