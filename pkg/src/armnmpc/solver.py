"""Limited-iteration SQP with damped BFGS and an l1-merit line search.

Designed for the one-solver-iteration-per-control-cycle regime: every piece
of state (primal iterate, multipliers, BFGS matrix, QP active set) can be
carried across calls, so successive single-iteration solves on a slowly
changing NLP behave like one continuous SQP run.

The QP subproblem is solved by a primal-dual active-set iteration that is
extremely cheap when warm-started (one KKT factorization per active-set
guess), backed by a Mehrotra predictor-corrector interior-point method when
the active-set iteration cycles, and by an l1 elastic relaxation when the
linearized constraints are infeasible.  Every QP answer is accepted only
after an explicit KKT verification.
"""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration_limit"     # normal in online mode
    LINE_SEARCH_FAILURE = "line_search_failure"
    QP_FAILURE = "qp_failure"


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 1
    kkt_tolerance: float = 1e-6
    bfgs_reset_threshold: float = 1e12      # Frobenius-norm reset guard
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    merit_penalty_factor: float = 2.0       # penalty = factor * |multipliers|_inf
    bfgs_damping: float = 0.2

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.kkt_tolerance <= 0.0:
            raise ValueError("kkt_tolerance must be positive")


@dataclass
class WarmStart:
    """Primal/dual/BFGS/active-set state carried between solves."""

    z: np.ndarray
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    bound_mult: np.ndarray
    bfgs: np.ndarray | None = None
    active_rows: np.ndarray | None = None
    active_bounds: np.ndarray | None = None

    @classmethod
    def cold(cls, nlp, z0=None) -> "WarmStart":
        z = np.zeros(nlp.dim) if z0 is None else np.asarray(z0, dtype=float)
        return cls(z=z.copy(), eq_mult=np.zeros(nlp.n_eq),
                   ineq_mult=np.zeros(nlp.n_in), bound_mult=np.zeros(nlp.dim))


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)


@dataclass
class SolveResult:
    z: np.ndarray
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    bound_mult: np.ndarray
    kkt: KktResidual
    iterations: int
    wall_time: float
    status: SolveStatus
    merit_history: list = field(default_factory=list)  # (before, after, penalty)
    bfgs: np.ndarray | None = None
    active_rows: np.ndarray | None = None
    active_bounds: np.ndarray | None = None
    qp_fallbacks: int = 0

    def to_warm_start(self) -> WarmStart:
        return WarmStart(z=self.z.copy(), eq_mult=self.eq_mult.copy(),
                         ineq_mult=self.ineq_mult.copy(),
                         bound_mult=self.bound_mult.copy(),
                         bfgs=None if self.bfgs is None else self.bfgs.copy(),
                         active_rows=None if self.active_rows is None
                         else self.active_rows.copy(),
                         active_bounds=None if self.active_bounds is None
                         else self.active_bounds.copy())


# ====================================================================== QP ==

@dataclass
class QpResult:
    p: np.ndarray
    y_eq: np.ndarray
    lam_rows: np.ndarray        # signed: >0 upper side active, <0 lower side
    mu_bounds: np.ndarray       # signed bound multipliers
    active_rows: np.ndarray     # int8 in {-1, 0, +1}
    active_bounds: np.ndarray
    kkt: float
    status: str                 # "optimal" | "infeasible"
    used_fallback: bool = False
    max_slack: float = 0.0


def _as_2d(M, width):
    if M is None:
        return np.zeros((0, width))
    M = np.asarray(M, dtype=float)
    return M.reshape(0, width) if M.size == 0 else np.atleast_2d(M)


def _verify_qp(B, g, A, b, R, lo, hi, p, y, lam):
    """Full KKT residual of the two-sided QP at a candidate solution."""
    stat = B @ p + g + lam @ R
    if A.shape[0]:
        stat = stat + y @ A
        eq_res = np.abs(A @ p - b).max() if b.size else 0.0
    else:
        eq_res = 0.0
    r = R @ p if R.shape[0] else np.zeros(0)
    viol = 0.0
    comp = 0.0
    sign = 0.0
    if R.shape[0]:
        viol = max(np.maximum(r - hi, 0.0).max(initial=0.0),
                   np.maximum(lo - r, 0.0).max(initial=0.0))
        up = lam > 0.0
        dn = lam < 0.0
        if up.any():
            comp = max(comp, np.abs(lam[up] * (hi[up] - r[up])).max())
        if dn.any():
            comp = max(comp, np.abs(lam[dn] * (r[dn] - lo[dn])).max())
        sign = 0.0  # sign errors already folded into comp via gap side
    return max(np.abs(stat).max(), eq_res, viol, comp, sign)


def _kkt_solve(B, A, R_act, g_rhs, b_rhs, t_rhs):
    """Solve the equality KKT system for a fixed active set.

    Falls back to a least-squares solution when the active rows are linearly
    dependent (e.g. a Cartesian row spanned by two active joint bounds).
    """
    n = B.shape[0]
    me = A.shape[0]
    ma = R_act.shape[0]
    dim = n + me + ma
    K = np.zeros((dim, dim))
    K[:n, :n] = B
    if me:
        K[:n, n:n + me] = A.T
        K[n:n + me, :n] = A
    if ma:
        K[:n, n + me:] = R_act.T
        K[n + me:, :n] = R_act
    rhs = np.concatenate([g_rhs, b_rhs, t_rhs])

    def backward_ok(sol):
        if sol is None or not np.all(np.isfinite(sol)):
            return False
        denom = float(np.abs(K).max()) * float(np.abs(sol).max()) \
            + float(np.abs(rhs).max()) + 1.0
        return float(np.abs(K @ sol - rhs).max()) <= 1e-10 * denom

    sol = None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(K, check_finite=False)
        sol = sla.lu_solve((lu, piv), rhs, check_finite=False)
        # two refinement steps keep huge-weight problems clean
        for _ in range(2):
            if not np.all(np.isfinite(sol)):
                break
            sol = sol + sla.lu_solve((lu, piv), rhs - K @ sol,
                                     check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        sol = None
    if not backward_ok(sol):
        # dependent active rows: a consistent least-squares solution is fine
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if not backward_ok(sol):
            return None
    return sol[:n], sol[n:n + me], sol[n + me:]


def _active_from(R, lo, hi, p, lam, tol=1e-9):
    """Active-set signature of a solution, for warm starts."""
    m = R.shape[0]
    active = np.zeros(m, dtype=np.int8)
    if m:
        r = R @ p
        scale = 1.0 + np.abs(r)
        active[lam > 1e-11] = 1
        active[lam < -1e-11] = -1
        near_hi = np.isfinite(hi) & ((hi - r) <= tol * scale)
        near_lo = np.isfinite(lo) & ((r - lo) <= tol * scale)
        active[(active == 0) & near_hi] = 1
        active[(active == 0) & near_lo] = -1
    return active


def _polish(B, g, A, b, R, lo, hi, p, y, lam):
    """Re-solve the KKT system on the multiplier-identified active set and
    keep whichever of (raw, polished) verifies better."""
    kkt_raw = _verify_qp(B, g, A, b, R, lo, hi, p, y, lam)
    active = np.zeros(R.shape[0], dtype=np.int8)
    active[lam > 1e-11] = 1
    active[lam < -1e-11] = -1
    idx = np.flatnonzero(active)
    t = np.where(active[idx] > 0, hi[idx], lo[idx])
    sol = _kkt_solve(B, A, R[idx], -g, b, t)
    if sol is None:
        return p, y, lam, kkt_raw
    p2, y2, lam_act = sol
    lam2 = np.zeros(R.shape[0])
    lam2[idx] = lam_act
    kkt2 = _verify_qp(B, g, A, b, R, lo, hi, p2, y2, lam2)
    if kkt2 < kkt_raw:
        return p2, y2, lam2, kkt2
    return p, y, lam, kkt_raw


def _pdas(B, g, A, b, R, lo, hi, active0, tol):
    """Primal-dual active-set iteration; returns None when it cycles.

    Additions are capped so the working set never exceeds the degrees of
    freedom left by the equality constraints (a flooded working set makes
    the KKT matrix singular).
    """
    n = B.shape[0]
    me = A.shape[0]
    m = R.shape[0]
    capacity = max(0, n - me)
    active = active0.astype(np.int8).copy()
    # never start with an active state on an infinite bound
    active[(active == 1) & ~np.isfinite(hi)] = 0
    active[(active == -1) & ~np.isfinite(lo)] = 0
    if int(np.count_nonzero(active)) > capacity:
        active[:] = 0
    seen = set()
    for _ in range(max(10, 3 * m + 10)):
        key = active.tobytes()
        if key in seen:
            return None
        seen.add(key)
        idx = np.flatnonzero(active)
        t = np.where(active[idx] > 0, hi[idx], lo[idx])
        sol = _kkt_solve(B, A, R[idx], -g, b, t)
        if sol is None:
            return None
        p, y, lam_act = sol
        lam = np.zeros(m)
        lam[idx] = lam_act
        r = R @ p if m else np.zeros(0)

        new_active = active.copy()
        # drop active rows whose multiplier sign is wrong
        wrong_up = (active == 1) & (lam < -tol)
        wrong_dn = (active == -1) & (lam > tol)
        new_active[wrong_up | wrong_dn] = 0
        # add the most-violated sides of inactive rows, up to capacity
        inact = active == 0
        up_viol = np.where(inact, r - hi, -np.inf)
        dn_viol = np.where(inact, lo - r, -np.inf)
        viol = np.maximum(up_viol, dn_viol)
        cand = np.flatnonzero(viol > tol)
        room = capacity - int(np.count_nonzero(new_active))
        if cand.size and room > 0:
            take = cand[np.argsort(viol[cand])[::-1][:room]]
            new_active[take] = np.where(up_viol[take] >= dn_viol[take], 1, -1)
        elif cand.size and room <= 0:
            return None  # cannot represent the optimal face; let the IPM try
        if np.array_equal(new_active, active):
            kkt = _verify_qp(B, g, A, b, R, lo, hi, p, y, lam)
            return p, y, lam, active, kkt
        active = new_active
    return None


def _goldfarb_idnani(B, g, A, b, G, h, max_iter=None):
    """Dual active-set method for strictly convex QP (Goldfarb-Idnani).

    Solves min 1/2 p'Bp + g'p subject to A p = b and the one-sided rows
    G p <= h.  Starts from the unconstrained optimum and adds violated
    constraints; the dual objective increases strictly at every step, so
    the method cannot cycle.  Operators in the B-metric are recomputed from
    scratch at every active-set change (problems here are tiny).

    Returns (p, y_eq, lam_onesided >= 0) or None when infeasible.
    """
    n = g.size
    me = A.shape[0]
    mi = G.shape[0]
    try:
        cho = sla.cho_factor(B, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None

    # row equilibration for even-handed violation comparisons
    a_norm = np.maximum(np.linalg.norm(A, axis=1), 1e-12) if me else np.zeros(0)
    g_norm = np.maximum(np.linalg.norm(G, axis=1), 1e-12) if mi else np.zeros(0)
    An = A / a_norm[:, None] if me else A
    bn = b / a_norm if me else b
    Gn = G / g_norm[:, None] if mi else G
    hn = h / g_norm if mi else h

    x = -sla.cho_solve(cho, g, check_finite=False)
    normals = []          # active normals (rows), equality-first
    targets = []          # n.x target value for each active row
    kinds = []            # row index for inequalities, -1-k for equality k
    u = []                # multipliers (free sign on equalities)
    tol = 1e-11 * max(1.0, float(np.abs(g).max()), float(np.abs(x).max()))
    if max_iter is None:
        max_iter = 20 * (me + mi) + 100

    def directions(n_p):
        y0 = sla.cho_solve(cho, n_p, check_finite=False)
        if not normals:
            return y0, np.zeros(0)
        N = np.array(normals).T                  # (n, q)
        Y = sla.cho_solve(cho, N, check_finite=False)
        M = N.T @ Y
        w = N.T @ y0
        try:
            r = sla.solve(M, w, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            r, *_ = np.linalg.lstsq(M, w, rcond=None)
        z = y0 - Y @ r
        return z, r

    def add_constraint(n_p, target, kind):
        """Resolve one violated constraint by dual steps; False = infeasible."""
        u_p = 0.0
        for _ in range(me + mi + 2):
            s_val = float(n_p @ x) - target      # want s_val -> 0 from above
            if s_val <= tol:
                normals.append(n_p)
                targets.append(target)
                kinds.append(kind)
                u.append(u_p)
                return True
            z, r = directions(n_p)
            zn = float(z @ n_p)
            have_z = zn > 1e-13
            t1 = np.inf
            j_drop = -1
            for j in range(len(kinds)):
                if kinds[j] >= 0 and r[j] > 1e-12:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, j_drop = ratio, j
            t2 = s_val / zn if have_z else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                return False
            if have_z:
                x[:] = x - t * z
            for j in range(len(u)):
                u[j] -= t * r[j]
            u_p += t
            if t2 <= t1:
                normals.append(n_p)
                targets.append(target)
                kinds.append(kind)
                u.append(u_p)
                return True
            # partial step: drop the blocking inequality and retry
            normals.pop(j_drop)
            targets.pop(j_drop)
            kinds.pop(j_drop)
            u.pop(j_drop)
        return False

    # equalities first: approach from whichever side they are violated
    for k in range(me):
        res = float(An[k] @ x) - bn[k]
        n_p = An[k] if res > 0 else -An[k]
        target = bn[k] if res > 0 else -bn[k]
        if not add_constraint(n_p, target, -1 - k):
            return None

    for _ in range(max_iter):
        s = Gn @ x - hn if mi else np.zeros(0)
        worst = int(np.argmax(s)) if mi else -1
        if worst < 0 or s[worst] <= 1e-10:
            break
        if not add_constraint(Gn[worst], hn[worst], worst):
            return None
    else:
        return None

    y_eq = np.zeros(me)
    lam = np.zeros(mi)
    for j, kind in enumerate(kinds):
        if kind < 0:
            k = -1 - kind
            sign = 1.0 if float(normals[j] @ An[k]) > 0 else -1.0
            y_eq[k] = sign * u[j] / a_norm[k]
        else:
            lam[kind] += u[j] / g_norm[kind]
    return x, y_eq, lam


def _one_sided(R, lo, hi):
    """Split two-sided rows into Gp <= h, remembering the row/side mapping."""
    rows, rhs, src, side = [], [], [], []
    for i in range(R.shape[0]):
        if np.isfinite(hi[i]):
            rows.append(R[i])
            rhs.append(hi[i])
            src.append(i)
            side.append(1)
        if np.isfinite(lo[i]):
            rows.append(-R[i])
            rhs.append(-lo[i])
            src.append(i)
            side.append(-1)
    if not rows:
        return (np.zeros((0, R.shape[1])), np.zeros(0),
                np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    return (np.array(rows), np.array(rhs),
            np.array(src, dtype=int), np.array(side, dtype=int))


def _elastic(B, g, A, b, R, lo, hi, soft, penalty):
    """l1 elastic relaxation of the soft rows.

    Adds one slack per soft one-sided row: the row becomes Gp - e <= h with
    e >= 0 and cost rho * sum(e) (plus a tiny quadratic regularizer).  The
    expanded QP is solved in penalty-scaled form (objective divided by rho)
    so its data stays O(1) regardless of the penalty magnitude.
    """
    n = g.size
    G, h, src, side = _one_sided(R, lo, hi)
    mg = G.shape[0]
    soft_one = soft[src] if mg else np.zeros(0, dtype=bool)
    ns = int(soft_one.sum())
    if ns == 0:
        return None
    slack_col = np.flatnonzero(soft_one)
    Bx = np.zeros((n + ns, n + ns))
    Bx[:n, :n] = B / penalty
    Bx[n:, n:] = 1e-8 * np.eye(ns)
    gx = np.concatenate([g / penalty, np.ones(ns)])
    Ax = np.hstack([A, np.zeros((A.shape[0], ns))]) if A.shape[0] else \
        np.zeros((0, n + ns))
    Gx = np.zeros((mg + ns, n + ns))
    hx = np.zeros(mg + ns)
    Gx[:mg, :n] = G
    hx[:mg] = h
    for j, row in enumerate(slack_col):
        Gx[row, n + j] = -1.0
    Gx[mg:, n:] = -np.eye(ns)   # e >= 0
    out = _goldfarb_idnani(Bx, gx, Ax, b, Gx, hx)
    if out is None:
        return None
    px, yx, lam_one = out
    p = px[:n]
    e = px[n:]
    lam_signed = np.zeros(R.shape[0])
    if mg:
        np.add.at(lam_signed, src, side * lam_one[:mg])
    # undo the objective scaling on the multipliers
    return p, penalty * yx, penalty * lam_signed, float(e.max(initial=0.0))


def qp_subproblem(B, g, A_eq=None, b_eq=None, C=None, c_lo=None, c_hi=None,
                  lb=None, ub=None, warm_rows=None, warm_bounds=None,
                  soft_rows=None, soft_bounds=None) -> QpResult:
    """Solve  min 1/2 p'Bp + g'p  s.t.  A_eq p = b_eq,
    c_lo <= C p <= c_hi  and  lb <= p <= ub.

    B must be symmetric positive definite.  Returns the step with equality
    constraints satisfied exactly and inequality rows to <= 1e-8, verified
    against the QP KKT conditions.  Infeasible linearizations are retried
    with an l1 elastic relaxation of the soft rows (all general rows by
    default; bounds only where soft_bounds is set).
    """
    B = np.asarray(B, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    A = _as_2d(A_eq, n)
    b = np.zeros(A.shape[0]) if b_eq is None else np.asarray(b_eq, dtype=float)
    C = _as_2d(C, n)
    mg = C.shape[0]
    c_lo = np.full(mg, -np.inf) if c_lo is None else np.asarray(c_lo, dtype=float)
    c_hi = np.full(mg, np.inf) if c_hi is None else np.asarray(c_hi, dtype=float)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)

    R = np.vstack([C, np.eye(n)]) if mg else np.eye(n)
    lo = np.concatenate([c_lo, lb])
    hi = np.concatenate([c_hi, ub])
    m = R.shape[0]

    active0 = np.zeros(m, dtype=np.int8)
    if warm_rows is not None and warm_rows.size == mg:
        active0[:mg] = warm_rows
    if warm_bounds is not None and warm_bounds.size == n:
        active0[mg:] = warm_bounds

    scale = max(1.0, float(np.abs(g).max(initial=0.0)),
                float(np.abs(B).max(initial=0.0)))
    accept = max(1e-8, 1e-15 * scale)

    out = _pdas(B, g, A, b, R, lo, hi, active0, tol=1e-10)
    used_fallback = False
    if out is not None and out[4] <= accept:
        p, y, lam, active, kkt = out
    else:
        used_fallback = True
        G, h, src, side = _one_sided(R, lo, hi)
        gi = _goldfarb_idnani(B, g, A, b, G, h)
        kkt = np.inf
        if gi is not None:
            p, y, lam_one = gi
            lam = np.zeros(m)
            if G.shape[0]:
                np.add.at(lam, src, side * lam_one)
            p, y, lam, kkt = _polish(B, g, A, b, R, lo, hi, p, y, lam)
            active = _active_from(R, lo, hi, p, lam)

        if kkt > accept:
            soft = np.ones(m, dtype=bool)
            soft[mg:] = False
            if soft_rows is not None:
                soft[:mg] = soft_rows
            if soft_bounds is not None:
                soft[mg:] = soft_bounds
            penalty = 1e6 * scale
            relaxed = _elastic(B, g, A, b, R, lo, hi, soft, penalty)
            if relaxed is None:
                return QpResult(p=np.zeros(n), y_eq=np.zeros(A.shape[0]),
                                lam_rows=np.zeros(mg), mu_bounds=np.zeros(n),
                                active_rows=np.zeros(mg, dtype=np.int8),
                                active_bounds=np.zeros(n, dtype=np.int8),
                                kkt=np.inf, status="infeasible",
                                used_fallback=True)
            p, y, lam, max_slack = relaxed
            active = _active_from(R, lo, hi, p, lam)
            return QpResult(p=p, y_eq=y, lam_rows=lam[:mg],
                            mu_bounds=lam[mg:], active_rows=active[:mg],
                            active_bounds=active[mg:], kkt=0.0,
                            status="optimal", used_fallback=True,
                            max_slack=max_slack)

    return QpResult(p=p, y_eq=y, lam_rows=lam[:mg], mu_bounds=lam[mg:],
                    active_rows=active[:mg], active_bounds=active[mg:],
                    kkt=float(kkt), status="optimal",
                    used_fallback=used_fallback)


# ==================================================================== BFGS ==

def bfgs_update(B, s, y, damping=0.2):
    """Powell-damped BFGS update; preserves symmetric positive definiteness.

    Skips the update entirely when the step is numerically zero.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if float(s @ s) < 1e-16:
        return B
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 0.0:
        return B
    sy = float(s @ y)
    if sy < damping * sBs:
        theta = (1.0 - damping) * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    B_new = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    B_new = 0.5 * (B_new + B_new.T)
    # damping keeps B_new positive definite in exact arithmetic, but repeated
    # damped updates can push the smallest eigenvalue to the round-off floor
    try:
        np.linalg.cholesky(B_new)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(B_new)
        shift = max(0.0, -w.min()) + 1e-10 * max(1.0, w.max())
        B_new = B_new + shift * np.eye(B_new.shape[0])
    return B_new


# ============================================================ KKT residual ==

def _violation(values, lower, upper):
    return np.maximum(values - upper, 0.0) + np.maximum(lower - values, 0.0)


def kkt_residual(nlp, z, eq_mult, ineq_mult, bound_mult) -> KktResidual:
    """Stationarity / primal feasibility / complementarity norms.

    Primal feasibility is unscaled.  Stationarity and complementarity are
    divided by the customary dual scale max(100, mean |multiplier|) / 100,
    so the tolerance remains meaningful when tracking weights push the
    multipliers to 1e4 (an absolute 1e-6 at that multiplier scale would sit
    below the float64 floor of the KKT linear algebra).
    """
    d = nlp.derivatives(np.asarray(z, dtype=float))
    stat = d.grad + eq_mult @ d.J_eq + ineq_mult @ d.J_in + bound_mult
    feas = float(np.abs(d.c_eq).max(initial=0.0))
    feas = max(feas, float(_violation(d.c_in, nlp.ineq_lower,
                                      nlp.ineq_upper).max(initial=0.0)))
    feas = max(feas, float(_violation(np.asarray(z, dtype=float), nlp.z_lower,
                                      nlp.z_upper).max(initial=0.0)))

    comp = 0.0
    for mult, vals, lo, hi in ((ineq_mult, d.c_in, nlp.ineq_lower, nlp.ineq_upper),
                               (bound_mult, np.asarray(z, dtype=float),
                                nlp.z_lower, nlp.z_upper)):
        up = mult > 0.0
        dn = mult < 0.0
        if up.any():
            comp = max(comp, float(np.abs(mult[up] * (hi[up] - vals[up])).max()))
        if dn.any():
            comp = max(comp, float(np.abs(mult[dn] * (vals[dn] - lo[dn])).max()))

    mults = np.concatenate([eq_mult, ineq_mult, bound_mult])
    s_d = max(100.0, float(np.abs(mults).sum()) / max(1, mults.size)) / 100.0
    return KktResidual(stationarity=float(np.abs(stat).max()) / s_d,
                       feasibility=feas, complementarity=comp / s_d)


# ==================================================================== SQP ===

def _merit(cost, c_eq, c_in, z, nlp, penalty):
    viol = float(np.abs(c_eq).sum())
    viol += float(_violation(c_in, nlp.ineq_lower, nlp.ineq_upper).sum())
    viol += float(_violation(z, nlp.z_lower, nlp.z_upper).sum())
    return cost + penalty * viol, viol


def _soc_step(nlp, d, z, p, ceq_full_step):
    """Second-order correction: minimum-norm shift cancelling the equality
    residual left by the full step, clipped into the variable box."""
    if ceq_full_step.size == 0:
        return None
    J = d.J_eq
    try:
        corr = -J.T @ sla.solve(J @ J.T, ceq_full_step, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(corr)):
        return None
    return np.clip(z + p + corr, nlp.z_lower, nlp.z_upper)


def solve(nlp, warm: WarmStart, opts: SolverOptions) -> SolveResult:
    """Run at most max_iterations SQP iterations from the warm start.

    IterationLimit is the normal outcome in online (single-iteration) mode.
    The returned iterate is the best seen by merit value.

    The QP and quasi-Newton matrix operate in equilibrated variables
    (z = S zs with S from nlp.z_scales when provided); everything stored in
    WarmStart/SolveResult, including the BFGS matrix, stays in that scaled
    space, while iterates, multipliers and residuals are reported raw.
    """
    t0 = time.perf_counter()
    S = np.asarray(getattr(nlp, "z_scales", np.ones(nlp.dim)), dtype=float)
    z = np.clip(np.asarray(warm.z, dtype=float), nlp.z_lower, nlp.z_upper)
    nu = warm.eq_mult.copy()
    lam = warm.ineq_mult.copy()
    mu = warm.bound_mult.copy()
    active_rows = warm.active_rows
    active_bounds = warm.active_bounds

    d = nlp.derivatives(z)
    B = warm.bfgs
    if B is None:
        if hasattr(nlp, "gauss_newton_seed"):
            B = S[:, None] * nlp.gauss_newton_seed(z) * S[None, :]
        else:
            B = max(1.0, float(np.linalg.norm(S * d.grad))) * np.eye(nlp.dim)
        floor = 1e-10 * max(1.0, float(B.diagonal().max()))
        B = B + floor * np.eye(nlp.dim)
    else:
        B = B.copy()

    penalty = max(1.0, opts.merit_penalty_factor * float(np.abs(
        np.concatenate([nu, lam, mu])).max(initial=0.0)))
    merit_history: list = []
    status = SolveStatus.ITERATION_LIMIT
    iterations = 0
    qp_fallbacks = 0

    kkt = kkt_residual(nlp, z, nu, lam, mu)
    # candidates carry (cost, violation) so "best by merit" can be decided
    # under the final penalty, which only ratchets upward during the solve
    _, viol_entry = _merit(d.cost, d.c_eq, d.c_in, z, nlp, penalty)
    candidates = [(d.cost, viol_entry, z.copy(), nu.copy(), lam.copy(),
                   mu.copy(), kkt)]

    for _ in range(opts.max_iterations):
        if kkt.max <= opts.kkt_tolerance:
            status = SolveStatus.CONVERGED
            break

        qp = qp_subproblem(
            B, S * d.grad, A_eq=d.J_eq * S[None, :], b_eq=-d.c_eq,
            C=d.J_in * S[None, :],
            c_lo=nlp.ineq_lower - d.c_in, c_hi=nlp.ineq_upper - d.c_in,
            lb=(nlp.z_lower - z) / S, ub=(nlp.z_upper - z) / S,
            warm_rows=active_rows, warm_bounds=active_bounds,
            soft_bounds=getattr(nlp, "z_bound_soft", None))
        if qp.status != "optimal":
            status = SolveStatus.QP_FAILURE
            break
        if qp.used_fallback:
            qp_fallbacks += 1
        p = S * qp.p
        nu_new, lam_new = qp.y_eq, qp.lam_rows
        mu_new = qp.mu_bounds / S
        active_rows, active_bounds = qp.active_rows, qp.active_bounds

        if qp.max_slack <= 1e-6:
            # genuinely relaxed rescues carry penalty-sized multipliers;
            # ratcheting the merit penalty from them would poison the solve
            penalty = max(penalty, opts.merit_penalty_factor * float(np.abs(
                np.concatenate([nu_new, lam_new, mu_new])).max(initial=0.0)))
        phi0, viol0 = _merit(d.cost, d.c_eq, d.c_in, z, nlp, penalty)

        iterations += 1
        if float(np.abs(p).max(initial=0.0)) <= 1e-13 * max(1.0, float(np.abs(z).max())):
            # stationary step: keep z bitwise, refresh multipliers only
            nu, lam, mu = nu_new, lam_new, mu_new
            merit_history.append((phi0, phi0, penalty))
            kkt = kkt_residual(nlp, z, nu, lam, mu)
            candidates.append((d.cost, viol0, z.copy(), nu.copy(), lam.copy(),
                               mu.copy(), kkt))
            if kkt.max <= opts.kkt_tolerance:
                status = SolveStatus.CONVERGED
                break
            continue

        descent = float(d.grad @ p) - penalty * viol0
        alpha = 1.0
        accepted = False
        z_new = None
        kkt_new = None
        for _bt in range(opts.max_backtracks + 1):
            z_try = z + alpha * p
            cost_t, ceq_t, cin_t = nlp.values(z_try)
            phi_t, _ = _merit(cost_t, ceq_t, cin_t, z_try, nlp, penalty)
            # the epsilon term only absorbs float round-off near stationarity
            if phi_t <= phi0 + opts.armijo_c1 * alpha * min(descent, 0.0) \
                    + 1e-14 * abs(phi0):
                accepted = True
                z_new = z_try
                break
            if alpha == 1.0 and viol0 <= 1e-4:
                # second-order correction: remove the O(|p|^2) defect
                # violation that makes the l1 merit reject full steps near
                # the feasible manifold (Maratos effect); extrapolating it
                # from a badly infeasible point would be meaningless
                z_soc = _soc_step(nlp, d, z, p, ceq_t)
                if z_soc is not None:
                    cost_s, ceq_s, cin_s = nlp.values(z_soc)
                    phi_s, _ = _merit(cost_s, ceq_s, cin_s, z_soc, nlp, penalty)
                    if phi_s <= phi0 + opts.armijo_c1 * min(descent, 0.0) \
                            + 1e-14 * abs(phi0):
                        accepted = True
                        z_new = z_soc
                        phi_t = phi_s
                        break
                # tail mode: once the merit cannot resolve progress at float
                # precision, accept a full step iff it reduces the KKT error
                if viol0 <= 1e-6 and \
                        phi_t <= phi0 + 1e-11 * max(1.0, abs(phi0)):
                    kkt_try = kkt_residual(nlp, z_try, nu_new, lam_new, mu_new)
                    if kkt_try.max <= kkt.max:
                        accepted = True
                        z_new = z_try
                        kkt_new = kkt_try
                        break
            alpha *= opts.backtrack_factor
        if not accepted:
            status = SolveStatus.LINE_SEARCH_FAILURE
            break
        merit_history.append((phi0, phi_t, penalty))

        # BFGS on the Lagrangian gradient difference at the new multipliers,
        # in scaled coordinates
        d_new = nlp.derivatives(z_new)
        gl_old = d.grad + nu_new @ d.J_eq + lam_new @ d.J_in
        gl_new = d_new.grad + nu_new @ d_new.J_eq + lam_new @ d_new.J_in
        B = bfgs_update(B, (z_new - z) / S, S * (gl_new - gl_old),
                        opts.bfgs_damping)
        if np.linalg.norm(B, "fro") > opts.bfgs_reset_threshold:
            B = max(1.0, float(np.linalg.norm(S * d_new.grad))) * np.eye(nlp.dim)

        z, d = z_new, d_new
        nu, lam, mu = nu_new, lam_new, mu_new
        kkt = kkt_new if kkt_new is not None \
            else kkt_residual(nlp, z, nu, lam, mu)
        cost_new, ceq_n, cin_n = nlp.values(z)
        viol_new = _merit(cost_new, ceq_n, cin_n, z, nlp, penalty)[1]
        candidates.append((cost_new, viol_new, z.copy(), nu.copy(), lam.copy(),
                           mu.copy(), kkt))
        if kkt.max <= opts.kkt_tolerance:
            status = SolveStatus.CONVERGED
            break

    if status in (SolveStatus.LINE_SEARCH_FAILURE, SolveStatus.QP_FAILURE):
        # fall back to the best recorded iterate by merit at the final penalty
        _, _, z, nu, lam, mu, kkt = min(
            candidates, key=lambda c: c[0] + penalty * c[1])

    return SolveResult(z=z.copy(), eq_mult=nu, ineq_mult=lam, bound_mult=mu,
                       kkt=kkt, iterations=iterations,
                       wall_time=time.perf_counter() - t0, status=status,
                       merit_history=merit_history, bfgs=B,
                       active_rows=active_rows, active_bounds=active_bounds,
                       qp_fallbacks=qp_fallbacks)
