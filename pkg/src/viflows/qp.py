"""Dense convex QP machinery backing the flows.

All subproblems are small and dense: projection of -F(x) onto the tangent
cone or the alpha-restricted tangent set, the multiplier-space dual QP,
and Euclidean projections.  The workhorse is a primal active-set method
with Bland's rule and Schur-complement multiplier recovery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .core import ConstraintSet, Operator, active_sets, DEFAULT_TOL_ACTIVE

DEFAULT_TOL_QP = 1e-10
PHASE1_TOL = 1e-8


class QPError(Exception):
    pass


class Infeasible(QPError):
    """No point satisfies the constraints; carries a Farkas-style certificate."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class Unbounded(QPError):
    """Objective unbounded below over the feasible set."""


class MaxIterations(QPError):
    pass


class NotFeasible(ValueError):
    """Point lies outside the constraint set beyond tolerance."""


@dataclass(frozen=True)
class QPSpec:
    """min 0.5 xi'P xi + q'xi  s.t.  A_ineq xi <= b_ineq, A_eq xi = b_eq."""

    P: np.ndarray
    q: np.ndarray
    A_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None

    def arrays(self):
        P = np.asarray(self.P, dtype=float)
        n = P.shape[0]
        q = np.asarray(self.q, dtype=float).reshape(n)
        A = (np.zeros((0, n)) if self.A_ineq is None
             else np.atleast_2d(np.asarray(self.A_ineq, dtype=float)))
        b = (np.zeros(0) if self.b_ineq is None
             else np.atleast_1d(np.asarray(self.b_ineq, dtype=float)))
        Ae = (np.zeros((0, n)) if self.A_eq is None
              else np.atleast_2d(np.asarray(self.A_eq, dtype=float)))
        be = (np.zeros(0) if self.b_eq is None
              else np.atleast_1d(np.asarray(self.b_eq, dtype=float)))
        return P, q, A, b, Ae, be


@dataclass
class ProjectionResult:
    """Projected velocity with the multipliers of the controller QP."""

    xi: np.ndarray
    u: np.ndarray
    v: np.ndarray
    active_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    iterations: int = 0
    residual: float = 0.0


def _validate_spec(P, tol_pd=1e-10):
    if np.max(np.abs(P - P.T)) > 1e-12 * (1.0 + np.max(np.abs(P))):
        raise ValueError("P must be symmetric")
    try:
        np.linalg.cholesky(P + 0.0)
    except np.linalg.LinAlgError:
        raise ValueError("P must be positive definite")
    if np.linalg.eigvalsh(P)[0] < tol_pd:
        raise ValueError("P is not positive definite within tolerance")


def _phase1(A, b, Ae, be, n):
    """Feasible point for {A x <= b, Ae x = be}; Infeasible if none exists."""
    if Ae.shape[0]:
        x0, *_ = np.linalg.lstsq(Ae, be, rcond=None)
        if np.max(np.abs(Ae @ x0 - be)) > PHASE1_TOL:
            raise Infeasible("equality constraints inconsistent",
                             certificate={"eq_residual": (Ae @ x0 - be).tolist()})
    else:
        x0 = np.zeros(n)
    if A.shape[0] == 0 or np.max(A @ x0 - b) <= 0.0:
        return x0
    # LP in (x, s): min s, A x - s <= b, Ae x = be, s >= 0
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((A.shape[0], 1))])
    A_eq = np.hstack([Ae, np.zeros((Ae.shape[0], 1))]) if Ae.shape[0] else None
    res = linprog(c, A_ub=A_ub, b_ub=b,
                  A_eq=A_eq, b_eq=be if Ae.shape[0] else None,
                  bounds=[(None, None)] * n + [(0, None)],
                  method="highs")
    if res.status != 0 or res.fun > PHASE1_TOL:
        cert = None
        if res.status in (0, 2):
            marg = getattr(res, "ineqlin", None)
            cert = {"phase1_objective": float(res.fun) if res.fun is not None else None,
                    "ineq_multipliers": None if marg is None else list(marg.marginals)}
        raise Infeasible("QP constraints are infeasible", certificate=cert)
    x0 = res.x[:n]
    # Polish: phase-1 solutions can sit a hair outside; nudge inside if needed.
    return x0


def _kkt_step(P, q, x, A_work):
    """Direction p and multipliers for the equality-constrained subproblem."""
    nw = A_work.shape[0]
    g = P @ x + q
    if nw == 0:
        p = np.linalg.solve(P, -g)
        return p, np.zeros(0)
    n = P.shape[1]
    K = np.block([[P, A_work.T], [A_work, np.zeros((nw, nw))]])
    rhs = np.concatenate([-g, np.zeros(nw)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:n], sol[n:]


def _min_norm_multipliers(P, q, x, A, Ae, work, tol):
    """Minimum-norm (u, v) with P x + q + A' u + Ae' v = 0, u supported on work."""
    g = P @ x + q
    rows = [A[i] for i in work] + [Ae[j] for j in range(Ae.shape[0])]
    u = np.zeros(A.shape[0])
    v = np.zeros(Ae.shape[0])
    if not rows:
        return u, v
    work = list(work)
    while True:
        B = np.array([A[i] for i in work] + [Ae[j] for j in range(Ae.shape[0])])
        lam, *_ = np.linalg.lstsq(B.T, -g, rcond=None)
        lam_u = lam[:len(work)]
        bad = [idx for idx, i in enumerate(work) if lam_u[idx] < -10 * tol]
        if not bad or not work:
            break
        # weakly active constraint with negative multiplier: drop and retry
        del work[bad[0]]
        if not work and Ae.shape[0] == 0:
            return u, v
    u[:] = 0.0
    for idx, i in enumerate(work):
        u[i] = max(lam[idx], 0.0)
    v[:] = lam[len(work):]
    return u, v


def solve_qp(spec: QPSpec, warm_start=None, tol_qp: float = DEFAULT_TOL_QP,
             max_iter: int = 500) -> ProjectionResult:
    """Strictly convex dense QP by a primal active-set method.

    ``warm_start`` is an iterable of inequality indices to seed the working
    set; the method converges from any start.
    """
    P, q, A, b, Ae, be = spec.arrays()
    _validate_spec(P)
    n = P.shape[0]

    x = None
    work: list[int] = []
    if warm_start is not None:
        ws = [int(i) for i in warm_start if 0 <= int(i) < A.shape[0]]
        A_work = np.vstack([A[ws], Ae]) if (ws or Ae.shape[0]) else np.zeros((0, n))
        b_work = np.concatenate([b[ws], be]) if (ws or Ae.shape[0]) else np.zeros(0)
        if A_work.shape[0]:
            # candidate: minimizer with warm constraints active
            K = np.block([[P, A_work.T],
                          [A_work, np.zeros((A_work.shape[0],) * 2)]])
            rhs = np.concatenate([-q, b_work])
            try:
                sol = np.linalg.solve(K, rhs)
                cand = sol[:n]
            except np.linalg.LinAlgError:
                cand = None
            if cand is not None and (A.shape[0] == 0
                                     or np.max(A @ cand - b) <= 1e-12):
                x = cand
                work = sorted(ws)
        else:
            cand = np.linalg.solve(P, -q)
            if A.shape[0] == 0 or np.max(A @ cand - b) <= 1e-12:
                x = cand
    if x is None:
        x = _phase1(A, b, Ae, be, n)
        work = sorted(np.flatnonzero(A @ x - b >= -1e-12).tolist()) \
            if A.shape[0] else []

    iterations = 0
    for iterations in range(1, max_iter + 1):
        A_work = np.vstack([A[work], Ae]) if (work or Ae.shape[0]) \
            else np.zeros((0, n))
        p, lam = _kkt_step(P, q, x, A_work)
        if np.max(np.abs(p), initial=0.0) <= tol_qp:
            lam_ineq = lam[:len(work)]
            neg = [idx for idx, l in enumerate(lam_ineq) if l < -tol_qp]
            if not neg:
                break
            # Bland: drop the smallest-index violating constraint
            drop = min(neg, key=lambda idx: work[idx])
            del work[drop]
            continue
        alpha = 1.0
        blocker = None
        if A.shape[0]:
            Ap = A @ p
            slack = b - A @ x
            for i in range(A.shape[0]):
                if i in work or Ap[i] <= 1e-14:
                    continue
                step = max(slack[i], 0.0) / Ap[i]
                if step < alpha:
                    alpha = step
                    blocker = i
        x = x + alpha * p
        if blocker is not None:
            work = sorted(work + [blocker])
    else:
        raise MaxIterations(f"active-set QP did not converge in {max_iter} steps")

    u, v = _min_norm_multipliers(P, q, x, A, Ae, work, tol_qp)
    stat = P @ x + q
    if A.shape[0]:
        stat = stat + A.T @ u
    if Ae.shape[0]:
        stat = stat + Ae.T @ v
    res_parts = [float(np.max(np.abs(stat)))]
    if A.shape[0]:
        slack = A @ x - b
        res_parts.append(float(np.max(np.maximum(slack, 0.0))))
        res_parts.append(float(np.max(np.abs(u * slack))))
    if Ae.shape[0]:
        res_parts.append(float(np.max(np.abs(Ae @ x - be))))
    return ProjectionResult(
        xi=x, u=u, v=v,
        active_set=np.array(sorted(work), dtype=int),
        iterations=iterations,
        residual=max(res_parts),
    )


# -- Euclidean projection --------------------------------------------


def euclidean_projection(C: ConstraintSet, y: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection of y onto a polyhedral set C."""
    y = np.asarray(y, dtype=float)
    if C.is_box:
        lower, upper, _, _ = C.box_bounds()
        return np.clip(y, lower, upper)
    if not C.polyhedral:
        raise ValueError("exact Euclidean projection requires a polyhedral set")
    spec = QPSpec(P=np.eye(C.n), q=-y, A_ineq=C.G, b_ineq=C.c_g,
                  A_eq=C.H if C.k else None, b_eq=C.c_h if C.k else None)
    return solve_qp(spec).xi


def euclidean_projector(C: ConstraintSet):
    if C.m == 0 and C.k == 0:
        return lambda y: np.asarray(y, dtype=float)
    return lambda y: euclidean_projection(C, y)


# -- tangent-cone and restricted-tangent projections ------------------


def project_tangent_cone(F: Operator, C: ConstraintSet, x,
                         tol_active: float = DEFAULT_TOL_ACTIVE,
                         warm_start=None) -> ProjectionResult:
    """Project -F(x) onto the tangent cone of C at a feasible x."""
    x = np.asarray(x, dtype=float)
    if not C.contains(x, tol=tol_active):
        raise NotFeasible("tangent cone undefined outside the constraint set")
    Fx = F(x)
    if C.is_box:
        lower, upper, row_up, row_lo = C.box_bounds()
        gx = C.g(x)
        lo = np.where((row_lo >= 0) & (np.abs(np.take(gx, row_lo, mode="clip"))
                                       <= tol_active), 0.0, -np.inf)
        hi = np.where((row_up >= 0) & (np.abs(np.take(gx, row_up, mode="clip"))
                                       <= tol_active), 0.0, np.inf)
        return _box_clamp_result(C, Fx, lo, hi)
    act = active_sets(C, x, tol_active)
    Jg = C.g_jacobian(x)
    A = Jg[act.I0] if act.I0.size else None
    spec = QPSpec(P=np.eye(C.n), q=Fx,
                  A_ineq=A, b_ineq=np.zeros(act.I0.size) if act.I0.size else None,
                  A_eq=C.H if C.k else None,
                  b_eq=np.zeros(C.k) if C.k else None)
    r = solve_qp(spec, warm_start=warm_start)
    u = np.zeros(C.m)
    u[act.I0] = r.u
    return ProjectionResult(xi=r.xi, u=u, v=r.v,
                            active_set=act.I0[r.active_set] if act.I0.size
                            else r.active_set,
                            iterations=r.iterations, residual=r.residual)


def _box_clamp_result(C: ConstraintSet, Fx, lo, hi) -> ProjectionResult:
    if np.any(lo > hi + 1e-14):
        raise Infeasible("restricted tangent set is empty at this point")
    _, _, row_up, row_lo = C.box_bounds()
    xi = np.clip(-Fx, lo, np.maximum(lo, hi))
    resid = -Fx - xi
    u = np.zeros(C.m)
    upper_binding = resid > 0
    lower_binding = resid < 0
    for j in np.flatnonzero(upper_binding):
        u[row_up[j]] = resid[j]
    for j in np.flatnonzero(lower_binding):
        u[row_lo[j]] = -resid[j]
    active = np.flatnonzero(u > 0)
    return ProjectionResult(xi=xi, u=u, v=np.zeros(0), active_set=active)


def restricted_tangent_box_bounds(C: ConstraintSet, x, alpha):
    """Per-coordinate bounds of the alpha-restricted tangent set of a box."""
    lower, upper, row_up, row_lo = C.box_bounds()
    x = np.asarray(x, dtype=float)
    lo = np.where(row_lo >= 0, alpha * (lower - x), -np.inf)
    hi = np.where(row_up >= 0, alpha * (upper - x), np.inf)
    return lo, hi


def project_restricted_tangent(F: Operator, C: ConstraintSet, x, alpha: float,
                               warm_start=None) -> ProjectionResult:
    """Project -F(x) onto the alpha-restricted tangent set of C at x.

    Well defined on an open neighborhood of C even for infeasible x;
    raises Infeasible when the restricted tangent set is empty there.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    Fx = F(x)
    if C.is_box:
        lo, hi = restricted_tangent_box_bounds(C, x, alpha)
        return _box_clamp_result(C, Fx, lo, hi)
    gx = C.g(x)
    hx = C.h(x)
    spec = QPSpec(P=np.eye(C.n), q=Fx,
                  A_ineq=C.g_jacobian(x) if C.m else None,
                  b_ineq=-alpha * gx if C.m else None,
                  A_eq=C.H if C.k else None,
                  b_eq=-alpha * hx if C.k else None)
    return solve_qp(spec, warm_start=warm_start)


# -- multiplier-space dual QP -----------------------------------------


def _solve_bound_psd_qp(Qt, c, n_bounded, tol=DEFAULT_TOL_QP, max_iter=1000):
    """min 0.5 z'Qt z + c'z over z with z[:n_bounded] >= 0; Qt PSD.

    Active-set with minimum-norm subproblem solves; raises Unbounded when
    the objective decreases without bound along a feasible direction.
    """
    N = Qt.shape[0]
    z = np.zeros(N)
    at_bound = set(range(n_bounded))
    for _ in range(max_iter):
        free = [i for i in range(N) if i not in at_bound]
        if not free:
            w = Qt @ z + c
            neg = [i for i in sorted(at_bound) if w[i] < -tol]
            if not neg:
                return z
            at_bound.remove(neg[0])
            continue
        Qff = Qt[np.ix_(free, free)]
        cf = c[free]
        zf_star, *_ = np.linalg.lstsq(Qff, -cf, rcond=None)
        r = -cf - Qff @ zf_star
        if np.max(np.abs(r), initial=0.0) > 1e-9 * (1.0 + np.max(np.abs(cf),
                                                                 initial=0.0)):
            # r lies in null(Qff) and is a strict descent direction
            steps = [(-z[i] / r[idx], i) for idx, i in enumerate(free)
                     if i < n_bounded and r[idx] < -1e-14]
            if not steps:
                raise Unbounded("multiplier QP unbounded below")
            alpha, blocker = min(steps)
            for idx, i in enumerate(free):
                z[i] += alpha * r[idx]
            z[blocker] = 0.0
            at_bound.add(blocker)
            continue
        p = zf_star - z[free]
        if np.max(np.abs(p), initial=0.0) <= tol:
            w = Qt @ z + c
            neg = [i for i in sorted(at_bound) if w[i] < -tol]
            if not neg:
                return z
            at_bound.remove(neg[0])
            continue
        alpha, blocker = 1.0, None
        for idx, i in enumerate(free):
            if i < n_bounded and p[idx] < -1e-14:
                step = z[i] / (-p[idx])
                if step < alpha:
                    alpha, blocker = step, i
        for idx, i in enumerate(free):
            z[i] += alpha * p[idx]
        if blocker is not None:
            z[blocker] = 0.0
            at_bound.add(blocker)
    raise MaxIterations("bound-constrained QP did not converge")


def solve_dual_qp(F: Operator, C: ConstraintSet, x, alpha: float):
    """Multipliers of the safe feedback via the dual quadratic program.

    Minimizes 0.5||sum u_i grad g_i + sum v_j grad h_j||^2
    + u'(Jg F - alpha g) + v'(H F - alpha h) over u >= 0.
    The reconstruction -F(x) - Jg'u - H'v equals the projected velocity.
    """
    x = np.asarray(x, dtype=float)
    Fx = F(x)
    Jg = C.g_jacobian(x)
    M = np.vstack([Jg, C.H]) if C.k else Jg
    phi = np.concatenate([C.g(x), C.h(x)])
    Qt = M @ M.T
    c = M @ Fx - alpha * phi
    z = _solve_bound_psd_qp(Qt, c, n_bounded=C.m)
    u, v = z[:C.m], z[C.m:]
    xi = -Fx - M.T @ z
    return u, v, xi


def qp_lp_consistency(Qt, c, u, v, tol: float = 1e-7):
    """Check the QP solution also solves the reduced linear program.

    The reduced cost Qt z + c must be nonnegative on u (with complementary
    slackness) and zero on v.  Returns (ok, violating_index or None).
    """
    z = np.concatenate([np.atleast_1d(u), np.atleast_1d(v)])
    r = np.asarray(Qt) @ z + np.asarray(c)
    m = np.atleast_1d(u).size
    scale = 1.0 + float(np.max(np.abs(r), initial=0.0))
    for i in range(m):
        if r[i] < -tol * scale or abs(r[i] * z[i]) > tol * scale * (1 + abs(z[i])):
            return False, i
    for j in range(m, z.size):
        if abs(r[j]) > tol * scale:
            return False, j
    return True, None


# -- control-based route (safeguarding controller QP) -----------------


def solve_control_qp(F: Operator, C: ConstraintSet, x, alpha: Optional[float]
                     = None, tol_active: float = DEFAULT_TOL_ACTIVE,
                     reg: float = 1e-10) -> ProjectionResult:
    """Safeguarding feedback by direct solution of the controller QP.

    With ``alpha=None`` this is the projection-safeguarding controller
    (inputs keeping the closed loop in the tangent cone, feasible x only);
    otherwise the barrier-function controller with safety parameter alpha.
    The Gram matrix of constraint gradients can be singular, so a tiny
    ridge ``reg`` makes the program strictly convex; it perturbs the
    closed-loop field far below solver tolerance.
    """
    x = np.asarray(x, dtype=float)
    Fx = F(x)
    Jg = C.g_jacobian(x)
    M = np.vstack([Jg, C.H]) if C.k else Jg
    N = C.m + C.k
    Qt = M @ M.T
    P = Qt + reg * np.eye(N)
    rows = []
    rhs = []
    if alpha is None:
        if not C.contains(x, tol=tol_active):
            raise NotFeasible("projection controller undefined outside C")
        act = active_sets(C, x, tol_active)
        for i in act.I0:
            rows.append(-(Jg[i] @ M.T))
            rhs.append(float(Jg[i] @ Fx))
        b_eq = -C.H @ Fx if C.k else None
    else:
        gx = C.g(x)
        for i in range(C.m):
            rows.append(-(Jg[i] @ M.T))
            rhs.append(float(Jg[i] @ Fx) - alpha * gx[i])
        b_eq = -C.H @ Fx + alpha * C.h(x) if C.k else None
    # sign constraints u >= 0
    for i in range(C.m):
        e = np.zeros(N)
        e[i] = -1.0
        rows.append(e)
        rhs.append(0.0)
    A_eq = C.H @ M.T if C.k else None
    spec = QPSpec(P=P, q=np.zeros(N),
                  A_ineq=np.array(rows) if rows else None,
                  b_ineq=np.array(rhs) if rows else None,
                  A_eq=A_eq, b_eq=b_eq)
    r = solve_qp(spec)
    w = r.xi
    u, v = w[:C.m], w[C.m:]
    xi = -Fx - M.T @ w
    return ProjectionResult(xi=xi, u=u, v=v, active_set=r.active_set,
                            iterations=r.iterations, residual=r.residual)
