"""Fixed-step integrators for the three monotone flows.

* projected flow: velocity is -F(x) projected onto the tangent cone,
  integrated by projected Euler (the field is discontinuous);
* safe flow: velocity is -F(x) projected onto the alpha-restricted
  tangent set, integrated by classical RK4 (locally Lipschitz field);
* recursive safe flow: the multipliers become fast states of their own,
  giving a closed-form field integrated by RK4 with a stiffness guard.

Affine operators on box sets get a fused fast path that avoids the QP
entirely (the projections reduce to coordinate clamps); several initial
conditions can be integrated in one batched loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ConstraintSet, Operator, DEFAULT_TOL_ACTIVE
from . import qp
from .qp import NotFeasible, ProjectionResult


class OutsideDomain(RuntimeError):
    """The safe flow's QP became infeasible: x left the flow's domain."""


class StiffnessWarning(UserWarning):
    """Step-to-step change too large; the step size is likely too coarse."""


@dataclass
class FlowParams:
    """Integration parameters shared by all three flows."""

    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.25
    h: float = 1e-3
    t_final: float = 15.0
    tol_converge: float = 1e-8
    tol_active: float = DEFAULT_TOL_ACTIVE
    converge_window: int = 10

    def __post_init__(self):
        for name in ("alpha", "beta", "tau", "h", "t_final", "tol_converge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class FlowState:
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float)) \
            if self.u is not None else np.zeros(0)
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float)) \
            if self.v is not None else np.zeros(0)


@dataclass
class Trajectory:
    """Time-ordered states on a uniform grid with per-step diagnostics."""

    flow: str
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    field_norm: np.ndarray
    gmax: np.ndarray
    hmax: np.ndarray
    qp_iterations: np.ndarray
    converged: bool
    aborted: bool = False
    params: Optional[FlowParams] = None

    def __len__(self):
        return self.t.size

    def state(self, i: int) -> FlowState:
        return FlowState(x=self.x[i], u=self.u[i], v=self.v[i],
                         t=float(self.t[i]))

    @property
    def final_x(self) -> np.ndarray:
        return self.x[-1]

    def to_csv(self, path, V=None, W=None, Veps=None) -> None:
        """Write `t,x_*,u_*,v_*,gmax,hmax,field_norm,V,W,Veps` rows.

        Lyapunov columns are NaN unless supplied (they need the solution
        point; see the analysis module).
        """
        T = self.t.size
        nan = np.full(T, np.nan)
        V = nan if V is None else np.asarray(V, dtype=float)
        W = nan if W is None else np.asarray(W, dtype=float)
        Veps = nan if Veps is None else np.asarray(Veps, dtype=float)
        cols = [self.t.reshape(T, 1), self.x, self.u, self.v,
                self.gmax.reshape(T, 1), self.hmax.reshape(T, 1),
                self.field_norm.reshape(T, 1),
                V.reshape(T, 1), W.reshape(T, 1), Veps.reshape(T, 1)]
        data = np.hstack(cols)
        names = (["t"]
                 + [f"x_{j + 1}" for j in range(self.x.shape[1])]
                 + [f"u_{j + 1}" for j in range(self.u.shape[1])]
                 + [f"v_{j + 1}" for j in range(self.v.shape[1])]
                 + ["gmax", "hmax", "field_norm", "V", "W", "Veps"])
        np.savetxt(path, data, fmt="%.17g", delimiter=",",
                   header=",".join(names), comments="")


# -- field evaluations -------------------------------------------------


def pmf_field(F: Operator, C: ConstraintSet, x,
              tol_active: float = DEFAULT_TOL_ACTIVE) -> np.ndarray:
    """Velocity of the projected flow: -F(x) onto the tangent cone."""
    return qp.project_tangent_cone(F, C, x, tol_active=tol_active).xi


def smf_field(F: Operator, C: ConstraintSet, x, alpha: float
              ) -> ProjectionResult:
    """Velocity and multipliers of the safe flow at x."""
    try:
        return qp.project_restricted_tangent(F, C, x, alpha)
    except qp.Infeasible as exc:
        raise OutsideDomain(str(exc)) from exc


def rsmf_field(F: Operator, C: ConstraintSet, state: FlowState,
               alpha: float, beta: float, tau: float):
    """Closed-form coupled field of the recursive safe flow."""
    x, u, v = state.x, state.u, state.v
    if u.shape != (C.m,) or v.shape != (C.k,):
        from .core import DimensionMismatch
        raise DimensionMismatch("multiplier dimensions inconsistent with C")
    Fx = F(x)
    Jg = C.g_jacobian(x)
    dx = -Fx
    if C.m:
        dx = dx - Jg.T @ u
    if C.k:
        dx = dx - C.H.T @ v
    du = (np.maximum(-beta * u, Jg @ dx + alpha * C.g(x)) / tau
          if C.m else np.zeros(0))
    dv = ((C.H @ dx + alpha * C.h(x)) / tau if C.k else np.zeros(0))
    return dx, du, dv


# -- shared plumbing ---------------------------------------------------


def _convergence_cut(field_norm, tol, window):
    """First index ending a run of `window` sub-tolerance steps, or None."""
    run = 0
    for i, fn in enumerate(field_norm):
        run = run + 1 if fn <= tol else 0
        if run >= window:
            return i
    return None


def _batch_diagnostics(C: ConstraintSet, X):
    """(gmax, hmax) along a stack of states, vectorized when polyhedral."""
    T = X.shape[0]
    if C.polyhedral:
        gmax = (np.max(X @ C.G.T - C.c_g, axis=1) if C.m
                else np.zeros(T))
    else:
        gmax = np.array([float(np.max(C.g(X[i]))) if C.m else 0.0
                         for i in range(T)])
    hmax = (np.max(np.abs(X @ C.H.T - C.c_h), axis=1) if C.k
            else np.zeros(T))
    return gmax, hmax


def _fast_path(F: Operator, C: ConstraintSet):
    return C.is_box and F.linear is not None


def restricted_multipliers_batch(F: Operator, C: ConstraintSet, X,
                                 alpha: float):
    """(xi, u, v) of the restricted-tangent projection at each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = X.shape[0]
    if _fast_path(F, C):
        Q, r = F.linear
        lower, upper, row_up, row_lo = C.box_bounds()
        FX = X @ Q.T + r
        xi = np.clip(-FX, alpha * (lower - X), alpha * (upper - X))
        resid = -FX - xi
        U = np.zeros((T, C.m))
        for j in range(C.n):
            if row_up[j] >= 0:
                U[:, row_up[j]] = np.maximum(resid[:, j], 0.0)
            if row_lo[j] >= 0:
                U[:, row_lo[j]] = np.maximum(-resid[:, j], 0.0)
        return xi, U, np.zeros((T, C.k))
    xi = np.zeros((T, C.n))
    U = np.zeros((T, C.m))
    V = np.zeros((T, C.k))
    warm = None
    for i in range(T):
        res = qp.project_restricted_tangent(F, C, X[i], alpha,
                                            warm_start=warm)
        xi[i], U[i], V[i] = res.xi, res.u, res.v
        warm = res.active_set
    return xi, U, V


def _tangent_multipliers_batch(F: Operator, C: ConstraintSet, X, tol_active):
    """Fast-path analogue for the tangent-cone projection (box sets)."""
    Q, r = F.linear
    lower, upper, _, row_lo = C.box_bounds()
    row_up = C.box_bounds()[2]
    T = X.shape[0]
    FX = X @ Q.T + r
    lo = np.where(X - lower <= tol_active, 0.0, -np.inf)
    hi = np.where(upper - X <= tol_active, 0.0, np.inf)
    xi = np.clip(-FX, lo, hi)
    resid = -FX - xi
    U = np.zeros((T, C.m))
    for j in range(C.n):
        if row_up[j] >= 0:
            U[:, row_up[j]] = np.maximum(resid[:, j], 0.0)
        if row_lo[j] >= 0:
            U[:, row_lo[j]] = np.maximum(-resid[:, j], 0.0)
    return xi, U


def _make_trajectory(flow, C, params, t0, h, X, FN, U=None, V=None,
                     iters=None, converged=False, aborted=False):
    T = X.shape[0]
    gmax, hmax = _batch_diagnostics(C, X)
    return Trajectory(
        flow=flow,
        t=t0 + h * np.arange(T),
        x=X,
        u=U if U is not None else np.zeros((T, C.m)),
        v=V if V is not None else np.zeros((T, C.k)),
        field_norm=FN,
        gmax=gmax,
        hmax=hmax,
        qp_iterations=iters if iters is not None
        else np.zeros(T, dtype=int),
        converged=converged,
        aborted=aborted,
        params=params,
    )


def _finish_batch(flow, F, C, params, t0, X_hist, FN_hist,
                  U_hist=None, V_hist=None, aborted=None):
    """Cut each batch member at convergence and package trajectories."""
    b = X_hist.shape[1]
    out = []
    for j in range(b):
        fn = FN_hist[:, j]
        cut = _convergence_cut(fn, params.tol_converge,
                               params.converge_window)
        end = cut + 1 if cut is not None else fn.size
        X = X_hist[:end, j].copy()
        if flow == "smf":
            _, U, V = restricted_multipliers_batch(F, C, X, params.alpha)
        elif flow == "pmf" and _fast_path(F, C):
            _, U = _tangent_multipliers_batch(F, C, X, params.tol_active)
            V = np.zeros((end, C.k))
        elif U_hist is not None:
            U = U_hist[:end, j].copy()
            V = V_hist[:end, j].copy() if V_hist is not None \
                else np.zeros((end, C.k))
        else:
            U = np.zeros((end, C.m))
            V = np.zeros((end, C.k))
        out.append(_make_trajectory(
            flow, C, params, t0, params.h, X, fn[:end].copy(), U, V,
            converged=cut is not None,
            aborted=bool(aborted[j]) if aborted is not None else False))
    return out


# -- projected flow ----------------------------------------------------


def integrate_pmf(F: Operator, C: ConstraintSet, x0,
                  params: Optional[FlowParams] = None) -> Trajectory:
    """Projected Euler on the projected flow from a feasible start."""
    params = params or FlowParams()
    return integrate_batch("pmf", F, C, [x0], params)[0]


def _integrate_pmf_batch(F, C, X0, params):
    h, steps = params.h, int(round(params.t_final / params.h))
    b, n = X0.shape
    tol = params.tol_active
    X_hist = np.empty((steps + 1, b, n))
    FN = np.empty((steps + 1, b))
    X = X0.copy()
    if _fast_path(F, C):
        Q, r = F.linear
        lower, upper, _, _ = C.box_bounds()
        for k in range(steps + 1):
            FX = X @ Q.T + r
            lo = np.where(X - lower <= tol, 0.0, -np.inf)
            hi = np.where(upper - X <= tol, 0.0, np.inf)
            xi = np.clip(-FX, lo, hi)
            X_hist[k] = X
            FN[k] = np.sqrt(np.sum(xi * xi, axis=1))
            X = np.clip(X + h * xi, lower, upper)
        return _finish_batch("pmf", F, C, params, 0.0, X_hist, FN)
    proj = qp.euclidean_projector(C)
    U_hist = np.empty((steps + 1, b, C.m))
    V_hist = np.empty((steps + 1, b, C.k))
    iters = np.zeros((steps + 1, b), dtype=int)
    warm = [None] * b
    for k in range(steps + 1):
        for j in range(b):
            res = qp.project_tangent_cone(F, C, X[j], tol_active=tol,
                                          warm_start=warm[j])
            warm[j] = res.active_set
            X_hist[k, j] = X[j]
            FN[k, j] = float(np.linalg.norm(res.xi))
            U_hist[k, j], V_hist[k, j] = res.u, res.v
            iters[k, j] = res.iterations
            X[j] = proj(X[j] + h * res.xi)
    trajs = _finish_batch("pmf", F, C, params, 0.0, X_hist, FN,
                          U_hist, V_hist)
    for j, tr in enumerate(trajs):
        tr.qp_iterations = iters[:len(tr), j].copy()
    return trajs


# -- safe flow ---------------------------------------------------------


def integrate_smf(F: Operator, C: ConstraintSet, x0,
                  params: Optional[FlowParams] = None) -> Trajectory:
    """Classical RK4 on the safe flow; x0 may be infeasible (domain X)."""
    params = params or FlowParams()
    return integrate_batch("smf", F, C, [x0], params)[0]


def _integrate_smf_batch(F, C, X0, params):
    h, steps = params.h, int(round(params.t_final / params.h))
    alpha = params.alpha
    b, n = X0.shape
    X_hist = np.empty((steps + 1, b, n))
    FN = np.empty((steps + 1, b))
    X = X0.copy()
    if _fast_path(F, C):
        Q, r = F.linear
        lower, upper, _, _ = C.box_bounds()

        def f(Z):
            return np.clip(-(Z @ Q.T + r),
                           alpha * (lower - Z), alpha * (upper - Z))

        h2, h6 = 0.5 * h, h / 6.0
        for k in range(steps + 1):
            k1 = f(X)
            X_hist[k] = X
            FN[k] = np.sqrt(np.sum(k1 * k1, axis=1))
            if k == steps:
                break
            k2 = f(X + h2 * k1)
            k3 = f(X + h2 * k2)
            k4 = f(X + h * k3)
            X = X + h6 * (k1 + 2.0 * (k2 + k3) + k4)
        return _finish_batch("smf", F, C, params, 0.0, X_hist, FN)
    # general path: one QP per stage, warm-started
    aborted = np.zeros(b, dtype=bool)
    ends = np.full(b, steps + 1, dtype=int)
    U_hist = np.zeros((steps + 1, b, C.m))
    V_hist = np.zeros((steps + 1, b, C.k))
    iters = np.zeros((steps + 1, b), dtype=int)
    trajs = []
    for j in range(b):
        x = X0[j].copy()
        warm = None
        for k in range(steps + 1):
            try:
                res = qp.project_restricted_tangent(F, C, x, alpha,
                                                    warm_start=warm)
                warm = res.active_set
                X_hist[k, j] = x
                FN[k, j] = float(np.linalg.norm(res.xi))
                U_hist[k, j], V_hist[k, j] = res.u, res.v
                iters[k, j] = res.iterations
                if k == steps:
                    break
                k1 = res.xi
                k2 = qp.project_restricted_tangent(
                    F, C, x + 0.5 * h * k1, alpha, warm_start=warm).xi
                k3 = qp.project_restricted_tangent(
                    F, C, x + 0.5 * h * k2, alpha, warm_start=warm).xi
                k4 = qp.project_restricted_tangent(
                    F, C, x + h * k3, alpha, warm_start=warm).xi
                x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            except qp.Infeasible:
                aborted[j] = True
                ends[j] = k
                break
    for j in range(b):
        end = ends[j]
        fn = FN[:end, j]
        cut = _convergence_cut(fn, params.tol_converge,
                               params.converge_window)
        stop = cut + 1 if cut is not None else end
        tr = _make_trajectory(
            "smf", C, params, 0.0, h,
            X_hist[:stop, j].copy(), fn[:stop].copy(),
            U_hist[:stop, j].copy(), V_hist[:stop, j].copy(),
            iters=iters[:stop, j].copy(),
            converged=cut is not None, aborted=bool(aborted[j]))
        trajs.append(tr)
    return trajs


# -- recursive safe flow -----------------------------------------------


def integrate_rsmf(F: Operator, C: ConstraintSet, state0: FlowState,
                   params: Optional[FlowParams] = None) -> Trajectory:
    """RK4 on the coupled (x, u, v) system; requires h <= tau/10."""
    params = params or FlowParams()
    return integrate_batch("rsmf", F, C, [state0.x], params,
                           U0=[state0.u], V0=[state0.v])[0]


def _integrate_rsmf_batch(F, C, X0, U0, V0, params):
    if params.h > params.tau / 10.0 + 1e-15:
        raise ValueError("recursive flow requires h <= tau/10")
    if np.min(U0, initial=0.0) < 0:
        raise ValueError("u(0) must be nonnegative")
    if not C.polyhedral:
        raise ValueError("recursive flow requires a polyhedral set")
    h, steps = params.h, int(round(params.t_final / params.h))
    alpha, beta, tau = params.alpha, params.beta, params.tau
    b, n = X0.shape
    G, cg = (C.G, C.c_g) if C.m else (np.zeros((0, n)), np.zeros(0))
    H, ch = C.H, C.c_h
    if F.linear is not None:
        Q, r = F.linear
        FX = lambda Z: Z @ Q.T + r
    else:
        FX = lambda Z: np.array([F(z) for z in Z])

    def f(X, U, V):
        DX = -FX(X)
        if C.m:
            DX = DX - U @ G
        if C.k:
            DX = DX - V @ H
        DU = (np.maximum(-beta * U, DX @ G.T + alpha * (X @ G.T - cg)) / tau
              if C.m else U)
        DV = ((DX @ H.T + alpha * (X @ H.T - ch)) / tau if C.k else V)
        return DX, DU, DV

    X, U, V = X0.copy(), U0.copy(), V0.copy()
    X_hist = np.empty((steps + 1, b, n))
    U_hist = np.empty((steps + 1, b, C.m))
    V_hist = np.empty((steps + 1, b, C.k))
    FN = np.empty((steps + 1, b))
    h2, h6 = 0.5 * h, h / 6.0
    warned = False
    for k in range(steps + 1):
        dX, dU, dV = f(X, U, V)
        X_hist[k], U_hist[k], V_hist[k] = X, U, V
        FN[k] = np.sqrt(np.sum(dX * dX, axis=1)
                        + (np.sum(dU * dU, axis=1) if C.m else 0.0)
                        + (np.sum(dV * dV, axis=1) if C.k else 0.0))
        if k == steps:
            break
        aX, aU, aV = f(X + h2 * dX, U + h2 * dU, V + h2 * dV)
        bX, bU, bV = f(X + h2 * aX, U + h2 * aU, V + h2 * aV)
        cX, cU, cV = f(X + h * bX, U + h * bU, V + h * bV)
        X = X + h6 * (dX + 2.0 * (aX + bX) + cX)
        U = U + h6 * (dU + 2.0 * (aU + bU) + cU)
        V = V + h6 * (dV + 2.0 * (aV + bV) + cV)
        if not warned:
            scale = 1.0 + np.sqrt(np.sum(X * X, axis=1))
            move = h * FN[k]
            if np.any(move > 0.5 * scale):
                warnings.warn("large relative step; reduce h",
                              StiffnessWarning)
                warned = True
    return _finish_batch("rsmf", F, C, params, 0.0, X_hist, FN,
                         U_hist, V_hist)


# -- entry point -------------------------------------------------------


def integrate_batch(flow: str, F: Operator, C: ConstraintSet, X0,
                    params: Optional[FlowParams] = None,
                    U0=None, V0=None) -> list[Trajectory]:
    """Integrate one flow from several initial conditions on a shared grid.

    Affine-on-box problems run in a single vectorized loop; other
    problems fall back to per-trajectory QP-based stepping.
    """
    params = params or FlowParams()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != C.n:
        from .core import DimensionMismatch
        raise DimensionMismatch("initial conditions must lie in R^n")
    if flow == "pmf":
        for x in X0:
            if not C.contains(x, tol=params.tol_active):
                raise NotFeasible(
                    "projected flow requires a feasible initial condition")
        return _integrate_pmf_batch(F, C, X0, params)
    if flow == "smf":
        return _integrate_smf_batch(F, C, X0, params)
    if flow == "rsmf":
        b = X0.shape[0]
        U0 = (np.zeros((b, C.m)) if U0 is None
              else np.atleast_2d(np.asarray(U0, dtype=float)))
        V0 = (np.zeros((b, C.k)) if V0 is None
              else np.atleast_2d(np.asarray(V0, dtype=float)))
        return _integrate_rsmf_batch(F, C, X0, U0, V0, params)
    raise ValueError(f"unknown flow {flow!r}")


def tracking_error(F: Operator, C: ConstraintSet, traj: Trajectory,
                   alpha: Optional[float] = None) -> np.ndarray:
    """Per-step ||(u, v) - kappa(x)|| against the exact QP feedback."""
    alpha = alpha if alpha is not None else traj.params.alpha
    _, U, V = restricted_multipliers_batch(F, C, traj.x, alpha)
    d = np.hstack([traj.u - U, traj.v - V])
    return np.sqrt(np.sum(d * d, axis=1))
