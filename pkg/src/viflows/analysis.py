"""Numerical certificates along flow trajectories.

Evaluates the Lyapunov-type functions attached to the safe flow, checks
their decrease conditions by forward differences with an explicit
discretization slack, estimates contraction rates from trajectory
pairs, and computes the closed-form rate/threshold quantities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ConstraintSet, Operator
from .flows import Trajectory, restricted_multipliers_batch, tracking_error

DEFAULT_SLACK_FACTOR = 10.0


class DegenerateWindow(Exception):
    """Trajectory pair coincides from the start; no slope to estimate."""


# -- closed-form rates -------------------------------------------------


@dataclass
class RateEstimates:
    """Rate and threshold quantities from the problem constants.

    ``c_bar`` and ``beta_bound`` are None when the constraint Gram
    matrix is singular (the inner-contraction bound is then inapplicable).
    """

    c_smf: float
    alpha_bound: float
    c_bar: Optional[float]
    beta_bound: Optional[float]
    issf_gain_slope: Optional[float]

    @property
    def contraction_guaranteed(self) -> bool:
        return self.c_smf > 0.0


def rate_formulas(mu, lF, alpha, Qtilde=None, beta=None) -> RateEstimates:
    """Contraction rate, alpha threshold, and multiplier-dynamics rates."""
    if mu <= 0 or lF <= 0 or alpha <= 0:
        raise ValueError("mu, lF, alpha must be positive")
    c_smf = mu - lF ** 2 / (4.0 * alpha)
    alpha_bound = lF ** 2 / (4.0 * mu)
    c_bar = beta_bound = issf_gain_slope = None
    if Qtilde is not None:
        Qtilde = np.asarray(Qtilde, dtype=float)
        eigs = np.linalg.eigvalsh(0.5 * (Qtilde + Qtilde.T))
        lmin, lmax = float(eigs[0]), float(eigs[-1])
        issf_gain_slope = lmax / alpha
        if lmin > 1e-12 and beta is not None:
            c_bar = lmin - lmax / (4.0 * beta)
            beta_bound = lmax / (4.0 * lmin)
    return RateEstimates(c_smf=c_smf, alpha_bound=alpha_bound, c_bar=c_bar,
                         beta_bound=beta_bound,
                         issf_gain_slope=issf_gain_slope)


def issf_gain(Qtilde, alpha: float, r: float) -> float:
    """Linear disturbance-to-safety-margin gain."""
    lmax = float(np.linalg.eigvalsh(np.asarray(Qtilde, dtype=float))[-1])
    return lmax / alpha * r


# -- Lyapunov evaluations ----------------------------------------------


def eval_W(F: Operator, C: ConstraintSet, x, alpha: float,
           projection_result=None) -> float:
    """Optimal value of the restricted-tangent projection program.

    Closed form -0.5||xi||^2 + alpha(u'g + v'h); nonpositive on C with
    equality exactly at solutions of the variational inequality.
    """
    x = np.asarray(x, dtype=float)
    if projection_result is None:
        from . import qp
        projection_result = qp.project_restricted_tangent(F, C, x, alpha)
    xi, u, v = (projection_result.xi, projection_result.u,
                projection_result.v)
    val = -0.5 * float(xi @ xi)
    if C.m:
        val += alpha * float(u @ C.g(x))
    if C.k and v.size:
        val += alpha * float(v @ C.h(x))
    return val


def eval_W_variational(F: Operator, C: ConstraintSet, x, alpha: float,
                       xi=None) -> float:
    """Direct evaluation xi'F(x) + 0.5||xi||^2 at the projected velocity."""
    if xi is None:
        from . import qp
        xi = qp.project_restricted_tangent(F, C, x, alpha).xi
    Fx = F(np.asarray(x, dtype=float))
    return float(xi @ Fx) + 0.5 * float(xi @ xi)


def eval_V(F: Operator, C: ConstraintSet, x, x_star, alpha: float) -> float:
    """0.5||x - x*||^2 - W(x)/alpha^2; Lyapunov function relative to C."""
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(x_star, dtype=float)
    return 0.5 * float(d @ d) - eval_W(F, C, x, alpha) / alpha ** 2


def delta_eps(C: ConstraintSet, x, epsilon: float) -> float:
    """l1 penalty (1/eps)(sum [g_i]_+ + sum |h_j|)."""
    gx = C.g(x)
    hx = C.h(x)
    val = float(np.sum(np.maximum(gx, 0.0))) if C.m else 0.0
    if C.k:
        val += float(np.sum(np.abs(hx)))
    return val / epsilon


def auto_epsilon(F: Operator, C: ConstraintSet, x_star, alpha: float
                 ) -> float:
    """Canonical penalty weight: alpha / (2(||(u*,v*)||_inf + 1))."""
    _, u, v = restricted_multipliers_batch(
        F, C, np.asarray(x_star, dtype=float)[None, :], alpha)
    mults = np.concatenate([u[0], v[0]])
    norm = float(np.max(np.abs(mults), initial=0.0))
    return alpha / (2.0 * (norm + 1.0))


def eval_V_eps(F: Operator, C: ConstraintSet, x, x_star, alpha: float,
               epsilon: Optional[float] = None) -> float:
    """Statewide Lyapunov function: Vtilde + [-W/alpha^2]_+ + penalty."""
    if epsilon is None:
        epsilon = auto_epsilon(F, C, x_star, alpha)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(x_star, dtype=float)
    W = eval_W(F, C, x, alpha)
    return (0.5 * float(d @ d) + max(-W / alpha ** 2, 0.0)
            + delta_eps(C, x, epsilon))


# -- batched evaluations along trajectories ----------------------------


def _batched_g_h(C: ConstraintSet, X):
    T = X.shape[0]
    if C.polyhedral:
        gX = X @ C.G.T - C.c_g if C.m else np.zeros((T, 0))
    else:
        gX = np.array([C.g(X[i]) for i in range(T)]).reshape(T, C.m)
    hX = X @ C.H.T - C.c_h if C.k else np.zeros((T, 0))
    return gX, hX


def lyapunov_arrays(F: Operator, C: ConstraintSet, traj: Trajectory,
                    x_star, alpha: Optional[float] = None,
                    epsilon: Optional[float] = None):
    """Per-step (Vtilde, W, V, delta_eps, Veps, epsilon) along a trajectory."""
    alpha = alpha if alpha is not None else traj.params.alpha
    if epsilon is None:
        epsilon = auto_epsilon(F, C, x_star, alpha)
    X = traj.x
    x_star = np.asarray(x_star, dtype=float)
    xi, U, V = restricted_multipliers_batch(F, C, X, alpha)
    gX, hX = _batched_g_h(C, X)
    Wv = -0.5 * np.sum(xi * xi, axis=1)
    if C.m:
        Wv = Wv + alpha * np.sum(U * gX, axis=1)
    if C.k:
        Wv = Wv + alpha * np.sum(V * hX, axis=1)
    D = X - x_star
    Vt = 0.5 * np.sum(D * D, axis=1)
    Vrel = Vt - Wv / alpha ** 2
    pen = (np.sum(np.maximum(gX, 0.0), axis=1)
           + np.sum(np.abs(hX), axis=1)) / epsilon
    Veps = Vt + np.maximum(-Wv / alpha ** 2, 0.0) + pen
    return Vt, Wv, Vrel, pen, Veps, epsilon


# -- Dini-derivative checks --------------------------------------------


@dataclass
class DiniReport:
    which: str
    passed: bool
    max_violation: float
    n_violations: int
    n_steps: int


def dini_bound_check(F: Operator, C: ConstraintSet, traj: Trajectory,
                     x_star, which: str = "V_relative_C",
                     alpha: Optional[float] = None,
                     epsilon: Optional[float] = None,
                     mu: Optional[float] = None,
                     slack_factor: float = DEFAULT_SLACK_FACTOR
                     ) -> DiniReport:
    """Forward-difference check of a decrease/increase bound along a run.

    ``which`` selects the function and its continuous-time bound:
      - "V_relative_C": dV/dt <= -mu ||x - x*||^2 (feasible trajectories);
      - "V_eps":        same bound for the statewide function;
      - "delta_eps":    d(delta)/dt <= -(alpha/eps) * (violation mass);
      - "W":            dW/dt >= xi'Qsym xi - alpha^2 (u'g + v'h).
    Each step gets slack 10 h (1 + field norm) for discretization error.
    """
    alpha = alpha if alpha is not None else traj.params.alpha
    mu = mu if mu is not None else F.mu
    h = traj.params.h
    Vt, Wv, Vrel, pen, Veps, epsilon = lyapunov_arrays(
        F, C, traj, x_star, alpha=alpha, epsilon=epsilon)
    X = traj.x
    D2 = np.sum((X - np.asarray(x_star, dtype=float)) ** 2, axis=1)
    slack = slack_factor * h * (1.0 + traj.field_norm)
    T = X.shape[0]
    if T < 2:
        return DiniReport(which, True, 0.0, 0, 0)

    if which == "V_relative_C":
        dd = (Vrel[1:] - Vrel[:-1]) / h
        bound = -mu * D2[:-1] + slack[:-1]
    elif which == "V_eps":
        dd = (Veps[1:] - Veps[:-1]) / h
        bound = -mu * D2[:-1] + slack[:-1]
    elif which == "delta_eps":
        dd = (pen[1:] - pen[:-1]) / h
        gX, hX = _batched_g_h(C, X)
        mass = (np.sum(np.maximum(gX, 0.0), axis=1)
                + np.sum(np.abs(hX), axis=1))
        bound = -(alpha / epsilon) * mass[:-1] + slack[:-1]
    elif which == "W":
        dd = -((Wv[1:] - Wv[:-1]) / h)  # check dW/dt >= rhs as -dW <= -rhs
        xi, U, V = restricted_multipliers_batch(F, C, X, alpha)
        if F.jacobian is None:
            raise ValueError("W bound check needs the operator Jacobian")
        gX, hX = _batched_g_h(C, X)
        rhs = np.empty(T)
        for i in range(T):
            J = np.asarray(F.jacobian(X[i]), dtype=float)
            Qs = 0.5 * (J + J.T)
            quad = float(xi[i] @ (Qs @ xi[i]))
            Hg = C.g_hessians(X[i]) if C.m else None
            if Hg is not None:
                # curvature of the inequality constraints (zero when polyhedral)
                quad += float(np.einsum("i,ijk,j,k->",
                                        U[i], Hg, xi[i], xi[i]))
            rhs[i] = quad
        if C.m:
            rhs -= alpha ** 2 * np.sum(U * gX, axis=1)
        if C.k:
            rhs -= alpha ** 2 * np.sum(V * hX, axis=1)
        bound = -rhs[:-1] + slack[:-1]
    else:
        raise ValueError(f"unknown check {which!r}")
    viol = dd - bound
    max_v = float(np.max(viol, initial=-np.inf))
    n_v = int(np.sum(viol > 0))
    return DiniReport(which=which, passed=n_v == 0,
                      max_violation=max(max_v, 0.0),
                      n_violations=n_v, n_steps=dd.size)


# -- contraction estimates ---------------------------------------------


def contraction_estimate(traj_a: Trajectory, traj_b: Trajectory,
                         noise_floor: float = 1e-6) -> float:
    """Least-squares slope of log pairwise distance before convergence."""
    if traj_a.flow != traj_b.flow:
        raise ValueError("trajectories come from different flows")
    if abs(traj_a.params.h - traj_b.params.h) > 0:
        raise ValueError("trajectories use different step sizes")
    T = min(len(traj_a), len(traj_b))
    d = np.linalg.norm(traj_a.x[:T] - traj_b.x[:T], axis=1)
    below = np.flatnonzero(d < noise_floor)
    end = below[0] if below.size else T
    if end < 2:
        raise DegenerateWindow("trajectories coincide within tolerance")
    t = traj_a.t[:end]
    slope = np.polyfit(t, np.log(d[:end]), 1)[0]
    return float(slope)


# -- practical safety ---------------------------------------------------


@dataclass
class PracticalSafetyReport:
    safe: bool
    epsilon: float
    margin: float
    issf_prediction: Optional[float]
    sup_tracking_error: Optional[float]


def practical_safety_check(F: Operator, C: ConstraintSet, traj: Trajectory,
                           epsilon: float,
                           alpha: Optional[float] = None
                           ) -> PracticalSafetyReport:
    """Does the trajectory stay in the epsilon-inflated constraint set?

    Also reports the disturbance-gain prediction of the worst excursion
    from the multiplier tracking error (recursive flow trajectories).
    """
    alpha = alpha if alpha is not None else traj.params.alpha
    margin = max(float(np.max(traj.gmax, initial=-np.inf)),
                 float(np.max(traj.hmax, initial=0.0)))
    pred = sup_err = None
    if C.polyhedral:
        M = np.vstack([C.G, C.H]) if C.k else C.G
        Qt = M @ M.T
        err = tracking_error(F, C, traj, alpha)
        sup_err = float(np.max(err))
        pred = issf_gain(Qt, alpha, sup_err)
    return PracticalSafetyReport(safe=margin <= epsilon, epsilon=epsilon,
                                 margin=margin, issf_prediction=pred,
                                 sup_tracking_error=sup_err)


# -- sampling and W-sign sweeps ----------------------------------------


def sample_feasible(C: ConstraintSet, count: int, seed: int = 0,
                    max_tries: int = 100000) -> np.ndarray:
    """Random feasible points: uniform for boxes, rejection otherwise."""
    rng = np.random.default_rng(seed)
    if C.is_box:
        lower, upper, _, _ = C.box_bounds()
        lo = np.where(np.isfinite(lower), lower, -10.0)
        hi = np.where(np.isfinite(upper), upper, 10.0)
        return rng.uniform(lo, hi, size=(count, C.n))
    pts = []
    for _ in range(max_tries):
        x = rng.standard_normal(C.n) * 2.0
        if C.k:
            # project onto the affine subspace first
            r = C.H @ x - C.c_h
            x = x - C.H.T @ np.linalg.lstsq(C.H @ C.H.T, r, rcond=None)[0]
        if C.contains(x):
            pts.append(x)
            if len(pts) == count:
                return np.array(pts)
    raise RuntimeError("rejection sampling failed to find feasible points")


@dataclass
class WSignReport:
    passed: bool
    max_W: float
    worst_point: Optional[np.ndarray]
    equality_only_at_solution: bool


def w_sign_check(F: Operator, C: ConstraintSet, x_star, alpha: float,
                 count: int = 200, seed: int = 0, tol: float = 1e-10,
                 sol_radius: float = 1e-8) -> WSignReport:
    """W <= tol on sampled feasible points, equality only near x*."""
    X = sample_feasible(C, count, seed=seed)
    xi, U, V = restricted_multipliers_batch(F, C, X, alpha)
    gX, hX = _batched_g_h(C, X)
    Wv = -0.5 * np.sum(xi * xi, axis=1)
    if C.m:
        Wv = Wv + alpha * np.sum(U * gX, axis=1)
    if C.k:
        Wv = Wv + alpha * np.sum(V * hX, axis=1)
    worst = int(np.argmax(Wv))
    x_star = np.asarray(x_star, dtype=float)
    eq_ok = True
    for i in range(count):
        if Wv[i] > -tol and np.linalg.norm(X[i] - x_star) > sol_radius:
            eq_ok = False
            break
    return WSignReport(passed=bool(np.max(Wv) <= tol) and eq_ok,
                       max_W=float(np.max(Wv)), worst_point=X[worst],
                       equality_only_at_solution=eq_ok)


# -- certificate report -------------------------------------------------


@dataclass
class CertificateReport:
    """Per-step Lyapunov values with decrease checks and summaries."""

    flow: str
    alpha: float
    epsilon: float
    t: np.ndarray
    Vtilde: np.ndarray
    W: np.ndarray
    V: np.ndarray
    delta_eps: np.ndarray
    Veps: np.ndarray
    dini: dict = field(default_factory=dict)
    min_W: float = 0.0
    max_dini_violation: float = 0.0
    contraction_slope: Optional[float] = None
    passed: bool = True

    def to_json(self, path) -> None:
        payload = {
            "flow": self.flow,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "t": self.t.tolist(),
            "Vtilde": self.Vtilde.tolist(),
            "W": self.W.tolist(),
            "V": self.V.tolist(),
            "delta_eps": self.delta_eps.tolist(),
            "Veps": self.Veps.tolist(),
            "dini": {k: {"passed": r.passed,
                         "max_violation": r.max_violation,
                         "n_violations": r.n_violations,
                         "n_steps": r.n_steps}
                     for k, r in self.dini.items()},
            "summary": {
                "min_W": self.min_W,
                "max_dini_violation": self.max_dini_violation,
                "contraction_slope": self.contraction_slope,
                "passed": self.passed,
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def certificate_report(F: Operator, C: ConstraintSet, traj: Trajectory,
                       x_star, alpha: Optional[float] = None,
                       epsilon: Optional[float] = None,
                       contraction_slope: Optional[float] = None,
                       checks=("V_relative_C", "V_eps", "delta_eps"),
                       mu: Optional[float] = None) -> CertificateReport:
    """Evaluate the Lyapunov machinery along one trajectory."""
    alpha = alpha if alpha is not None else traj.params.alpha
    Vt, Wv, Vrel, pen, Veps, epsilon = lyapunov_arrays(
        F, C, traj, x_star, alpha=alpha, epsilon=epsilon)
    reports = {}
    feasible = bool(np.max(traj.gmax, initial=0.0) <= 1e-6
                    and np.max(traj.hmax, initial=0.0) <= 1e-6)
    for which in checks:
        if which == "V_relative_C" and not feasible:
            continue  # the relative function is only certified on C
        reports[which] = dini_bound_check(F, C, traj, x_star, which=which,
                                          alpha=alpha, epsilon=epsilon,
                                          mu=mu)
    max_viol = max((r.max_violation for r in reports.values()), default=0.0)
    passed = all(r.passed for r in reports.values())
    return CertificateReport(
        flow=traj.flow, alpha=alpha, epsilon=epsilon, t=traj.t,
        Vtilde=Vt, W=Wv, V=Vrel, delta_eps=pen, Veps=Veps,
        dini=reports, min_W=float(np.min(Wv)),
        max_dini_violation=max_viol,
        contraction_slope=contraction_slope, passed=passed)
