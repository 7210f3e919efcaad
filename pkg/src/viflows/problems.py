"""Benchmark problems: a two-player quadratic game, a constrained
linear-quadratic dynamic game solved in receding horizon, and generic
constrained optimization posed as a variational inequality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (ConstraintSet, Operator, affine_operator,
                   natural_residual, register_problem)
from .flows import FlowParams, FlowState, integrate_pmf, integrate_smf, \
    integrate_rsmf


class MonotonicityViolation(ValueError):
    """The dynamic game's data fails the strong-monotonicity condition."""


# -- two-player quadratic game -----------------------------------------


def build_two_player_game():
    """Two-player game on [-1,1]^2 with pseudogradient F(x) = Qx + r.

    Player costs are quadratic; the stacked partial gradients give
    Q = [[1,-1],[1,1]], r = (0, 0.5).  F is 1-strongly monotone and the
    unique equilibrium (-0.25, -0.25) is interior.
    """
    Q = np.array([[1.0, -1.0], [1.0, 1.0]])
    r = np.array([0.0, 0.5])
    F = affine_operator(Q, r, name="two_player_game")
    G = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    c_g = np.ones(4)
    C = ConstraintSet.polyhedron(G, c_g)
    return F, C


register_problem("two_player_game", build_two_player_game)


# -- constrained optimization as a VI ----------------------------------


def build_constrained_opt(gradient, C: ConstraintSet, mu: float = 0.0,
                          lipschitz: Optional[float] = None,
                          jacobian=None, name: str = "constrained_opt"):
    """Wrap the gradient map of a smooth objective as the VI operator."""
    if isinstance(gradient, Operator):
        return gradient, C
    F = Operator(dim=C.n, func=gradient, jacobian=jacobian, mu=mu,
                 lipschitz=lipschitz, name=name)
    return F, C


# -- linear-quadratic dynamic game -------------------------------------


def marginally_stable_matrix(n: int, seed: int) -> np.ndarray:
    """Random dense matrix rescaled to spectral radius exactly 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    while True:
        A = rng.standard_normal((n, n))
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        if rho > 1e-12:
            return A / rho


@dataclass
class LQDGProblem:
    """Finite-horizon two-player game on z(s+1) = Az + B1 w1 + B2 w2.

    Player 1 minimizes and player 2 maximizes the quadratic payoff
    ||z(N)||^2_Qf + sum_s ||z(s)||^2_Q + ||w1(s)||^2_R1 - ||w2(s)||^2_R2.
    Stacking inputs turns the game into VI(F(., z0), C) with an affine F
    whose symmetric part is blkdiag(C1'Qbar C1 + Rbar1, Rbar2 - C2'Qbar C2).
    """

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Q: np.ndarray
    Qf: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    N: int
    z0: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B1 = np.asarray(self.B1, dtype=float)
        self.B2 = np.asarray(self.B2, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.Qf = np.asarray(self.Qf, dtype=float)
        self.R1 = np.asarray(self.R1, dtype=float)
        self.R2 = np.asarray(self.R2, dtype=float)
        self.z0 = np.asarray(self.z0, dtype=float)
        self.n_z = self.A.shape[0]
        self.n_w = self.B1.shape[1]
        if self.A.shape != (self.n_z, self.n_z):
            raise ValueError("A must be square")
        for B in (self.B1, self.B2):
            if B.shape != (self.n_z, self.n_w):
                raise ValueError("input matrices must be n_z x n_w")
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        for M, pd in ((self.Q, False), (self.Qf, False),
                      (self.R1, True), (self.R2, True)):
            lmin = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
            if lmin < (1e-12 if pd else -1e-12):
                raise ValueError("cost matrices must be PSD (R_i PD)")
        self._build_stacked()

    def _build_stacked(self):
        N, nz, nw = self.N, self.n_z, self.n_w
        powers = [np.eye(nz)]
        for _ in range(N):
            powers.append(self.A @ powers[-1])
        self.Astack = np.vstack(powers[1:])  # (N nz, nz)
        C1 = np.zeros((N * nz, N * nw))
        C2 = np.zeros((N * nz, N * nw))
        for s in range(1, N + 1):
            for j in range(s):
                blk = powers[s - 1 - j]
                C1[(s - 1) * nz:s * nz, j * nw:(j + 1) * nw] = blk @ self.B1
                C2[(s - 1) * nz:s * nz, j * nw:(j + 1) * nw] = blk @ self.B2
        self.C1, self.C2 = C1, C2
        Qblocks = [self.Q] * (N - 1) + [self.Qf]
        self.Qbar = _blkdiag(Qblocks)
        self.Rbar1 = _blkdiag([self.R1] * N)
        self.Rbar2 = _blkdiag([self.R2] * N)
        K11 = C1.T @ self.Qbar @ C1 + self.Rbar1
        K12 = C1.T @ self.Qbar @ C2
        K21 = C2.T @ self.Qbar @ C1
        K22 = self.Rbar2 - C2.T @ self.Qbar @ C2
        self.F_matrix = np.block([[K11, K12], [-K21, K22]])
        self.mono_block = _blkdiag([K11, K22])
        self.mu = float(np.linalg.eigvalsh(
            0.5 * (self.mono_block + self.mono_block.T))[0])
        self.dim = 2 * N * nw

    def monotonicity_ok(self, tol: float = 1e-10) -> bool:
        return self.mu > tol

    def offset(self, z0=None) -> np.ndarray:
        z0 = self.z0 if z0 is None else np.asarray(z0, dtype=float)
        QA = self.Qbar @ (self.Astack @ z0)
        return np.concatenate([self.C1.T @ QA, -self.C2.T @ QA])

    def operator(self, z0=None) -> Operator:
        return affine_operator(self.F_matrix, self.offset(z0), name="lqdg")

    def constraint_set(self) -> ConstraintSet:
        # per-stage nonnegativity on both players' inputs
        return ConstraintSet.box(np.zeros(self.dim),
                                 np.full(self.dim, np.inf))

    def split(self, x):
        half = self.N * self.n_w
        return np.asarray(x)[:half], np.asarray(x)[half:]

    def simulate(self, w1bar, w2bar, z0=None) -> np.ndarray:
        """Stepwise rollout of the dynamics; returns stacked (z(1)..z(N))."""
        z0 = self.z0 if z0 is None else np.asarray(z0, dtype=float)
        z = z0.copy()
        out = []
        for s in range(self.N):
            w1 = np.asarray(w1bar)[s * self.n_w:(s + 1) * self.n_w]
            w2 = np.asarray(w2bar)[s * self.n_w:(s + 1) * self.n_w]
            z = self.A @ z + self.B1 @ w1 + self.B2 @ w2
            out.append(z.copy())
        return np.concatenate(out)

    def payoff(self, w1bar, w2bar, z0=None) -> float:
        """Stage-by-stage evaluation of the quadratic payoff."""
        z0 = self.z0 if z0 is None else np.asarray(z0, dtype=float)
        zbar = self.simulate(w1bar, w2bar, z0)
        nz = self.n_z
        val = float(z0 @ self.Q @ z0)
        for s in range(1, self.N):
            z = zbar[(s - 1) * nz:s * nz]
            val += float(z @ self.Q @ z)
        zN = zbar[(self.N - 1) * nz:]
        val += float(zN @ self.Qf @ zN)
        for s in range(self.N):
            w1 = np.asarray(w1bar)[s * self.n_w:(s + 1) * self.n_w]
            w2 = np.asarray(w2bar)[s * self.n_w:(s + 1) * self.n_w]
            val += float(w1 @ self.R1 @ w1) - float(w2 @ self.R2 @ w2)
        return val

    def payoff_stacked(self, w1bar, w2bar, z0=None) -> float:
        """Same payoff from the stacked quadratic form."""
        z0 = self.z0 if z0 is None else np.asarray(z0, dtype=float)
        x1 = np.asarray(w1bar, dtype=float)
        x2 = np.asarray(w2bar, dtype=float)
        K11 = self.C1.T @ self.Qbar @ self.C1 + self.Rbar1
        K12 = self.C1.T @ self.Qbar @ self.C2
        K22 = self.C2.T @ self.Qbar @ self.C2 - self.Rbar2
        QA = self.Qbar @ (self.Astack @ z0)
        val = (float(x1 @ K11 @ x1) + 2.0 * float(x1 @ K12 @ x2)
               + float(x2 @ K22 @ x2)
               + 2.0 * float((self.C1.T @ QA) @ x1)
               + 2.0 * float((self.C2.T @ QA) @ x2)
               + float(z0 @ (self.Astack.T @ QA))
               + float(z0 @ self.Q @ z0))
        return val


def _blkdiag(blocks):
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


def build_lqdg(A, B1, B2, Q, Qf, R1, R2, N, z0, seed=None):
    """(Operator, ConstraintSet) for the stacked dynamic game at z0."""
    prob = LQDGProblem(A=A, B1=B1, B2=B2, Q=Q, Qf=Qf, R1=R1, R2=R2,
                       N=N, z0=z0, seed=seed)
    if not prob.monotonicity_ok():
        raise MonotonicityViolation(
            "blkdiag(C1'QC1+R1, R2-C2'QC2) is not positive definite; "
            "increase R2")
    return prob.operator(), prob.constraint_set()


def canonical_lqdg(seed: int = 42, N: int = 5, r2_scale: float = 10.0
                   ) -> LQDGProblem:
    """The fixed benchmark instance: n_z=5, n_w=2, rectangular identity
    input matrices, random marginally stable A, R2 scaled up until the
    monotonicity condition holds."""
    n_z, n_w = 5, 2
    A = marginally_stable_matrix(n_z, seed)
    rng = np.random.default_rng(seed + 61)
    z0 = rng.standard_normal(n_z)
    B = np.eye(n_z, n_w)
    scale = r2_scale
    for _ in range(8):
        prob = LQDGProblem(A=A, B1=B, B2=B, Q=np.eye(n_z), Qf=np.eye(n_z),
                           R1=np.eye(n_w), R2=scale * np.eye(n_w),
                           N=N, z0=z0, seed=seed)
        if prob.monotonicity_ok():
            return prob
        scale *= 10.0
    raise MonotonicityViolation("could not satisfy the monotonicity "
                                "condition by scaling R2")


# -- receding-horizon driver -------------------------------------------


@dataclass
class RecedingHorizonRun:
    """Closed-loop record of repeatedly solving and applying stage 0."""

    t_f: float
    solver: str
    z: np.ndarray           # (steps+1, n_z)
    w1: np.ndarray          # (steps, n_w), applied first-stage inputs
    w2: np.ndarray
    solve_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def znorm(self) -> np.ndarray:
        return np.linalg.norm(self.z, axis=1)

    @property
    def min_input(self) -> float:
        return float(min(np.min(self.w1), np.min(self.w2)))

    def to_csv(self, path) -> None:
        steps = self.w1.shape[0]
        zn = self.znorm
        rows = np.column_stack([
            np.arange(steps), zn[:steps], self.w1[:, 0], self.w2[:, 0],
            np.full(steps, self.t_f)])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",",
                   header="s,znorm,w1_1,w2_1,t_f", comments="")


def _solve_stage(prob: LQDGProblem, C: ConstraintSet, z, x0, solver: str,
                 t_f: float, h: float, residual_tol: float = 1e-8,
                 t_cap: float = 1e4):
    """Run one flow on VI(F(., z), C) from x0 until t_f (or residual)."""
    F = prob.operator(z)
    proj = lambda y: np.maximum(y, 0.0)
    x = np.asarray(x0, dtype=float)
    if np.isfinite(t_f):
        params = FlowParams(h=h, t_final=max(t_f, h),
                            tol_converge=1e-14)
        tr = _run_flow(solver, F, C, x, params)
        return tr.final_x
    elapsed = 0.0
    chunk = 10.0
    while elapsed < t_cap:
        params = FlowParams(h=h, t_final=chunk, tol_converge=1e-12)
        tr = _run_flow(solver, F, C, x, params)
        x = tr.final_x
        elapsed += tr.t[-1]
        if natural_residual(F, C, x, proj) <= residual_tol:
            break
    return x


def _run_flow(solver, F, C, x, params):
    if solver == "smf":
        return integrate_smf(F, C, x, params)
    if solver == "pmf":
        return integrate_pmf(F, C, x, params)
    if solver == "rsmf":
        st = FlowState(x=x, u=np.zeros(C.m), v=np.zeros(C.k))
        p = FlowParams(alpha=params.alpha, beta=params.beta, tau=params.tau,
                       h=min(params.h, params.tau / 10.0),
                       t_final=params.t_final,
                       tol_converge=params.tol_converge)
        return integrate_rsmf(F, C, st, p)
    raise ValueError(f"unknown solver {solver!r}")


def receding_horizon_run(prob: LQDGProblem, solver: str = "smf",
                         t_f: float = np.inf, steps: int = 30,
                         h: Optional[float] = None,
                         seed: Optional[int] = None) -> RecedingHorizonRun:
    """Anytime receding-horizon loop: solve to t_f, apply stage 0, shift.

    Each outer step warm-starts from the previous solution shifted by
    one stage with zeros appended.  Inputs applied to the plant are
    feasible whenever the flow is terminated, converged or not.
    """
    if h is None:
        # explicit RK4 stability: keep h * ||F'|| comfortably inside
        # the stability region
        h = min(1e-2, 1.0 / (2.0 * np.linalg.norm(prob.F_matrix, 2)))
    C = prob.constraint_set()
    nw, N = prob.n_w, prob.N
    z = prob.z0.copy()
    zs = [z.copy()]
    w1s, w2s = [], []
    x = np.zeros(prob.dim)
    for s in range(steps):
        x = _solve_stage(prob, C, z, x, solver, t_f, h)
        w1bar, w2bar = prob.split(x)
        w1 = w1bar[:nw].copy()
        w2 = w2bar[:nw].copy()
        w1s.append(w1)
        w2s.append(w2)
        z = prob.A @ z + prob.B1 @ w1 + prob.B2 @ w2
        zs.append(z.copy())
        # shift by one stage, append zeros for the new terminal stage
        w1n = np.concatenate([w1bar[nw:], np.zeros(nw)])
        w2n = np.concatenate([w2bar[nw:], np.zeros(nw)])
        x = np.concatenate([w1n, w2n])
    return RecedingHorizonRun(t_f=float(t_f), solver=solver,
                              z=np.array(zs), w1=np.array(w1s),
                              w2=np.array(w2s))
