"""End-to-end acceptance suite.

Each test exercises one advertised guarantee on the benchmark problems
and records a one-line pass/fail verdict that the terminal summary
prints after the run.
"""

import time

import numpy as np
import pytest

from conftest import record_criterion
from viflows.core import ConstraintSet, affine_operator, KKTTriple, \
    kkt_residual
from viflows.qp import (project_tangent_cone, project_restricted_tangent,
                        solve_dual_qp, solve_control_qp, qp_lp_consistency)
from viflows.flows import (FlowParams, FlowState, integrate_batch,
                           integrate_smf, integrate_rsmf, integrate_pmf,
                           tracking_error)
from viflows import analysis as an
from viflows.problems import canonical_lqdg, receding_horizon_run

H_DEFAULT = 1e-3
X_STAR = np.array([-0.25, -0.25])

CORNERS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
EDGE_MIDPOINTS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
FEASIBLE_STARTS = np.vstack([CORNERS, EDGE_MIDPOINTS])
MIXED_STARTS = np.vstack([CORNERS, EDGE_MIDPOINTS[:2],
                          [[1.5, 1.5], [-1.5, 0.5]]])


def test_criterion_01_all_flows_converge(game):
    F, C = game
    params = FlowParams(h=H_DEFAULT, t_final=15.0)
    t0 = time.perf_counter()
    errs = {}
    for flow, starts in (("pmf", FEASIBLE_STARTS), ("smf", MIXED_STARTS),
                         ("rsmf", MIXED_STARTS)):
        trajs = integrate_batch(flow, F, C, starts, params)
        errs[flow] = max(np.linalg.norm(tr.final_x - X_STAR)
                         for tr in trajs)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-4 and elapsed < 5.0
    record_criterion(1, "all three flows reach the equilibrium from "
                     "8 starts each", ok,
                     f"worst error {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_anytime_feasibility(game):
    F, C = game
    params = FlowParams(h=H_DEFAULT, t_final=10.0)
    feas = an.sample_feasible(C, 20, seed=11)
    trajs = integrate_batch("smf", F, C, feas, params)
    worst_feas = max(np.max(tr.gmax) for tr in trajs)
    rng = np.random.default_rng(12)
    infeas = []
    while len(infeas) < 10:
        x = rng.uniform(-1.5, 1.5, 2)
        if not C.contains(x):
            infeas.append(x)
    worst_gap = -np.inf
    for tr in integrate_batch("smf", F, C, np.array(infeas), params):
        g0 = np.maximum(C.g(tr.x[0]), 0.0)
        envelope = np.max(g0) * np.exp(-params.alpha * tr.t) + 1e-4
        worst_gap = max(worst_gap, np.max(tr.gmax - envelope))
    ok = worst_feas <= 1e-6 and worst_gap <= 0.0
    record_criterion(2, "safe flow keeps feasible starts feasible and "
                     "decays violations exponentially", ok,
                     f"max g feasible {worst_feas:.2e}, "
                     f"max envelope gap {worst_gap:.2e}")
    assert ok


def test_criterion_03_equality_decay():
    F = affine_operator(np.eye(2), np.zeros(2))
    C = ConstraintSet.polyhedron(np.zeros((0, 2)), np.zeros(0),
                                 H=[[1.0, 1.0]], c_h=[0.0])
    x0 = np.array([0.2, 0.1])
    tr = integrate_smf(F, C, x0, FlowParams(alpha=1.0, h=H_DEFAULT,
                                            t_final=3.0))
    hvals = tr.x @ np.array([1.0, 1.0])
    pred = 0.3 * np.exp(-tr.t)
    rel = np.max(np.abs(hvals - pred) / np.abs(pred))
    ok = rel <= 1e-4
    record_criterion(3, "equality violation decays exactly exponentially",
                     ok, f"max relative error {rel:.2e}")
    assert ok


def test_criterion_04_contraction_rates(game):
    F, C = game
    starts = np.array([[1.0, 1.0], [-1.0, 1.0]])
    results = []
    for flow, alpha, slope_req in (("smf", 1.0, -0.45),
                                   ("smf", 0.6, -0.117),
                                   ("pmf", 1.0, -0.95)):
        p = FlowParams(alpha=alpha, h=H_DEFAULT, t_final=30.0)
        a, b = integrate_batch(flow, F, C, starts, p)
        slope = an.contraction_estimate(a, b)
        results.append((flow, alpha, slope, slope <= slope_req))
    ok = all(r[3] for r in results)
    detail = ", ".join(f"{f} a={a:g}: {s:.3f}" for f, a, s, _ in results)
    record_criterion(4, "measured contraction rates meet the predicted "
                     "bounds", ok, detail)
    assert ok


def test_criterion_05_control_qp_equivalence(game):
    F, C = game
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(200):
        x = rng.uniform(-1.4, 1.4, 2)
        a = solve_control_qp(F, C, x, alpha=1.0)
        b = project_restricted_tangent(F, C, x, 1.0)
        worst = max(worst, float(np.linalg.norm(a.xi - b.xi)))
    for _ in range(200):
        x = rng.uniform(-1.0, 1.0, 2)
        a = solve_control_qp(F, C, x, alpha=None)
        b = project_tangent_cone(F, C, x)
        worst = max(worst, float(np.linalg.norm(a.xi - b.xi)))
    ok = worst <= 1e-8
    record_criterion(5, "control-form QP reproduces both projected "
                     "vector fields", ok, f"max deviation {worst:.2e}")
    assert ok


def test_criterion_06_dual_reconstruction(game):
    F, C = game
    rng = np.random.default_rng(14)
    Qt = C.G @ C.G.T
    worst = 0.0
    all_consistent = True
    for _ in range(200):
        x = rng.uniform(-1.4, 1.4, 2)
        u, v, xi = solve_dual_qp(F, C, x, 1.0)
        ref = project_restricted_tangent(F, C, x, 1.0)
        worst = max(worst, float(np.linalg.norm(xi - ref.xi)))
        c = C.G @ F(x) - C.g(x)
        ok_i, _ = qp_lp_consistency(Qt, c, u, v)
        all_consistent = all_consistent and ok_i
    ok = worst <= 1e-8 and all_consistent
    record_criterion(6, "dual multipliers reconstruct the safe field and "
                     "satisfy complementarity", ok,
                     f"max deviation {worst:.2e}, "
                     f"consistent={all_consistent}")
    assert ok


def test_criterion_07_lyapunov_certificates(game):
    F, C = game
    wrep = an.w_sign_check(F, C, X_STAR, 1.0, count=200, seed=15)
    tr_feas = integrate_smf(F, C, np.array([1.0, 1.0]),
                            FlowParams(h=H_DEFAULT, t_final=10.0))
    V = an.lyapunov_arrays(F, C, tr_feas, X_STAR, alpha=1.0)[2]
    v_mono = float(np.max(np.diff(V)))
    tr_inf = integrate_smf(F, C, np.array([1.5, 1.5]),
                           FlowParams(h=H_DEFAULT, t_final=10.0))
    Veps = an.lyapunov_arrays(F, C, tr_inf, X_STAR, alpha=1.0)[4]
    veps_mono = float(np.max(np.diff(Veps)))
    dini_ok = True
    for traj, which in ((tr_feas, "V_relative_C"), (tr_feas, "W"),
                        (tr_inf, "V_eps"), (tr_inf, "delta_eps")):
        rep = an.dini_bound_check(F, C, traj, X_STAR, which=which)
        dini_ok = dini_ok and rep.passed
    ok = (wrep.passed and v_mono <= 1e-12 and veps_mono <= 1e-12
          and dini_ok)
    record_criterion(7, "energy functions are sign-correct and decrease "
                     "at the certified rates", ok,
                     f"max W {wrep.max_W:.1e}, max dV {v_mono:.1e}, "
                     f"max dVeps {veps_mono:.1e}, dini={dini_ok}")
    assert ok


def test_criterion_08_multiplier_dynamics(game):
    F, C = game
    x0 = np.array([1.0, 0.0])
    tr = integrate_rsmf(F, C, FlowState(x=x0, u=np.zeros(4), v=None),
                        FlowParams(alpha=1.0, beta=1.0, tau=0.25,
                                   h=0.025, t_final=15.0))
    trip = KKTTriple(x=tr.final_x, u=tr.u[-1], v=tr.v[-1])
    kres = kkt_residual(F, C, trip)
    sups, sups_late, maxg = [], [], []
    for tau in (0.25, 0.1, 0.04):
        p = FlowParams(alpha=1.0, beta=1.0, tau=tau, h=tau / 10.0,
                       t_final=10.0)
        trt = integrate_rsmf(F, C, FlowState(x=x0, u=np.zeros(4), v=None),
                             p)
        err = tracking_error(F, C, trt, 1.0)
        sups.append(float(np.max(err)))
        # after the initial boundary layer the error shrinks with tau
        sups_late.append(float(np.max(err[trt.t >= 0.5])))
        maxg.append(float(np.max(trt.gmax)))
    lam_max = float(np.linalg.eigvalsh(C.G @ C.G.T)[-1])
    issf_ok = all(g <= (lam_max / 1.0) * s + 1e-6
                  for g, s in zip(maxg, sups))
    mono_ok = sups_late[0] > sups_late[1] > sups_late[2]
    ok = kres <= 1e-4 and mono_ok and issf_ok
    record_criterion(8, "multiplier dynamics converge to a KKT point and "
                     "track the safe flow as tau shrinks", ok,
                     f"kkt residual {kres:.1e}, tracking sups "
                     + "/".join(f"{s:.3f}" for s in sups_late))
    assert ok


def test_criterion_09_receding_horizon_game():
    t0 = time.perf_counter()
    prob = canonical_lqdg()
    runs = []
    for tf in (0.1, 0.5, 2.0, np.inf):
        runs.append(receding_horizon_run(prob, solver="smf", t_f=tf,
                                         steps=30))
    elapsed = time.perf_counter() - t0
    min_input = min(r.min_input for r in runs)
    terminal = [float(r.znorm[-1]) for r in runs]
    mono_ok = all(terminal[i] >= terminal[i + 1] - 1e-12
                  for i in range(len(terminal) - 1))
    decay_ok = terminal[-1] <= 0.1 * float(runs[-1].znorm[0])
    ok = (min_input >= -1e-9 and mono_ok and decay_ok and elapsed < 60.0)
    record_criterion(9, "anytime receding-horizon control improves with "
                     "solve time and never violates input bounds", ok,
                     f"terminal norms "
                     + "/".join(f"{z:.1e}" for z in terminal)
                     + f", min input {min_input:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_10_negative_controls():
    Q = np.array([[-1.0, -2.0], [2.0, -1.0]])
    F = affine_operator(Q, np.zeros(2))
    C = ConstraintSet.box([-1, -1], [1, 1])
    tr = integrate_smf(F, C, np.array([0.5, 0.5]),
                       FlowParams(h=H_DEFAULT, t_final=2.0))
    rep = an.dini_bound_check(F, C, tr, np.zeros(2), which="V_relative_C",
                              mu=0.0)
    rates = an.rate_formulas(1.0, np.sqrt(2.0), 0.4)
    ok = (not rep.passed) and (not rates.contraction_guaranteed)
    record_criterion(10, "certification rejects a non-monotone operator "
                     "and an undersized design gain", ok,
                     f"decrease violated={not rep.passed}, "
                     f"guarantee withheld={not rates.contraction_guaranteed}")
    assert ok
