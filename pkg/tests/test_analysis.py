import json

import numpy as np
import pytest

from viflows.core import ConstraintSet, affine_operator
from viflows.flows import FlowParams, FlowState, integrate_smf, \
    integrate_rsmf, integrate_batch
from viflows import analysis as an


@pytest.fixture(scope="module")
def smf_run(game):
    F, C = game
    return integrate_smf(F, C, np.array([1.0, 1.0]),
                         FlowParams(h=1e-3, t_final=8.0))


# -- W -------------------------------------------------------------------


def test_W_oracles(game, game_solution):
    F, C = game
    assert an.eval_W(F, C, game_solution, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert an.eval_W(F, C, np.zeros(2), 1.0) == pytest.approx(-0.125)
    assert an.eval_W(F, C, np.array([1.0, 0.0]), 1.0) == pytest.approx(-1.5)


def test_W_closed_form_matches_variational(game):
    F, C = game
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.uniform(-1.4, 1.4, 2)
        closed = an.eval_W(F, C, x, 1.0)
        direct = an.eval_W_variational(F, C, x, 1.0)
        assert abs(closed - direct) <= 1e-10


def test_w_sign_check(game, game_solution):
    F, C = game
    rep = an.w_sign_check(F, C, game_solution, 1.0, count=200, seed=3)
    assert rep.passed
    assert rep.max_W <= 1e-10
    assert rep.equality_only_at_solution


# -- V and V_eps ---------------------------------------------------------


def test_V_eps_anchored_at_solution(game, game_solution):
    F, C = game
    assert an.eval_V_eps(F, C, game_solution, game_solution, 1.0) == \
        pytest.approx(0.0, abs=1e-12)


def test_V_eps_feasible_branch(game, game_solution):
    F, C = game
    x = np.array([0.5, 0.5])  # feasible, W < 0 -> penalty terms active
    V = an.eval_V(F, C, x, game_solution, 1.0)
    Veps = an.eval_V_eps(F, C, x, game_solution, 1.0, 0.5)
    assert Veps == pytest.approx(V)


def test_V_eps_infeasible_oracle(game, game_solution):
    F, C = game
    # x=(1.5,0), eps=0.5: Vtilde=1.5625, [-W]_+=2.625, penalty=1.0
    val = an.eval_V_eps(F, C, np.array([1.5, 0.0]), game_solution, 1.0, 0.5)
    assert val == pytest.approx(5.1875)


def test_auto_epsilon(game, game_solution):
    F, C = game
    # interior solution: multipliers vanish -> eps = alpha/2
    assert an.auto_epsilon(F, C, game_solution, 1.0) == pytest.approx(0.5)


def test_eval_V_eps_validates_epsilon(game, game_solution):
    F, C = game
    with pytest.raises(ValueError):
        an.eval_V_eps(F, C, np.zeros(2), game_solution, 1.0, -1.0)


# -- rate formulas -------------------------------------------------------


def test_rate_formulas_game_values():
    r = an.rate_formulas(1.0, np.sqrt(2.0), 1.0)
    assert r.c_smf == pytest.approx(0.5)
    assert r.alpha_bound == pytest.approx(0.5)
    assert r.contraction_guaranteed


def test_rate_formulas_singular_gram(game):
    _, C = game
    Qt = C.G @ C.G.T  # eigenvalues {0, 0, 2, 2}
    eigs = np.linalg.eigvalsh(Qt)
    np.testing.assert_allclose(sorted(eigs), [0, 0, 2, 2], atol=1e-12)
    r = an.rate_formulas(1.0, np.sqrt(2.0), 1.0, Qtilde=Qt, beta=1.0)
    assert r.c_bar is None and r.beta_bound is None
    assert r.issf_gain_slope == pytest.approx(2.0)


def test_rate_formulas_definite_gram():
    r = an.rate_formulas(1.0, np.sqrt(2.0), 1.0, Qtilde=2.0 * np.eye(3),
                         beta=1.0)
    assert r.c_bar == pytest.approx(1.5)
    assert r.beta_bound == pytest.approx(0.25)


def test_rate_formulas_alpha_below_bound_flagged():
    r = an.rate_formulas(1.0, np.sqrt(2.0), 0.4)
    assert not r.contraction_guaranteed
    assert r.c_smf < 0


def test_issf_gain_linear():
    Qt = 2.0 * np.eye(4)
    assert an.issf_gain(Qt, 1.0, 2.0) == pytest.approx(
        2.0 * an.issf_gain(Qt, 1.0, 1.0))


# -- Dini checks ---------------------------------------------------------


def test_dini_V_decrease(game, game_solution, smf_run):
    F, C = game
    rep = an.dini_bound_check(F, C, smf_run, game_solution,
                              which="V_relative_C")
    assert rep.passed and rep.n_violations == 0


def test_dini_V_eps_and_delta(game, game_solution):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.5, 1.5]),
                       FlowParams(h=1e-3, t_final=8.0))
    for which in ("V_eps", "delta_eps"):
        rep = an.dini_bound_check(F, C, tr, game_solution, which=which)
        assert rep.passed, which


def test_dini_W_lower_bound(game, game_solution, smf_run):
    F, C = game
    rep = an.dini_bound_check(F, C, smf_run, game_solution, which="W")
    assert rep.passed


def test_dini_stationary_trajectory(game, game_solution):
    F, C = game
    tr = integrate_smf(F, C, game_solution, FlowParams(h=1e-3, t_final=0.5))
    rep = an.dini_bound_check(F, C, tr, game_solution, which="V_relative_C")
    assert rep.passed and rep.max_violation == 0.0


def test_dini_unknown_kind(game, game_solution, smf_run):
    F, C = game
    with pytest.raises(ValueError):
        an.dini_bound_check(F, C, smf_run, game_solution, which="nope")


def test_dini_detects_nonmonotone_operator():
    # rotation with negative gain: V increases along the flow
    Q = np.array([[-1.0, -2.0], [2.0, -1.0]])
    F = affine_operator(Q, np.zeros(2))
    C = ConstraintSet.box([-1, -1], [1, 1])
    assert F.mu == 0.0  # not strongly monotone
    tr = integrate_smf(F, C, np.array([0.5, 0.5]),
                       FlowParams(h=1e-3, t_final=2.0))
    rep = an.dini_bound_check(F, C, tr, np.zeros(2), which="V_relative_C",
                              mu=0.0)
    assert not rep.passed
    assert rep.max_violation > 0


# -- contraction ---------------------------------------------------------


def test_contraction_estimate_smf(game):
    F, C = game
    p = FlowParams(h=1e-3, t_final=25.0)
    a, b = integrate_batch("smf", F, C,
                           np.array([[1.0, 1.0], [-1.0, 1.0]]), p)
    slope = an.contraction_estimate(a, b)
    assert slope <= -0.45


def test_contraction_degenerate_window(game):
    F, C = game
    p = FlowParams(h=1e-2, t_final=1.0)
    a = integrate_smf(F, C, np.array([1.0, 1.0]), p)
    b = integrate_smf(F, C, np.array([1.0, 1.0]), p)
    with pytest.raises(an.DegenerateWindow):
        an.contraction_estimate(a, b)


def test_contraction_rejects_mixed_flows(game):
    F, C = game
    p = FlowParams(h=1e-2, t_final=1.0)
    a = integrate_smf(F, C, np.array([1.0, 1.0]), p)
    from viflows.flows import integrate_pmf
    b = integrate_pmf(F, C, np.array([0.5, 0.5]), p)
    with pytest.raises(ValueError):
        an.contraction_estimate(a, b)


# -- practical safety ----------------------------------------------------


def test_practical_safety_smf_trivial(game, smf_run):
    F, C = game
    rep = an.practical_safety_check(F, C, smf_run, epsilon=1e-6)
    assert rep.safe
    assert rep.margin <= 1e-6


def test_practical_safety_rsmf(game):
    F, C = game
    st = FlowState(x=np.array([1.0, 0.0]), u=np.zeros(4), v=None)
    tr = integrate_rsmf(F, C, st, FlowParams(tau=0.25, h=0.025,
                                             t_final=10.0))
    rep = an.practical_safety_check(F, C, tr, epsilon=1e-2)
    assert rep.issf_prediction is not None
    assert rep.margin <= rep.issf_prediction + 1e-6


# -- sampling and report -------------------------------------------------


def test_sample_feasible_box(game):
    _, C = game
    X = an.sample_feasible(C, 100, seed=5)
    assert X.shape == (100, 2)
    assert all(C.contains(x) for x in X)


def test_sample_feasible_general():
    C = ConstraintSet.polyhedron([[1.0, 1.0]], [1.0])
    X = an.sample_feasible(C, 20, seed=5)
    assert all(C.contains(x) for x in X)


def test_certificate_report_json(game, game_solution, smf_run, tmp_path):
    F, C = game
    rep = an.certificate_report(F, C, smf_run, game_solution)
    assert rep.passed
    assert rep.min_W <= 0.0
    path = tmp_path / "cert.json"
    rep.to_json(path)
    data = json.loads(path.read_text())
    assert data["summary"]["passed"] is True
    assert len(data["W"]) == len(smf_run)
    assert data["dini"]["V_relative_C"]["passed"] is True
