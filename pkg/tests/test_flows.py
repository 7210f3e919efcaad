import numpy as np
import pytest

from viflows.core import ConstraintSet, affine_operator, kkt_residual, \
    KKTTriple
from viflows.qp import NotFeasible, solve_dual_qp
from viflows.flows import (FlowParams, FlowState, Trajectory,
                           StiffnessWarning, pmf_field, smf_field,
                           rsmf_field, integrate_pmf, integrate_smf,
                           integrate_rsmf, integrate_batch, tracking_error)


@pytest.fixture(scope="module")
def params_fast():
    return FlowParams(h=1e-3, t_final=10.0)


# -- field oracles -----------------------------------------------------


def test_pmf_field_interior(game):
    F, C = game
    np.testing.assert_allclose(pmf_field(F, C, np.zeros(2)), [0.0, -0.5])


def test_pmf_field_equilibrium(game, game_solution):
    F, C = game
    assert np.linalg.norm(pmf_field(F, C, game_solution)) <= 1e-10


def test_pmf_field_boundary(game):
    F, C = game
    np.testing.assert_allclose(pmf_field(F, C, np.array([1.0, 0.0])),
                               [-1.0, -1.5], atol=1e-12)


def test_pmf_field_outside_raises(game):
    F, C = game
    with pytest.raises(NotFeasible):
        pmf_field(F, C, np.array([1.5, 0.0]))


def test_smf_field_oracles(game, game_solution):
    F, C = game
    np.testing.assert_allclose(smf_field(F, C, np.zeros(2), 1.0).xi,
                               [0.0, -0.5], atol=1e-12)
    np.testing.assert_allclose(smf_field(F, C, np.array([1.5, 0.0]), 1.0).xi,
                               [-1.5, -1.0], atol=1e-12)
    assert np.linalg.norm(smf_field(F, C, game_solution, 1.0).xi) <= 1e-10


def test_rsmf_field_at_kkt(game, game_solution):
    F, C = game
    st = FlowState(x=game_solution, u=np.zeros(4), v=None)
    dx, du, dv = rsmf_field(F, C, st, 1.0, 1.0, 0.25)
    assert np.linalg.norm(dx) <= 1e-12
    assert np.linalg.norm(du) <= 1e-12


def test_rsmf_field_max_branch(game):
    F, C = game
    # large u on an inactive row: -beta*u dominates the affine term
    u = np.array([0.0, 0.0, 0.0, 5.0])
    st = FlowState(x=np.zeros(2), u=u, v=None)
    _, du, _ = rsmf_field(F, C, st, 1.0, 1.0, 0.25)
    assert du[3] == pytest.approx(-1.0 * 5.0 / 0.25)


def test_rsmf_inner_equilibrium_at_dual_solution(game):
    F, C = game
    x = np.array([1.0, 0.0])
    u, v, _ = solve_dual_qp(F, C, x, 1.0)
    st = FlowState(x=x, u=u, v=v)
    _, du, dv = rsmf_field(F, C, st, 1.0, 1.0, 0.25)
    # frozen x: the multiplier dynamics rest at the QP feedback
    assert np.max(np.abs(du)) <= 1e-9


def test_rsmf_field_dimension_check(game):
    from viflows.core import DimensionMismatch
    F, C = game
    with pytest.raises(DimensionMismatch):
        rsmf_field(F, C, FlowState(x=np.zeros(2), u=np.zeros(2), v=None),
                   1.0, 1.0, 0.25)


# -- parameter validation ----------------------------------------------


def test_flow_params_validation():
    with pytest.raises(ValueError):
        FlowParams(h=0.0)
    with pytest.raises(ValueError):
        FlowParams(alpha=-1.0)


def test_rsmf_stiffness_guard(game):
    F, C = game
    st = FlowState(x=np.zeros(2), u=np.zeros(4), v=None)
    with pytest.raises(ValueError):
        integrate_rsmf(F, C, st, FlowParams(tau=0.25, h=0.1, t_final=1.0))


def test_rsmf_negative_u0_rejected(game):
    F, C = game
    st = FlowState(x=np.zeros(2), u=np.array([-0.1, 0, 0, 0]), v=None)
    with pytest.raises(ValueError):
        integrate_rsmf(F, C, st, FlowParams(tau=0.25, h=0.01, t_final=1.0))


# -- projected flow trajectories ---------------------------------------


def test_pmf_requires_feasible_start(game):
    F, C = game
    with pytest.raises(NotFeasible):
        integrate_pmf(F, C, np.array([1.5, 0.0]), FlowParams(t_final=1.0))


def test_pmf_converges_and_stays_feasible(game, game_solution, params_fast):
    F, C = game
    tr = integrate_pmf(F, C, np.array([1.0, 1.0]), params_fast)
    assert np.linalg.norm(tr.final_x - game_solution) <= 1e-4
    assert np.max(tr.gmax) <= 1e-8


def test_pmf_stationary_at_solution(game, game_solution):
    F, C = game
    tr = integrate_pmf(F, C, game_solution, FlowParams(t_final=1.0))
    assert tr.converged
    assert np.max(np.linalg.norm(tr.x - game_solution, axis=1)) <= 1e-10


def test_pmf_pairwise_distance_nonincreasing(game, params_fast):
    F, C = game
    a, b = integrate_batch("pmf", F, C,
                           np.array([[1.0, 1.0], [-1.0, 0.5]]), params_fast)
    T = min(len(a), len(b))
    d = np.linalg.norm(a.x[:T] - b.x[:T], axis=1)
    assert np.all(np.diff(d) <= 1e-12)


# -- safe flow trajectories --------------------------------------------


def test_smf_converges_feasible(game, game_solution, params_fast):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.0, 1.0]), params_fast)
    assert np.linalg.norm(tr.final_x - game_solution) <= 1e-4
    assert np.max(tr.gmax) <= 1e-6  # forward invariance


def test_smf_converges_infeasible_start(game, game_solution):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.5, 1.5]),
                       FlowParams(h=1e-3, t_final=13.0))
    assert np.linalg.norm(tr.final_x - game_solution) <= 1e-4
    # violation decays like exp(-alpha t)
    g0 = 0.5
    pred = g0 * np.exp(-tr.t) + 1e-4
    assert np.all(tr.gmax <= pred)


def test_smf_equality_exponential_decay():
    F = affine_operator(np.eye(2), np.zeros(2))
    C = ConstraintSet.polyhedron(np.zeros((0, 2)), np.zeros(0),
                                 H=[[1.0, 1.0]], c_h=[0.0])
    x0 = np.array([0.2, 0.1])  # h(x0) = 0.3
    tr = integrate_smf(F, C, x0, FlowParams(alpha=1.0, h=1e-3, t_final=3.0))
    hvals = tr.x @ np.array([1.0, 1.0])
    pred = 0.3 * np.exp(-tr.t)
    assert np.max(np.abs(hvals - pred) / np.abs(pred)) <= 1e-4


def test_smf_box_matches_general_path(game, game_solution):
    F, _ = game
    G = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [0.0, -2.0]])
    C_gen = ConstraintSet.polyhedron(G, 2.0 * np.ones(4))
    C_box = ConstraintSet.box([-1, -1], [1, 1])
    p = FlowParams(h=1e-2, t_final=3.0)
    a = integrate_smf(F, C_box, np.array([1.2, 0.3]), p)
    b = integrate_smf(F, C_gen, np.array([1.2, 0.3]), p)
    T = min(len(a), len(b))
    assert np.max(np.linalg.norm(a.x[:T] - b.x[:T], axis=1)) <= 1e-9


# -- recursive flow trajectories ---------------------------------------


def test_rsmf_converges_to_kkt(game, game_solution):
    F, C = game
    st = FlowState(x=np.array([1.0, 1.0]), u=np.zeros(4), v=None)
    tr = integrate_rsmf(F, C, st, FlowParams(tau=0.25, h=1e-3, t_final=15.0))
    T = KKTTriple(x=tr.final_x, u=tr.u[-1], v=tr.v[-1])
    assert kkt_residual(F, C, T) <= 1e-4
    assert np.linalg.norm(tr.final_x - game_solution) <= 1e-4


def test_rsmf_orthant_invariance(game):
    F, C = game
    st = FlowState(x=np.array([1.0, 0.0]), u=np.zeros(4), v=None)
    tr = integrate_rsmf(F, C, st, FlowParams(tau=0.25, h=1e-3, t_final=10.0))
    assert np.min(tr.u) >= -1e-10


def test_rsmf_tracks_safe_flow_with_small_tau(game):
    F, C = game
    x0 = np.array([1.0, 0.0])
    sups = []
    for tau in (0.25, 0.1, 0.04):
        p = FlowParams(tau=tau, h=tau / 10.0, t_final=10.0)
        tr = integrate_rsmf(F, C, FlowState(x=x0, u=np.zeros(4), v=None), p)
        ts = integrate_smf(F, C, x0, FlowParams(h=tau / 10.0, t_final=10.0))
        T = min(len(tr), len(ts))
        sups.append(np.max(np.linalg.norm(tr.x[:T] - ts.x[:T], axis=1)))
    assert sups[0] > sups[1] > sups[2]


def test_rsmf_stiffness_warning(game):
    # huge alpha makes the multiplier dynamics move violently
    Q = np.array([[1.0, -1.0], [1.0, 1.0]])
    F = affine_operator(100.0 * Q, np.array([0.0, 50.0]))
    C = ConstraintSet.box([-1, -1], [1, 1])
    st = FlowState(x=np.array([1.0, 1.0]), u=np.zeros(4), v=None)
    with pytest.warns(StiffnessWarning):
        integrate_rsmf(F, C, st,
                       FlowParams(alpha=1.0, tau=0.25, h=0.025, t_final=2.0))


# -- trajectory container ----------------------------------------------


def test_trajectory_grid_and_csv(game, tmp_path):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.0, 1.0]),
                       FlowParams(h=1e-2, t_final=1.0))
    dt = np.diff(tr.t)
    assert np.allclose(dt, 1e-2)
    assert np.all(dt > 0)
    path = tmp_path / "traj.csv"
    tr.to_csv(path, V=np.zeros(len(tr)), W=np.zeros(len(tr)),
              Veps=np.zeros(len(tr)))
    header = path.read_text().splitlines()[0]
    assert header == ("t,x_1,x_2,u_1,u_2,u_3,u_4,"
                      "gmax,hmax,field_norm,V,W,Veps")
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(tr), 13)
    np.testing.assert_allclose(data[:, 1:3], tr.x, rtol=0, atol=0)


def test_trajectory_state_accessor(game):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.0, 0.0]),
                       FlowParams(h=1e-2, t_final=0.5))
    st = tr.state(0)
    np.testing.assert_allclose(st.x, [1.0, 0.0])
    assert st.t == 0.0


def test_batch_matches_single(game):
    F, C = game
    p = FlowParams(h=1e-2, t_final=2.0)
    batch = integrate_batch("smf", F, C,
                            np.array([[1.0, 1.0], [0.5, -0.5]]), p)
    single = integrate_smf(F, C, np.array([1.0, 1.0]), p)
    T = min(len(batch[0]), len(single))
    np.testing.assert_allclose(batch[0].x[:T], single.x[:T], atol=1e-12)


def test_unknown_flow_rejected(game):
    F, C = game
    with pytest.raises(ValueError):
        integrate_batch("foo", F, C, np.zeros((1, 2)), FlowParams())


def test_tracking_error_zero_when_multipliers_exact(game):
    F, C = game
    tr = integrate_smf(F, C, np.array([1.0, 0.0]),
                       FlowParams(h=1e-2, t_final=1.0))
    err = tracking_error(F, C, tr, 1.0)
    assert np.max(err) <= 1e-10
