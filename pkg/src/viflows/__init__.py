"""Anytime solvers for monotone variational inequalities.

Three continuous-time flows solve VI(F, C) with feasibility guarantees:
a projected flow (exactly feasible, defined on C), a safe flow (forward
invariant on C, attractive from a neighborhood), and a recursive safe
flow (multipliers as fast states, practically safe).  The analysis
module certifies safety, Lyapunov decrease, and contraction rates
numerically along trajectories.
"""

from .core import (Operator, ConstraintSet, KKTTriple, ActiveSets,
                   DimensionMismatch, affine_operator, active_sets,
                   kkt_residual, natural_residual, probe_monotonicity,
                   check_jacobian, register_problem, builtin_problem,
                   load_problem, save_problem)
from .qp import (QPSpec, ProjectionResult, Infeasible, Unbounded,
                 MaxIterations, NotFeasible, solve_qp,
                 euclidean_projection, euclidean_projector,
                 project_tangent_cone, project_restricted_tangent,
                 solve_dual_qp, solve_control_qp, qp_lp_consistency)
from .flows import (FlowParams, FlowState, Trajectory, OutsideDomain,
                    StiffnessWarning, pmf_field, smf_field, rsmf_field,
                    integrate_pmf, integrate_smf, integrate_rsmf,
                    integrate_batch, tracking_error)
from .analysis import (RateEstimates, CertificateReport, DiniReport,
                       DegenerateWindow, rate_formulas, issf_gain,
                       eval_W, eval_W_variational, eval_V, eval_V_eps,
                       auto_epsilon, dini_bound_check,
                       contraction_estimate, practical_safety_check,
                       sample_feasible, w_sign_check, certificate_report)
from .problems import (MonotonicityViolation, LQDGProblem,
                       RecedingHorizonRun, build_two_player_game,
                       build_constrained_opt, build_lqdg, canonical_lqdg,
                       marginally_stable_matrix, receding_horizon_run)

__version__ = "0.1.0"
