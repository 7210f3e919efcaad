"""Command-line harness: solve, compare, lqdg, certify.

Exit codes: 0 success/converged, 1 configuration error, 2 flow did not
converge within t_final, 3 domain error (infeasible start or the safe
flow left its domain), 4 certificate failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .core import (builtin_problem, load_problem, natural_residual,
                   kkt_residual, KKTTriple, DimensionMismatch)
from .flows import (FlowParams, FlowState, integrate_pmf, integrate_smf,
                    integrate_rsmf, tracking_error, OutsideDomain)
from .qp import NotFeasible, euclidean_projector
from .problems import canonical_lqdg, receding_horizon_run  # noqa: F401
from . import problems as _problems  # ensures registry side effects

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONCONVERGED = 2
EXIT_DOMAIN = 3
EXIT_CERTIFICATE = 4

CLI_RESIDUAL_TOL = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _parse_vector(text):
    try:
        return np.array([float(tok) for tok in text.split(",") if tok != ""])
    except ValueError:
        raise SystemExit(EXIT_CONFIG)


def _parse_vectors(text):
    return [_parse_vector(part) for part in text.split(";") if part]


def _load_config_defaults(args, argv):
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config file: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_CONFIG)
        for key, value in data.items():
            key = key.replace("-", "_")
            if not hasattr(args, key):
                print(f"error: unknown config field {key!r}", file=sys.stderr)
                raise SystemExit(EXIT_CONFIG)
            # flags given on the command line win over file values
            flag = "--" + key.replace("_", "-")
            given = any(tok == flag or tok.startswith(flag + "=")
                        for tok in argv)
            if not given:
                setattr(args, key, value)
    return args


def _get_problem(name):
    if name is None:
        name = "two_player_game"
    if os.path.exists(name):
        try:
            return load_problem(name)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            print(f"error: bad problem file: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_CONFIG)
    try:
        return builtin_problem(name)
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _flow_params(args):
    try:
        return FlowParams(alpha=args.alpha, beta=args.beta, tau=args.tau,
                          h=args.h, t_final=args.tfinal,
                          tol_converge=args.tol_converge)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _run_one(flow, F, C, x0, u0, params):
    if flow == "pmf":
        return integrate_pmf(F, C, x0, params)
    if flow == "smf":
        return integrate_smf(F, C, x0, params)
    if flow == "rsmf":
        u0 = np.zeros(C.m) if u0 is None else u0
        p = params
        if p.h > p.tau / 10.0:
            p = FlowParams(alpha=p.alpha, beta=p.beta, tau=p.tau,
                           h=p.tau / 10.0, t_final=p.t_final,
                           tol_converge=p.tol_converge)
        state0 = FlowState(x=x0, u=u0, v=np.zeros(C.k))
        return integrate_rsmf(F, C, state0, p)
    print(f"error: unknown flow {flow!r}", file=sys.stderr)
    raise SystemExit(EXIT_CONFIG)


def _outdir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _converged(F, C, traj):
    if traj.converged:
        return True
    proj = euclidean_projector(C)
    return natural_residual(F, C, traj.final_x, proj) <= CLI_RESIDUAL_TOL


def _write_solution(F, C, traj, path, x_star=None):
    """Trajectory CSV with Lyapunov columns when the solution is known."""
    if x_star is None and _converged(F, C, traj):
        x_star = traj.final_x
    if x_star is not None:
        _, W, V, _, Veps, _ = analysis.lyapunov_arrays(
            F, C, traj, x_star, alpha=traj.params.alpha)
        traj.to_csv(path, V=V, W=W, Veps=Veps)
    else:
        traj.to_csv(path)


def cmd_solve(args):
    F, C = _get_problem(args.problem)
    params = _flow_params(args)
    x0 = _parse_vector(args.x0) if args.x0 else np.zeros(C.n)
    u0 = _parse_vector(args.u0) if args.u0 else None
    try:
        traj = _run_one(args.flow, F, C, x0, u0, params)
    except (NotFeasible, OutsideDomain) as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except DimensionMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _outdir(args)
    csv_path = os.path.join(out, f"solve_{args.flow}.csv")
    _write_solution(F, C, traj, csv_path)
    ok = _converged(F, C, traj)
    if ok:
        rep = analysis.certificate_report(F, C, traj, traj.final_x,
                                          mu=F.mu)
        rep.to_json(os.path.join(out, f"solve_{args.flow}_certificate.json"))
    final = traj.final_x
    proj = euclidean_projector(C)
    print(f"flow={args.flow} steps={len(traj) - 1} "
          f"converged={'yes' if ok else 'no'} aborted={traj.aborted}")
    print("final x:", np.array2string(final, precision=8))
    print(f"natural residual: {natural_residual(F, C, final, proj):.3e}")
    if args.flow == "rsmf":
        T = KKTTriple(x=final, u=traj.u[-1], v=traj.v[-1])
        print(f"kkt residual: {kkt_residual(F, C, T):.3e}")
    print(f"trajectory: {csv_path}")
    if traj.aborted:
        return EXIT_DOMAIN
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_compare(args):
    F, C = _get_problem(args.problem)
    params = _flow_params(args)
    flows = [f for f in args.flow.split(",") if f]
    starts = _parse_vectors(args.x0) if args.x0 else [np.zeros(C.n)]
    runs = []
    for flow in flows:
        for i, x0 in enumerate(starts):
            try:
                traj = _run_one(flow, F, C, x0, None, params)
            except (NotFeasible, OutsideDomain) as exc:
                print(f"domain error ({flow}, start {i}): {exc}",
                      file=sys.stderr)
                return EXIT_DOMAIN
            runs.append((flow, i, traj))
    if len(runs) < 2:
        print("error: compare needs at least two runs "
              "(several flows and/or starts)", file=sys.stderr)
        return EXIT_CONFIG
    out = _outdir(args)
    for flow, i, traj in runs:
        _write_solution(F, C, traj, os.path.join(out, f"compare_{flow}_{i}.csv"))
    for a in range(len(runs)):
        for b in range(a + 1, len(runs)):
            fa, ia, ta = runs[a]
            fb, ib, tb = runs[b]
            T = min(len(ta), len(tb))
            dist = np.linalg.norm(ta.x[:T] - tb.x[:T], axis=1)
            line = (f"{fa}[{ia}] vs {fb}[{ib}]: sup distance "
                    f"{np.max(dist):.6e}, final {dist[-1]:.6e}")
            if fa == fb:
                try:
                    slope = analysis.contraction_estimate(ta, tb)
                    line += f", contraction slope {slope:.4f}"
                except analysis.DegenerateWindow:
                    line += ", identical within tolerance"
            if {fa, fb} == {"smf", "rsmf"}:
                rt = ta if fa == "rsmf" else tb
                err = tracking_error(F, C, rt, params.alpha)
                line += f", sup multiplier tracking error {np.max(err):.6e}"
            print(line)
    return EXIT_OK


def cmd_lqdg(args):
    tf_values = []
    for tok in args.tf.split(","):
        tok = tok.strip()
        if not tok:
            continue
        tf_values.append(np.inf if tok in ("inf", "infinity") else float(tok))
    if not tf_values:
        print("error: empty --tf grid", file=sys.stderr)
        return EXIT_CONFIG
    prob = canonical_lqdg(seed=args.seed, N=args.N)
    out = _outdir(args)
    summary = []
    for tf in tf_values:
        run = receding_horizon_run(prob, solver=args.flow, t_f=tf,
                                   steps=args.steps)
        label = "inf" if np.isinf(tf) else f"{tf:g}"
        run.to_csv(os.path.join(out, f"lqdg_tf_{label}.csv"))
        summary.append((tf, run.znorm[-1], run.min_input))
    print("t_f        terminal ||z||    min input")
    for tf, zn, mi in summary:
        label = "inf" if np.isinf(tf) else f"{tf:g}"
        print(f"{label:<10} {zn:<16.8e}  {mi:.3e}")
    return EXIT_OK


def cmd_certify(args):
    F, C = _get_problem(args.problem)
    params = _flow_params(args)
    alpha = params.alpha
    # locate the solution by running the safe flow to convergence
    x_probe = _parse_vector(args.x0) if args.x0 else np.zeros(C.n)
    proj = euclidean_projector(C)
    x = np.asarray(x_probe, dtype=float)
    elapsed = 0.0
    while elapsed < 200.0:
        tr = integrate_smf(F, C, x, FlowParams(
            alpha=alpha, h=params.h, t_final=20.0, tol_converge=1e-12))
        x = tr.final_x
        elapsed += tr.t[-1]
        if natural_residual(F, C, x, proj) <= 1e-10:
            break
    x_star = x
    if natural_residual(F, C, x_star, proj) > 1e-8:
        print("certificate failure: safe flow did not locate a solution")
        return EXIT_CERTIFICATE
    failures = []
    wrep = analysis.w_sign_check(F, C, x_star, alpha, count=200,
                                 seed=args.seed)
    if not wrep.passed:
        failures.append(f"W sign check failed (max W {wrep.max_W:.3e})")
    traj = integrate_smf(F, C, x_probe, params)
    rep = analysis.certificate_report(F, C, traj, x_star, mu=F.mu)
    if not rep.passed:
        failures.append(
            f"Lyapunov decrease violated (max {rep.max_dini_violation:.3e})")
    # contraction from a perturbed pair
    rates = None
    if F.mu > 0 and F.lipschitz is not None:
        rates = analysis.rate_formulas(F.mu, F.lipschitz, alpha)
        x0b = x_probe + 0.5 * np.ones(C.n)
        trb = integrate_smf(F, C, x0b, params)
        try:
            slope = analysis.contraction_estimate(traj, trb)
        except analysis.DegenerateWindow:
            slope = None
        rep.contraction_slope = slope
        if rates.contraction_guaranteed:
            if slope is not None and slope > -rates.c_smf + 0.05:
                failures.append(
                    f"measured contraction slope {slope:.4f} misses the "
                    f"guaranteed rate {rates.c_smf:.4f}")
        else:
            print(f"contraction not guaranteed: alpha={alpha:g} below the "
                  f"threshold {rates.alpha_bound:g}; measured slope "
                  f"{'n/a' if slope is None else f'{slope:.4f}'}")
    out = _outdir(args)
    rep.to_json(os.path.join(out, "certificate.json"))
    print(f"solution: {np.array2string(x_star, precision=8)}")
    print(f"max W on samples: {wrep.max_W:.3e} (must be <= 1e-10)")
    print(f"max Lyapunov-decrease violation: {rep.max_dini_violation:.3e}")
    if rates is not None:
        print(f"rate: c={rates.c_smf:g} alpha_bound={rates.alpha_bound:g} "
              f"guaranteed={rates.contraction_guaranteed}")
    if failures:
        for f_ in failures:
            print(f"FAIL: {f_}")
        return EXIT_CERTIFICATE
    print("all certificates passed")
    return EXIT_OK


def _add_shared(p):
    p.add_argument("--problem", default=None,
                   help="built-in problem name or problem JSON file")
    p.add_argument("--flow", default="smf",
                   help="pmf, smf, or rsmf (compare: comma-separated list)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tfinal", type=float, default=15.0)
    p.add_argument("--tol-converge", type=float, default=1e-8)
    p.add_argument("--x0", default=None,
                   help="comma-separated start; semicolons separate "
                        "multiple starts for compare")
    p.add_argument("--u0", default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults (flags override)")


def build_parser():
    parser = _Parser(prog="viflows",
                     description="anytime variational-inequality solvers "
                                 "via safe monotone flows")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("solve", cmd_solve), ("compare", cmd_compare),
                     ("lqdg", cmd_lqdg), ("certify", cmd_certify)):
        p = sub.add_parser(name)
        _add_shared(p)
        if name == "lqdg":
            p.add_argument("--tf", default="0.1,0.5,2.0,inf",
                           help="comma-separated termination times; "
                                "'inf' integrates to convergence")
            p.add_argument("--steps", type=int, default=30)
            p.add_argument("--N", type=int, default=5,
                           help="prediction horizon")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return EXIT_CONFIG
    try:
        args = _load_config_defaults(args, argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
