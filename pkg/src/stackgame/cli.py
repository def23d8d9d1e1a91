"""Command line entry point.

Exit codes: 0 success, 2 malformed or invalid config, 3 an iteration did
not converge, 4 file system error.  Error payloads go to stderr as JSON.
"""

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import aclm as aclm_mod
from . import fbsde, oracle, riccati, simulate
from .config import load_config
from .errors import AssumptionViolated, MalformedSpec, NotConverged, StackgameError, ValidationFailed
from .lattice import Lattice
from .model import validate_spec

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_IO = 0, 2, 3, 4
FULL_TREE_MAX = 16


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class Emitter:
    """Writes named outputs to ``--out`` (if given) and the summary to stdout."""

    def __init__(self, out_dir, fmt):
        self.out_dir = out_dir
        self.fmt = fmt
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def table(self, name, head, rows):
        if not self.out_dir:
            return
        if self.fmt == "json":
            text = dumps([dict(zip(head, r)) for r in rows])
            path = os.path.join(self.out_dir, name + ".json")
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(head)
            for r in rows:
                w.writerow([v if isinstance(v, (int, np.integer)) else "%.17g" % v for v in r])
            text = buf.getvalue()
            path = os.path.join(self.out_dir, name + ".csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)

    def summary(self, name, obj):
        text = dumps(obj)
        if self.out_dir:
            with open(os.path.join(self.out_dir, name + ".json"), "w", encoding="utf-8") as fh:
                fh.write(text)
        sys.stdout.write(text)


# -- helpers -----------------------------------------------------------------

def _load(args):
    spec, solver, sim = load_config(args.config)
    if args.seed is not None:
        sim.seed = args.seed
    if args.steps is not None:
        sim.steps = args.steps
    if args.paths is not None:
        sim.paths = args.paths
    if getattr(args, "N", None) is not None:
        solver.N = args.N
    report = validate_spec(spec)
    if not report.passed:
        raise ValidationFailed(report)
    return spec, solver, sim


def _full_lattice(spec, solver):
    if solver.N > FULL_TREE_MAX:
        raise MalformedSpec(f"solver.N = {solver.N} exceeds the full-tree limit {FULL_TREE_MAX}")
    return Lattice(spec.T, solver.N)


def solve_aol(spec, lattice, solver):
    """Plain Picard first; fall back to continuation when it does not converge."""
    try:
        return fbsde.solve_leader_system(spec, lattice, tol=solver.tol, max_iter=solver.max_iter)
    except NotConverged:
        return fbsde.solve_by_continuation(spec, lattice, "leader", steps=solver.continuation_steps,
                                           tol=solver.tol, max_iter=solver.max_iter)


def solution_rows(sol):
    lat = sol.lattice
    cols = [("x", sol.x), ("k", sol.k), ("p1", sol.p1), ("p2", sol.p2), ("q1", sol.q1),
            ("q2", sol.q2), ("u", sol.u), ("v", sol.v)]
    head = ["layer", "node", "t"]
    for name, proc in cols:
        head += [f"{name}{j}" for j in range(proc.dim)]
    rows = []
    for i in range(lat.N + 1):
        for j in range(lat.size(i)):
            row = [i, j, lat.time(i)]
            for _, proc in cols:
                if i < len(proc.layers):
                    row += list(proc[i][j])
                else:
                    row += [float("nan")] * proc.dim
            rows.append(row)
    return head, rows


def _is_unconstrained(spec):
    return spec.gamma1.is_full and spec.gamma2.is_full


def _duality(spec, sol, solver):
    if not _is_unconstrained(spec):
        return None
    aug = riccati.build_augmented(spec)
    ric = riccati.solve_riccati(aug, grid=solver.riccati_grid)
    errP, errQ = riccati.duality_errors(spec, aug, ric, sol)
    return max(errP, errQ)


# -- subcommands ---------------------------------------------------------------

def cmd_validate(args, em):
    spec, _, _ = load_config(args.config)
    report = validate_spec(spec)
    em.summary("validation", report.to_dict())
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_solve_aol(args, em):
    spec, solver, _ = _load(args)
    lat = _full_lattice(spec, solver)
    sol = solve_aol(spec, lat, solver)
    J1, J2 = fbsde.solution_costs(spec, sol)
    mp = fbsde.max_principle_residual(spec, lat, sol)
    head, rows = solution_rows(sol)
    em.table("solution", head, rows)
    summary = {
        "J1": J1, "J2": J2, "N": lat.N, "method": sol.method, "iterations": sol.iterations,
        "residual": sol.residual, "contraction": sol.contraction,
        "level_ratios": sol.level_ratios, "clamped_fraction": sol.clamped_fraction,
        "clamp_warning": sol.clamp_warning, "max_principle": mp.to_dict(),
    }
    dual = _duality(spec, sol, solver)
    if dual is not None:
        summary["duality_max_error"] = dual
    em.summary("summary", summary)
    return EXIT_OK


def cmd_solve_aclm(args, em):
    spec, solver, _ = _load(args)
    lat = _full_lattice(spec, solver)
    sol = aclm_mod.solve_aclm(spec, lat, solver.K_gain, tol=solver.tol, max_iter=solver.max_iter)
    head, rows = sol.to_rows()
    em.table("aclm", head, rows)
    h3 = aclm_mod.h3_stationarity_check(spec, sol)
    em.summary("summary", {
        "N": lat.N, "K": sol.K, "iterations": sol.iterations, "residual": sol.residual,
        "reconstruction_residual": aclm_mod.reconstruction_residual(spec, sol),
        "h3_max_residual": h3.max_residual, "sign_consistent": h3.sign_consistent,
        "max_abs_u2": max(float(np.max(np.abs(a))) for a in sol.u2.layers),
    })
    return EXIT_OK


def cmd_riccati(args, em):
    spec, solver, _ = _load(args)
    aug = riccati.build_augmented(spec)
    ric = riccati.solve_riccati(aug, grid=solver.riccati_grid)
    head, rows = ric.to_rows()
    em.table("riccati", head, rows)
    summary = {"grid": len(ric.times), "R0": ric.R[0], "Xi0": ric.Xi[0]}
    try:
        ut = riccati.upsilon_transform(spec)
        sym = riccati.solve_symmetrized_riccati(ut, grid=solver.riccati_grid)
        diff = max(float(np.max(np.abs(sym.R[k] - ric.at(t)))) for k, t in enumerate(sym.times))
        summary["upsilon"] = {"applicable": True, "lambda": ut.lam, "mu": ut.mu,
                              "max_asymmetry": ut.max_asymmetry(), "max_consistency_error": diff}
    except AssumptionViolated as exc:
        summary["upsilon"] = {"applicable": False, "reason": str(exc)}
    if _is_unconstrained(spec) and solver.N <= FULL_TREE_MAX:
        lat = Lattice(spec.T, solver.N)
        sol = solve_aol(spec, lat, solver)
        errP, errQ = riccati.duality_errors(spec, aug, ric, sol)
        summary["duality_max_error"] = max(errP, errQ)
        summary["duality"] = {"N": solver.N, "P": errP, "Q": errQ}
    em.summary("summary", summary)
    return EXIT_OK


def build_strategy(spec, solver, sim, source):
    if source == "auto":
        source = "riccati" if _is_unconstrained(spec) else "lattice"
    if source == "riccati":
        if not _is_unconstrained(spec):
            raise MalformedSpec("riccati feedback needs full-space control sets")
        aug = riccati.build_augmented(spec)
        ric = riccati.solve_riccati(aug, grid=solver.riccati_grid)
        return simulate.riccati_strategy(spec, ric, aug, sim.steps), source
    if source == "lattice":
        sol = solve_aol(spec, _full_lattice(spec, solver), solver)
        return simulate.NodeLookupStrategy.from_solution(sol), source
    if source == "aclm":
        sol = aclm_mod.solve_aclm(spec, _full_lattice(spec, solver), solver.K_gain,
                                  tol=solver.tol, max_iter=solver.max_iter)
        return simulate.aclm_strategy(spec, sol, sim.steps), source
    raise MalformedSpec(f"unknown strategy source {source!r}")


def cmd_simulate(args, em):
    spec, solver, sim = _load(args)
    cfg = simulate.SimConfig(paths=sim.paths, steps=sim.steps, seed=sim.seed,
                             antithetic=sim.antithetic, threads=args.threads)
    strat, source = build_strategy(spec, solver, sim, args.strategy)
    est = simulate.simulate_costs(spec, strat, cfg)
    if args.out and args.terminal:
        n = spec.n
        em.table("terminal", [f"x{j}" for j in range(n)], est.terminal[:, :n].tolist())
    out = est.to_dict()
    out.update({"strategy": source, "steps": cfg.steps, "seed": cfg.seed, "antithetic": cfg.antithetic})
    em.summary("estimate", out)
    return EXIT_OK


def cmd_verify(args, em):
    spec, solver, sim = _load(args)
    lat = _full_lattice(spec, solver)
    sol = solve_aol(spec, lat, solver)
    cfg = simulate.SimConfig(paths=max(2, sim.paths), steps=sim.steps, seed=sim.seed)
    out = {"max_principle": fbsde.max_principle_residual(spec, lat, sol).to_dict(), "probes": []}
    for role in ("follower", "leader"):
        for eps in (0.01, 0.05):
            rep = simulate.perturbation_probe(spec, sol, cfg, role, trials=args.trials, eps=eps)
            out["probes"].append(rep.to_dict())
    ok = out["max_principle"]["max_r_v"] <= 1e-8 and out["max_principle"]["max_r_u"] <= 1e-8
    ok = ok and all(p["passed"] for p in out["probes"])
    if spec.n == spec.m1 == spec.m2 == 1 and spec.gamma2.is_full:
        try:
            asol = aclm_mod.solve_aclm(spec, lat, solver.K_gain, tol=solver.tol, max_iter=solver.max_iter)
            h3 = aclm_mod.h3_stationarity_check(spec, asol)
            out["h3_stationarity"] = {"max_residual": h3.max_residual,
                                      "sign_consistent": h3.sign_consistent,
                                      "flagged": h3.flagged()}
        except NotConverged as exc:
            out["h3_stationarity"] = {"error": exc.payload()}
    out["passed"] = bool(ok)
    em.summary("verify", out)
    return EXIT_OK


def cmd_oracle_compare(args, em):
    spec, solver, _ = _load(args)
    if solver.N > oracle.LEADER_MAX_N:
        raise MalformedSpec(f"oracle comparison needs solver.N <= {oracle.LEADER_MAX_N}")
    lat = Lattice(spec.T, solver.N)
    sol = solve_aol(spec, lat, solver)
    u_mp = oracle.from_layers(sol.u.layers)
    v_mp = oracle.from_layers(sol.v.layers)
    J_mp = fbsde.solution_costs(spec, sol)
    lead = oracle.oracle_leader(spec, lat, restarts=args.restarts, seed=args.seed or 0)
    foll = oracle.oracle_follower(spec, lat, sol.u)
    clamp = lambda cs, vec, m: sorted(oracle.clamped_nodes(cs, vec, m))  # noqa: E731
    out = {
        "N": lat.N,
        "max_control_delta": max(float(np.max(np.abs(u_mp - lead.u))),
                                 float(np.max(np.abs(v_mp - lead.v)))),
        "max_follower_delta": float(np.max(np.abs(v_mp - foll.v))),
        "J1_delta": abs(J_mp[0] - lead.J1),
        "J2_delta": abs(J_mp[1] - foll.J2),
        "J_max_principle": list(J_mp),
        "J_oracle": [lead.J1, lead.J2],
        "clamped_u_max_principle": clamp(spec.gamma1, u_mp, spec.m1),
        "clamped_u_oracle": clamp(spec.gamma1, lead.u, spec.m1),
        "clamped_v_max_principle": clamp(spec.gamma2, v_mp, spec.m2),
        "clamped_v_oracle": clamp(spec.gamma2, foll.v, spec.m2),
        "restarts": lead.restarts,
    }
    out["clamped_sets_identical"] = (out["clamped_u_max_principle"] == out["clamped_u_oracle"]
                                     and out["clamped_v_max_principle"] == out["clamped_v_oracle"])
    em.summary("oracle_compare", out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate, "solve-aol": cmd_solve_aol, "solve-aclm": cmd_solve_aclm,
    "riccati": cmd_riccati, "simulate": cmd_simulate, "verify": cmd_verify,
    "oracle-compare": cmd_oracle_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="stackgame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="directory for emitted files")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--N", type=int, default=None, help="override solver.N")
        if name == "simulate":
            p.add_argument("--strategy", choices=("auto", "riccati", "lattice", "aclm"), default="auto")
            p.add_argument("--threads", type=int, default=None)
            p.add_argument("--terminal", action="store_true", help="also write terminal states")
        if name == "verify":
            p.add_argument("--trials", type=int, default=64)
        if name == "oracle-compare":
            p.add_argument("--restarts", type=int, default=4)
    return parser


def _error(exc, code):
    payload = exc.payload() if isinstance(exc, StackgameError) else {
        "error": type(exc).__name__, "message": str(exc)}
    payload["exit_code"] = code
    sys.stderr.write(dumps(payload))
    return code


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        em = Emitter(args.out, args.format)
        return COMMANDS[args.command](args, em)
    except (ValidationFailed, MalformedSpec, AssumptionViolated, ValueError) as exc:
        return _error(exc, EXIT_INVALID)
    except NotConverged as exc:
        return _error(exc, EXIT_NOT_CONVERGED)
    except OSError as exc:
        return _error(exc, EXIT_IO)


def main():
    sys.exit(run())
