"""Command-line front end: solve, certify, dynamics.

Every command reads an instance file (or, for seed sweeps, generates
instances), runs the library pipeline, and writes reports into the output
directory. Reports are deterministic for a fixed invocation: no
timestamps, sorted keys, and sweep rows ordered by seed, so re-running a
command yields byte-identical files.

Exit codes (fixed for scripting):
  0  success (for certify: certified and every lemma entry at threshold)
  2  unreadable input (bad JSON, malformed documents, bad CLI values)
  3  instance or profile fails validation
  4  the optimum violates the two-active-groups-per-link sharing condition
  5  numeric failure (solver stall, construction drift, failed
     certification, curvature stuck at the coupling floor)

Failures print one machine-readable JSON object on stdout, e.g.
{"error": {"code": 3, "kind": "validation", "message": "..."}}.

Seed sweeps parallelize across instances with a process pool; the MECH_THREADS
environment variable caps the worker count (1 disables the pool).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .centralized import DEFAULT_TOL, check_a4, solution_to_dict, solve_cp
from .equilibrium import (br_dynamics, certify_ne, construct_ne,
                          default_epsilon, lemma_suite, tune_params)
from .errors import (DegenerateInstanceError, EquilibriumError,
                     InstanceFormatError, MechError, MessageShapeError,
                     SharingAssumptionError, SolverError, ValidationFailure)
from .mechanism import (MechanismParams, VARIANT_SBB, VARIANTS, evaluate,
                        outcome_to_dict, profile_from_json, profile_to_json,
                        validate_profile, zero_message)
from .model import load_instance, random_instance, require_valid, welfare

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VALIDATION = 3
EXIT_SHARING = 4
EXIT_NUMERIC = 5

DEFAULT_LEMMA_TOL = 1e-8


def _error_code(exc: Exception) -> Tuple[int, str]:
    if isinstance(exc, InstanceFormatError):
        return EXIT_INPUT, "input"
    if isinstance(exc, (ValidationFailure, MessageShapeError)):
        return EXIT_VALIDATION, "validation"
    if isinstance(exc, SharingAssumptionError):
        return EXIT_SHARING, "sharing"
    if isinstance(exc, (SolverError, EquilibriumError, DegenerateInstanceError)):
        return EXIT_NUMERIC, "numeric"
    raise exc


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": {"code": code, "kind": kind, "message": message}},
                     sort_keys=True))
    return code


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump(doc: Dict[str, object]) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write_manifest(out_dir: str, command: str, config: Dict[str, object]) -> None:
    doc = {
        "command": command,
        "package": "mcastmech",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
    }
    _write(os.path.join(out_dir, "manifest.json"), _dump(doc))


def _mech_workers(n_jobs: int) -> int:
    raw = os.environ.get("MECH_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(n_jobs, cap))


# ---------------------------------------------------------------------------
# solve

def cmd_solve(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    require_valid(instance)
    primal, dual = solve_cp(instance, tol=args.tol, init_seed=args.seed)
    a4 = check_a4(instance, primal)
    if args.require_a4 and not a4.holds:
        raise SharingAssumptionError(
            "optimum has a link with fewer than two demanding groups: "
            + ", ".join(sorted(l for l, c in a4.s_sizes.items() if c < 2)))
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "solution.json"),
           _dump(solution_to_dict(instance, primal, dual)))
    _write(os.path.join(args.out, "kkt_report.json"),
           _dump(dual.residuals.as_dict()))
    _write_manifest(args.out, "solve", {
        "instance": args.instance, "tol": args.tol, "seed": args.seed,
        "require_a4": args.require_a4, "out": args.out,
    })
    print(f"solve ok: welfare={welfare(instance, primal.x):.12g} "
          f"max_residual={dual.residuals.max_residual:.3e} a4={a4.holds}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# certify

def _params_from(args: argparse.Namespace) -> MechanismParams:
    return MechanismParams(eta=args.eta, xi=args.xi, zeta=args.zeta,
                           variant=args.variant)


def _certify_single(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    require_valid(instance)
    params = _params_from(args)
    primal, dual = solve_cp(instance, tol=args.tol)
    params, shrinks, curv = tune_params(instance, primal, dual, params)
    candidate = construct_ne(instance, primal, dual, params)
    epsilon = args.epsilon if args.epsilon is not None else \
        default_epsilon(instance, primal)
    report = certify_ne(instance, candidate, epsilon, budget=args.budget,
                        restarts=args.restarts, seed=args.seed)
    lemmas = lemma_suite(instance, candidate)
    outcome = evaluate(instance, candidate.profile, params)

    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "equilibrium_profile.json"),
           profile_to_json(candidate.profile))
    _write(os.path.join(args.out, "outcome.json"),
           _dump(outcome_to_dict(instance, outcome)))
    _write(os.path.join(args.out, "certification.json"), _dump(report.as_dict()))
    lemma_doc = lemmas.as_dict()
    _write(os.path.join(args.out, "lemmas.json"), _dump(lemma_doc))
    curv_doc = {"agents": curv.as_dict(), "all_pass": curv.all_pass,
                "auto_shrink_iterations": shrinks,
                "params": {"eta": params.eta, "xi": params.xi,
                           "zeta": params.zeta, "variant": params.variant}}
    _write(os.path.join(args.out, "curvature.json"), _dump(curv_doc))
    _write_manifest(args.out, "certify", {
        "instance": args.instance, "variant": args.variant,
        "eta": args.eta, "xi": args.xi, "zeta": args.zeta,
        "tol": args.tol, "epsilon": args.epsilon, "budget": args.budget,
        "restarts": args.restarts, "seed": args.seed,
        "lemma_tol": args.lemma_tol, "out": args.out,
    })
    worst_lemma = max(lemma_doc.values())
    print(f"certify: certified={report.certified} max_gain={report.max_gain:.6e} "
          f"epsilon={epsilon:.6e} worst_lemma={worst_lemma:.3e} "
          f"auto_shrink={shrinks}")
    if not report.certified or worst_lemma > args.lemma_tol:
        return _fail(EXIT_NUMERIC, "certification",
                     f"max deviation gain {report.max_gain:.6e} vs epsilon "
                     f"{epsilon:.6e}; worst lemma violation {worst_lemma:.3e}")
    return EXIT_OK


_SWEEP_TRIES = 25


def _sweep_one(job: Tuple) -> Dict[str, object]:
    """Worker for one sweep seed: sample an instance until the sharing
    condition holds at the optimum, then construct and certify."""
    (seed, variant, eta, xi, zeta, tol, epsilon_opt, budget, restarts,
     groups, members, links, density) = job
    row: Dict[str, object] = {"seed": seed, "status": "ok"}
    instance = primal = dual = None
    for attempt in range(_SWEEP_TRIES):
        instance_seed = seed * 1009 + attempt
        try:
            cand_inst = random_instance(instance_seed, n_groups=groups,
                                        max_group_size=members, n_links=links,
                                        density=density)
            cand_primal, cand_dual = solve_cp(cand_inst, tol=tol)
        except (ValidationFailure, SolverError):
            continue
        if check_a4(cand_inst, cand_primal).holds:
            instance, primal, dual = cand_inst, cand_primal, cand_dual
            row["instance_seed"] = instance_seed
            row["resample_tries"] = attempt
            break
    if instance is None:
        row["status"] = "skipped"
        return row
    try:
        params = MechanismParams(eta=eta, xi=xi, zeta=zeta, variant=variant)
        params, shrinks, _ = tune_params(instance, primal, dual, params)
        candidate = construct_ne(instance, primal, dual, params)
        epsilon = epsilon_opt if epsilon_opt is not None else \
            default_epsilon(instance, primal)
        report = certify_ne(instance, candidate, epsilon, budget=budget,
                            restarts=restarts, seed=seed)
        lemmas = lemma_suite(instance, candidate)
        outcome = evaluate(instance, candidate.profile, params)
        drift = max(abs(outcome.x[ki] - primal.x[ki]) for ki in instance.agents)
    except MechError as exc:
        row["status"] = f"error:{type(exc).__name__}"
        return row
    row.update({
        "agents": len(instance.agents),
        "links": len(instance.link_ids),
        "welfare": welfare(instance, primal.x),
        "epsilon": epsilon,
        "max_gain": report.max_gain,
        "certified": report.certified,
        "auto_shrink": shrinks,
        "allocation_drift": drift,
        "total_tax": outcome.total_tax,
    })
    row.update(lemmas.as_dict())
    return row


_SWEEP_COLUMNS = [
    "seed", "instance_seed", "resample_tries", "status", "agents", "links",
    "welfare", "epsilon", "max_gain", "certified", "auto_shrink",
    "allocation_drift", "total_tax", "equal_prices", "dual_feas",
    "comp_slack", "stationarity", "ir", "wbb", "sbb", "rho_consensus",
]


def _certify_sweep(args: argparse.Namespace, seeds: List[int]) -> int:
    jobs = [(seed, args.variant, args.eta, args.xi, args.zeta, args.tol,
             args.epsilon, args.budget, args.restarts, args.sweep_groups,
             args.sweep_members, args.sweep_links, args.sweep_density)
            for seed in sorted(seeds)]
    workers = _mech_workers(len(jobs))
    if workers == 1:
        rows = [_sweep_one(job) for job in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    rows.sort(key=lambda r: r["seed"])

    os.makedirs(args.out, exist_ok=True)
    sweep_path = os.path.join(args.out, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SWEEP_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    _write_manifest(args.out, "certify-sweep", {
        "seeds": sorted(seeds), "variant": args.variant,
        "eta": args.eta, "xi": args.xi, "zeta": args.zeta,
        "tol": args.tol, "epsilon": args.epsilon, "budget": args.budget,
        "restarts": args.restarts,
        "sweep_groups": args.sweep_groups, "sweep_members": args.sweep_members,
        "sweep_links": args.sweep_links, "sweep_density": args.sweep_density,
        "out": args.out,
    })
    n_cert = sum(1 for r in rows if r.get("certified") is True)
    n_ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep: {len(rows)} seeds, {n_ok} solved, {n_cert} certified "
          f"-> {sweep_path}")
    if n_cert != len(rows):
        return _fail(EXIT_NUMERIC, "certification",
                     f"{len(rows) - n_cert} of {len(rows)} sweep seeds "
                     f"not certified")
    return EXIT_OK


def cmd_certify(args: argparse.Namespace) -> int:
    if (args.seeds is None) == (args.instance is None):
        raise InstanceFormatError(
            "certify needs exactly one of --instance or --seeds")
    if args.seeds is not None:
        return _certify_sweep(args, _parse_seeds(args.seeds))
    return _certify_single(args)


def _parse_seeds(spec: str) -> List[int]:
    """Seed list syntax: '7', '1..50', or '1,4,9'."""
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        elif "," in spec:
            seeds = [int(tok) for tok in spec.split(",") if tok]
        else:
            seeds = [int(spec)]
    except ValueError as exc:
        raise InstanceFormatError(f"bad --seeds value {spec!r}") from exc
    if not seeds:
        raise InstanceFormatError(f"empty --seeds value {spec!r}")
    return seeds


# ---------------------------------------------------------------------------
# dynamics

def cmd_dynamics(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    require_valid(instance)
    params = _params_from(args)
    if args.start == "ne":
        primal, dual = solve_cp(instance, tol=args.tol)
        initial = construct_ne(instance, primal, dual, params).profile
    elif args.start == "zero":
        initial = {ki: zero_message(instance, ki, params.variant)
                   for ki in instance.agents}
    else:
        with open(args.start, "r", encoding="utf-8") as fh:
            initial = profile_from_json(fh.read(), instance)
        validate_profile(instance, initial, params.variant)

    epsilon = args.epsilon if args.epsilon is not None else 1e-8
    result = br_dynamics(instance, initial, params, rounds=args.rounds,
                         schedule=args.schedule, epsilon=epsilon,
                         budget=args.budget, restarts=args.restarts,
                         seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    traj_path = os.path.join(args.out, "trajectory.csv")
    with open(traj_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["round", "agent", "y", "x", "tax", "gain", "feasible"])
        writer.writeheader()
        for row in result.rows:
            writer.writerow(row)
    _write(os.path.join(args.out, "dynamics.json"), _dump({
        "fixed_point": result.fixed_point,
        "rounds_run": result.rounds_run,
        "schedule": args.schedule,
    }))
    _write(os.path.join(args.out, "final_profile.json"),
           profile_to_json(result.final_profile))
    _write_manifest(args.out, "dynamics", {
        "instance": args.instance, "variant": args.variant,
        "eta": args.eta, "xi": args.xi, "zeta": args.zeta,
        "tol": args.tol, "epsilon": args.epsilon, "budget": args.budget,
        "restarts": args.restarts, "seed": args.seed, "rounds": args.rounds,
        "schedule": args.schedule, "start": args.start, "out": args.out,
    })
    print(f"dynamics: rounds_run={result.rounds_run} "
          f"fixed_point={result.fixed_point} -> {traj_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing

def _positive(name: str):
    def convert(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number")
        if not v > 0.0:
            raise argparse.ArgumentTypeError(f"{name} must be positive")
        return v
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcastmech",
        description="Multicast rate-allocation mechanisms: solve, certify, "
                    "and run best-response dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_instance=True):
        if needs_instance:
            p.add_argument("--instance", required=True,
                           help="instance JSON file")
        p.add_argument("--tol", type=_positive("tol"), default=DEFAULT_TOL,
                       help="solver KKT residual target")
        p.add_argument("--out", default=".", help="output directory")

    def mech(p):
        p.add_argument("--variant", choices=list(VARIANTS), default="wbb")
        p.add_argument("--eta", type=_positive("eta"), default=1e-2)
        p.add_argument("--xi", type=_positive("xi"), default=1e-2)
        p.add_argument("--zeta", type=_positive("zeta"), default=1e-2)
        p.add_argument("--epsilon", type=_positive("epsilon"), default=None,
                       help="certification threshold (default 1e-6 * max "
                            "valuation at the optimum)")
        p.add_argument("--budget", type=int, default=1000,
                       help="utility evaluations per agent search")
        p.add_argument("--restarts", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)

    p_solve = sub.add_parser("solve", help="welfare optimum + dual certificate")
    common(p_solve)
    p_solve.add_argument("--seed", type=int, default=None,
                         help="jitter the interior starting point")
    p_solve.add_argument("--require-a4", action="store_true",
                         help="exit 4 unless every link has two demanding "
                              "groups at the optimum")
    p_solve.set_defaults(func=cmd_solve)

    p_cert = sub.add_parser("certify",
                            help="construct the candidate equilibrium and "
                                 "search for profitable deviations")
    p_cert.add_argument("--instance", help="instance JSON file")
    p_cert.add_argument("--seeds", help="sweep seeds: '7', '1..50', or '1,4,9'")
    p_cert.add_argument("--tol", type=_positive("tol"), default=DEFAULT_TOL)
    p_cert.add_argument("--out", default=".")
    mech(p_cert)
    p_cert.add_argument("--lemma-tol", type=_positive("lemma-tol"),
                        default=DEFAULT_LEMMA_TOL,
                        help="max allowed lemma violation for exit 0")
    p_cert.add_argument("--sweep-groups", type=int, default=3)
    p_cert.add_argument("--sweep-members", type=int, default=3)
    p_cert.add_argument("--sweep-links", type=int, default=3)
    p_cert.add_argument("--sweep-density", type=float, default=0.7)
    p_cert.set_defaults(func=cmd_certify)

    p_dyn = sub.add_parser("dynamics", help="iterated best-response rounds")
    common(p_dyn)
    mech(p_dyn)
    p_dyn.add_argument("--rounds", type=int, default=50)
    p_dyn.add_argument("--schedule", choices=["gauss-seidel", "jacobi"],
                       default="gauss-seidel")
    p_dyn.add_argument("--start", default="ne",
                       help="'ne', 'zero', or a profile JSON file")
    p_dyn.set_defaults(func=cmd_dynamics)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        return _fail(EXIT_INPUT, "input", f"cannot read or write: {exc}")
    except MechError as exc:
        code, kind = _error_code(exc)
        return _fail(code, kind, str(exc))


if __name__ == "__main__":
    sys.exit(main())
