"""Command-line front end.

Exit codes: 0 success, 1 infeasible program, 2 unusable input (parse or
usage error), 3 solver failure.  ``DERCONTROL_THREADS`` sets the number of
concurrent sweep points (default 1).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .assembly import assemble
from .scenario import ScenarioError, check_assumption1
from .simulate import (TRUE_FAMILIES, FastDisturbanceModel, estimate_cost_ci, fast_rollout, rollout,
                       write_bands_csv, write_costs_csv, write_violations_csv)
from .synthesis import (AffinePolicy, InfeasibleProgramError, SynthesisError, compute_lower_bound,
                        read_policy, synthesize_policy, write_policy)

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3
THREADS_ENV = "DERCONTROL_THREADS"


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load(path):
    try:
        cfg = cfgmod.load(path)
        sc = cfg.scenario()
        ls = assemble(sc)
    except cfgmod.ConfigError as e:
        raise _Fail(EXIT_USAGE, f"error: {e}") from e
    except ScenarioError as e:
        raise _Fail(EXIT_USAGE, f"error: {path}: {e}") from e
    return cfg, sc, ls


def _solve_errors(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except InfeasibleProgramError as e:
        rows = "; ".join(f"{f} bus {b} t={t}" for f, b, t in e.rows) or "n/a"
        raise _Fail(EXIT_INFEASIBLE, f"infeasible: {e}\n  rows implicated: {rows}") from e
    except SynthesisError as e:
        raise _Fail(EXIT_SOLVER, f"solver failure: {e}") from e


def _report_line(rep):
    return (f"QP: {rep.n_vars} variables, {rep.n_ineq} inequalities, {rep.n_eq} equalities; "
            f"{rep.status} after {rep.iterations} iterations in {rep.seconds:.2f} s")


def cmd_validate(args):
    cfg, sc, ls = _load(args.config)
    print(f"{args.config}: ok")
    print(f"  buses n = {ls.n}, periods T = {ls.T}, delta = {ls.delta} h")
    print(f"  N_u = {ls.N_u}, N_xi = {ls.N_xi}, constraint rows m = {ls.m}")
    print(f"  free policy entries = {int(ls.S_mask.sum())} ({int((ls.S_mask & ls.input_active[:, None]).sum())} on active channels)")
    print(f"  independent disturbances (lower bound certified): {check_assumption1(sc.disturbance)}")
    return EXIT_OK


def cmd_synthesize(args):
    cfg, sc, ls = _load(args.config)
    t0 = time.perf_counter()
    pol = _solve_errors(synthesize_policy, ls, sc.disturbance, settings=cfg.qp_settings())
    elapsed = time.perf_counter() - t0
    write_policy(pol, args.output)
    print(f"J_in = {pol.J_in:.10g} MWh")
    print(f"n = {ls.n}, T = {ls.T}, N_u = {ls.N_u}, N_xi = {ls.N_xi}, free entries = {int(pol.mask.sum())}")
    print(_report_line(pol.solver_report))
    print(f"total time {elapsed:.2f} s; policy written to {args.output}")
    return EXIT_OK


def cmd_bound(args):
    cfg, sc, ls = _load(args.config)
    lb = _solve_errors(compute_lower_bound, ls, sc.disturbance, settings=cfg.qp_settings())
    if lb.assumption1_certified:
        print(f"J_out = {lb.J_out:.10g} MWh: lower bound on the optimal expected cost J*")
    else:
        print(f"J_out = {lb.J_out:.10g} MWh: relaxation value only; the disturbance model is not "
              "certified, so no bound on J* is claimed")
    print(_report_line(lb.solver_report))
    if args.with_upper:
        pol = _solve_errors(synthesize_policy, ls, sc.disturbance, settings=cfg.qp_settings())
        gap = pol.J_in - lb.J_out
        print(f"J_in = {pol.J_in:.10g} MWh, gap = {gap:.6g} MWh ({gap / max(abs(lb.J_out), 1e-9):.3e} relative)")
        if lb.assumption1_certified and lb.J_out > pol.J_in + 1e-6 * (1 + abs(pol.J_in)):
            raise _Fail(EXIT_SOLVER, "inconsistent bounds: J_out exceeds J_in")
    return EXIT_OK


def cmd_simulate(args):
    cfg, sc, ls = _load(args.config)
    if args.zero_policy:
        policy = AffinePolicy.zero(ls)
        label = "zero policy"
    else:
        try:
            policy = read_policy(args.policy)
        except (OSError, ValueError) as e:
            raise _Fail(EXIT_USAGE, f"error: cannot load policy: {e}") from e
        if (policy.n, policy.T) != (ls.n, ls.T):
            raise _Fail(EXIT_USAGE, f"error: policy is for n={policy.n}, T={policy.T}; config has n={ls.n}, T={ls.T}")
        label = f"policy {args.policy}"
    n_samples = args.samples or cfg.samples
    seed = cfg.seed if args.seed is None else args.seed
    if n_samples < 2:
        raise _Fail(EXIT_USAGE, "error: need at least 2 samples")
    try:
        if args.fast:
            fdm = FastDisturbanceModel(sc.disturbance, args.fast, law=args.fast_law)
            batch = fast_rollout(policy, ls, fdm, args.fast, n_samples, seed)
        else:
            batch = rollout(policy, ls, sc.disturbance, n_samples, seed)
    except ScenarioError as e:
        raise _Fail(EXIT_USAGE, f"error: {e}") from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_costs_csv(batch, out / "costs.csv")
    write_violations_csv(batch, out / "violations.csv")
    write_bands_csv(batch, out / "bands.csv")
    mean, hw = estimate_cost_ci(batch)
    scale = f", K = {args.fast} sub-periods" if args.fast else ""
    print(f"{label}: {n_samples} samples, seed {seed}{scale}")
    print(f"expected cost {mean:.8g} MWh +/- {hw:.3g} (99% CI)")
    if math.isfinite(policy.J_in):
        print(f"J_in from policy file {policy.J_in:.8g} MWh")
    print(f"samples with a violation: {int(batch.sample_violated.sum())}")
    for fam in TRUE_FAMILIES:
        tot = batch.family_total(fam)
        if tot:
            print(f"  {fam}: {tot} (bus, t) violations, worst {batch.worst[fam].max():.4g}")
    print(f"CSV files written to {out}")
    return EXIT_OK


def _sweep_point(cfg, name, value):
    sub = cfg.with_sweep_value(name, value)
    try:
        sc = sub.scenario()
        ls = assemble(sc)
    except (cfgmod.ConfigError, ScenarioError) as e:
        return value, None, None, f"input error: {e}"
    settings = sub.qp_settings()
    try:
        pol = synthesize_policy(ls, sc.disturbance, settings=settings)
        lb = compute_lower_bound(ls, sc.disturbance, settings=settings)
    except InfeasibleProgramError as e:
        return value, None, None, f"infeasible: {e}"
    except SynthesisError as e:
        return value, None, None, f"solver failure: {e}"
    return value, pol.J_in, lb.J_out, ""


def cmd_sweep(args):
    try:
        cfg = cfgmod.load(args.config)
        name, grid = cfg.sweep()
    except cfgmod.ConfigError as e:
        raise _Fail(EXIT_USAGE, f"error: {e}") from e
    if args.parameter:
        if args.parameter not in cfgmod.SWEEP_PARAMETERS:
            raise _Fail(EXIT_USAGE, f"error: unknown sweep parameter {args.parameter!r}")
        name = args.parameter
    if args.grid is not None:
        try:
            grid = [float(v) for v in args.grid.split(",") if v.strip()]
        except ValueError as e:
            raise _Fail(EXIT_USAGE, f"error: bad --grid: {e}") from e
    if not grid:
        raise _Fail(EXIT_USAGE, "error: the sweep grid is empty")
    threads = max(1, int(os.environ.get(THREADS_ENV, "1") or 1))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda v: _sweep_point(cfg, name, v), grid))
    header = [name, "J_in", "J_out", "gap", "gap_rel", "note"]
    table = []
    worst = EXIT_OK
    for value, j_in, j_out, note in rows:
        if j_in is None:
            table.append([repr(value), "nan", "nan", "nan", "nan", note])
            worst = max(worst, EXIT_SOLVER if note.startswith("solver") else EXIT_INFEASIBLE)
            continue
        gap = j_in - j_out
        table.append([repr(value), repr(j_in), repr(j_out), repr(gap), repr(gap / max(abs(j_out), 1e-9)), note])
    if args.output:
        with open(args.output, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(table)
    print(f"{name:>10} {'J_in':>14} {'J_out':>14} {'gap':>12} {'gap/J_out':>10}")
    for value, j_in, j_out, note in rows:
        if j_in is None:
            print(f"{value:>10.4g} {note}")
        else:
            gap = j_in - j_out
            print(f"{value:>10.4g} {j_in:>14.8g} {j_out:>14.8g} {gap:>12.4g} {gap / max(abs(j_out), 1e-9):>10.3e}")
    return worst


def build_parser():
    p = argparse.ArgumentParser(prog="dercontrol", description="Decentralized storage and inverter control for radial feeders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a scenario file")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("synthesize", help="compute the robust affine policy and J_in")
    s.add_argument("config")
    s.add_argument("-o", "--output", default="policy.txt", help="policy file to write")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("bound", help="compute the lower bound J_out")
    s.add_argument("config")
    s.add_argument("--with-upper", action="store_true", help="also synthesize and report the gap")
    s.set_defaults(func=cmd_bound)

    s = sub.add_parser("simulate", help="Monte Carlo evaluation of a policy")
    s.add_argument("config")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--policy", help="policy file written by 'synthesize'")
    g.add_argument("--zero-policy", action="store_true", help="leave all devices idle")
    s.add_argument("-n", "--samples", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--fast", type=int, default=0, metavar="K", help="simulate K sub-periods per period")
    s.add_argument("--fast-law", choices=("uniform", "slow"), default="uniform",
                   help="sub-period law: uniform on the period box, or the slow law")
    s.add_argument("--out", default=".", help="directory for the CSV files")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="J_in and J_out over a parameter grid")
    s.add_argument("config")
    s.add_argument("--parameter", default=None, choices=sorted(cfgmod.SWEEP_PARAMETERS))
    s.add_argument("--grid", default=None, help="comma-separated values (overrides [sweep] grid)")
    s.add_argument("-o", "--output", default=None, help="CSV table to write")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as e:
        print(str(e), file=sys.stderr)
        return e.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
