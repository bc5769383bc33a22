"""Command line front end: ``synth``, ``run``, ``bench`` and ``verify``.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 requested
radius too large, 4 closed loop lost feasibility.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .chain import BenchConfig, chain_problem, format_config, load_config, parse_config
from .contraction import max_inner_radius, select_beta, synthesize, verify_design
from .controller import INPUT_ONLY, MODES, NOMINAL, TIGHTENED, ControllerConfig
from .errors import (
    EmptyMargin,
    Infeasible,
    InvalidBeta,
    NotContractive,
    NotStabilizable,
    RadiusTooLarge,
    StageInfeasible,
)
from .io import design_from_dict, design_to_dict, load_design, save_design
from .model import lqr_gain, spectral_radius, validate_problem
from .simulation import performance_gap, simulate_closed_loop, simulate_exact, write_trace_csv

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RADIUS, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

BENCH_COLUMNS = ["m_bar", "J_exact", "J_rfrti", "J_rti", "gap_rfrti", "gap_rfrti_vs_rti", "seed"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for validation here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x):
    return format(float(x), ".17g")


def _err(msg):
    print(msg, file=sys.stderr)


def _load_cfg(path) -> BenchConfig:
    if path is None:
        return BenchConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc


def _problem(cfg):
    p = chain_problem(cfg)
    problems = validate_problem(p)
    if problems:
        raise ValueError("; ".join(problems))
    return p


def _design_for(cfg, problem, design_path):
    """Design from a file, or synthesized from the config when no file is given."""
    if design_path is None:
        design, margins = synthesize(problem, beta=cfg.beta, r=cfg.r, alpha=cfg.alpha, r_fraction=cfg.r_fraction)
        return design, margins
    try:
        design, margins, _ = load_design(design_path)
    except OSError as exc:
        raise UsageError(f"cannot read design: {exc}") from exc
    if margins.N != problem.N or design.K.shape != (problem.n_u, problem.n_x):
        raise ValueError("design does not match the configured problem")
    return design, margins


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(config_path, out_path) -> int:
    cfg = _load_cfg(config_path)
    try:
        p = _problem(cfg)
        design, margins = synthesize(p, beta=cfg.beta, r=cfg.r, alpha=cfg.alpha, r_fraction=cfg.r_fraction)
    except RadiusTooLarge as exc:
        K = lqr_gain(p.system.A, p.system.B, p.R, p.P)
        beta = select_beta(p.system, K, cfg.beta)
        alpha = cfg.alpha if cfg.alpha is not None else beta**p.N
        r_max = max_inner_radius(p.system, K, beta, alpha, p.X, p.U)
        _err(f"RadiusTooLarge: {exc}")
        print(f"suggested r <= {r_max:.10g}")
        return EXIT_RADIUS
    except (InvalidBeta, NotContractive, NotStabilizable, EmptyMargin, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    failed = [name for name, ok, _ in verify_design(design, p, margins) if not ok]
    if failed:
        _err("design checks failed: " + ", ".join(failed))
        return EXIT_INVALID
    rho = spectral_radius(p.system.closed_loop(design.K))
    print(f"rho(A+BK) = {rho:.10g}")
    print(f"beta      = {design.beta:.10g}")
    print(f"r         = {design.r:.10g}")
    print(f"alpha     = {design.alpha:.10g}")
    print(f"sigma     = {design.sigma:.10g}")
    print(f"trace(Z)  = {design.trace:.10g}")
    if out_path is not None:
        save_design(out_path, design, margins, cfg)
        print(f"design written to {out_path}")
    return EXIT_OK


def cmd_run(config_path, design_path, mode, m_bar, out_csv, seed=None, workers=1) -> int:
    cfg = _load_cfg(config_path)
    try:
        p = _problem(cfg)
        design = margins = None
        if mode == TIGHTENED:
            design, margins = _design_for(cfg, p, design_path)
    except RadiusTooLarge as exc:
        _err(f"RadiusTooLarge: {exc}")
        return EXIT_RADIUS
    except (InvalidBeta, NotContractive, NotStabilizable, EmptyMargin, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    m_bar = m_bar or max(cfg.m_bar_sweep)
    ctrl = ControllerConfig(m_bar=m_bar, mode=mode, qp_tol=cfg.qp_tol, design=design, margins=margins, workers=workers)
    try:
        trace = simulate_closed_loop(ctrl, p, cfg.x0(seed), t_max=cfg.t_max, eps_stop=cfg.eps_stop)
    except StageInfeasible as exc:
        _err(f"feasibility lost at step {exc.step} (stage QP {exc.stage} infeasible)")
        return EXIT_INFEASIBLE
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            write_trace_csv(trace, fh)
    feasible = "yes" if trace.feasible else "no"
    print(f"J_inf = {trace.j_infinity:.17g}  steps = {trace.steps}  converged: {'yes' if trace.converged else 'no'}  feasible: {feasible}")
    if not trace.feasible:
        bad = int(np.flatnonzero(~(trace.feasible_x & trace.feasible_u))[0])
        print(f"first constraint violation at step {bad}")
        # state constraints are only promised when they are part of the controller
        if mode != INPUT_ONLY:
            return EXIT_INFEASIBLE
    return EXIT_OK


def _exact_task(cfg_text, seed):
    cfg = parse_config(cfg_text)
    p = chain_problem(cfg)
    tr = simulate_exact(p, cfg.x0(seed), mode=NOMINAL, t_max=cfg.t_max, eps_stop=cfg.eps_stop, tol=cfg.ref_tol)
    return tr.j_infinity


def _seconds_per_iteration(trace):
    total, count = 0.0, 0
    for _, _, records in trace.records:
        total += sum(r.seconds for r in records)
        count += len(records)
    return total / max(count, 1)


def _sweep_task(cfg_text, design_dict, m_bar, seed):
    """RFRTI and heuristic RTI closed loops for one sweep entry."""
    cfg = parse_config(cfg_text)
    p = chain_problem(cfg)
    design, margins, _ = design_from_dict(design_dict)
    x0 = cfg.x0(seed)
    out = {}
    for name, mode in (("rfrti", TIGHTENED), ("rti", INPUT_ONLY)):
        ctrl = ControllerConfig(m_bar=m_bar, mode=mode, qp_tol=cfg.qp_tol, design=design, margins=margins)
        tr = simulate_closed_loop(ctrl, p, x0, t_max=cfg.t_max, eps_stop=cfg.eps_stop)
        out[name] = (tr.j_infinity, _seconds_per_iteration(tr), tr.feasible)
    return out


def run_bench(cfg: BenchConfig, design=None, margins=None, workers=1):
    """Run the m_bar sweep; returns ``(rows, timings)`` ordered by seed then m_bar."""
    p = _problem(cfg)
    if design is None:
        design, margins = synthesize(p, beta=cfg.beta, r=cfg.r, alpha=cfg.alpha, r_fraction=cfg.r_fraction)
    text = format_config(cfg)
    ddict = design_to_dict(design, margins)
    sweep = sorted(set(int(m) for m in cfg.m_bar_sweep))
    seeds = list(cfg.seeds)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        submit = pool.submit if pool is not None else _Immediate
        exact = {s: submit(_exact_task, text, s) for s in seeds}
        runs = {(s, m): submit(_sweep_task, text, ddict, m, s) for s in seeds for m in sweep}
        rows, timings = [], []
        for s in seeds:
            j_exact = exact[s].result()
            for m in sweep:
                res = runs[(s, m)].result()
                j_rf, t_rf, _ = res["rfrti"]
                j_rti, t_rti, _ = res["rti"]
                rows.append([m, j_exact, j_rf, j_rti, performance_gap(j_rf, j_exact), performance_gap(j_rf, j_rti), s])
                timings.append([m, s, t_rf, t_rti])
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return rows, timings


class _Immediate:
    """Future-like wrapper for in-process evaluation."""

    def __init__(self, fn, *args):
        self._exc = None
        try:
            self._value = fn(*args)
        except Exception as exc:  # re-raised on result() like a real future
            self._exc = exc

    def result(self):
        if self._exc is not None:
            raise self._exc
        return self._value


def write_bench_csv(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for m, je, jf, jr, g1, g2, s in rows:
        w.writerow([m, _fmt(je), _fmt(jf), _fmt(jr), _fmt(g1), _fmt(g2), s])


def write_timing_csv(timings, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["m_bar", "seed", "seconds_per_iteration_rfrti", "seconds_per_iteration_rti"])
    for m, s, a, b in timings:
        w.writerow([m, s, format(a, ".6g"), format(b, ".6g")])


def cmd_bench(config_path, out_csv, design_path=None, workers=1, seed=None) -> int:
    cfg = _load_cfg(config_path)
    if seed is not None:
        cfg.seeds = [seed]
    try:
        p = _problem(cfg)
        design, margins = _design_for(cfg, p, design_path)
        rows, timings = run_bench(cfg, design, margins, workers=workers)
    except RadiusTooLarge as exc:
        _err(f"RadiusTooLarge: {exc}")
        return EXIT_RADIUS
    except StageInfeasible as exc:
        _err(f"feasibility lost at step {exc.step} (stage QP {exc.stage} infeasible)")
        return EXIT_INFEASIBLE
    except Infeasible as exc:
        _err(f"Infeasible: {exc}")
        return EXIT_INFEASIBLE
    except (InvalidBeta, NotContractive, NotStabilizable, EmptyMargin, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    if out_csv is None:
        write_bench_csv(rows, sys.stdout)
    else:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            write_bench_csv(rows, fh)
        # wall times vary run to run, so they live next to the CSV, not in it
        with open(out_csv + ".timing.csv", "w", newline="", encoding="utf-8") as fh:
            write_timing_csv(timings, fh)
    for m, je, jf, jr, g1, g2, s in rows:
        print(f"m_bar={m:<4d} gap_rfrti={g1:+.3e}  gap_rfrti_vs_rti={g2:+.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(design_path, config_path=None) -> int:
    try:
        design, margins, cfg = load_design(design_path)
    except OSError as exc:
        raise UsageError(f"cannot read design: {exc}") from exc
    except (ValueError, KeyError) as exc:
        _err(f"invalid design file: {exc}")
        return EXIT_INVALID
    if config_path is not None:
        cfg = _load_cfg(config_path)
    if cfg is None:
        raise UsageError("design file has no embedded config; pass --config")
    try:
        p = _problem(cfg)
    except (NotStabilizable, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INVALID
    if margins.N != p.N or design.K.shape != (p.n_u, p.n_x):
        _err("design does not match the configured problem")
        return EXIT_INVALID
    rows = verify_design(design, p, margins)
    for name, ok, slack in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<20s} slack = {slack:+.3e}")
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_INVALID


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="rfmpc", description="Parallel real-time MPC with tightened margins.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="offline synthesis; writes a design file")
    s.add_argument("--config")
    s.add_argument("--out")

    r = sub.add_parser("run", help="closed-loop run; writes a trace CSV")
    r.add_argument("--config")
    r.add_argument("--design")
    r.add_argument("--mode", choices=MODES, default=TIGHTENED)
    r.add_argument("--mbar", type=int)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, default=1)

    b = sub.add_parser("bench", help="m_bar sweep against exact MPC and plain RTI")
    b.add_argument("--config")
    b.add_argument("--design")
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int, default=1)

    v = sub.add_parser("verify", help="check the invariants of a design file")
    v.add_argument("--design", required=True)
    v.add_argument("--config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.config, args.out)
        if args.command == "run":
            if args.mbar is not None and args.mbar < 1:
                raise UsageError("--mbar must be >= 1")
            return cmd_run(args.config, args.design, args.mode, args.mbar, args.out, args.seed, args.workers)
        if args.command == "bench":
            return cmd_bench(args.config, args.out, args.design, args.workers, args.seed)
        return cmd_verify(args.design, args.config)
    except UsageError as exc:
        _err(f"rfmpc: error: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        # malformed config values
        _err(f"ValueError: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
