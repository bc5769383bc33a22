"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records a one-line PASS/FAIL verdict that is printed in the
terminal summary. Run on its own with

    pytest tests/test_acceptance.py -v

The full-scale part of criterion 6 takes several minutes.
"""
import io
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_stabilizable
from oracles import consensus_kkt_oracle, enumerate_box_qp, random_admissible, random_design, random_pd
from rfmpc.chain import BenchConfig, build_chain, chain_problem
from rfmpc.cli import run_bench, write_bench_csv
from rfmpc.contraction import (
    check_certificate,
    ellipsoid_norm2,
    shift_certificate,
    synthesize,
)
from rfmpc.controller import (
    TIGHTENED,
    ControllerConfig,
    IterateTriple,
    ParallelMpc,
    delta,
    fit_geometric,
    applied_error_bound,
    min_iterations,
)
from rfmpc.model import LtiSystem, PolyhedralSet, make_problem
from rfmpc.qp import DenseQp, solve_consensus, solve_dense_qp
from rfmpc.simulation import RtiPolicy, performance_gap, simulate_closed_loop, simulate_exact, simulate_policy, solve_reference

pytestmark = pytest.mark.acceptance

REDUCED = dict(n_carts=5, N=20, x0_scale=1.5, m_bar_sweep=[1, 5, 10, 25, 50])


def record(n, ok, detail, seconds, budget=None):
    over = budget is not None and seconds > budget
    verdict = "PASS" if ok and not over else "FAIL"
    timing = f"{seconds:.1f}s" + (f" (budget {budget:.0f}s)" if budget is not None else "")
    line = f"criterion {n}: {verdict}  {detail}  [{timing}]"
    ACCEPTANCE_LINES[str(n)] = line
    print(line)
    return ok and not over


# ---------------------------------------------------------------------------
# shared reduced-chain fixtures


@pytest.fixture(scope="module")
def reduced():
    cfg = BenchConfig(**REDUCED)
    p = chain_problem(cfg)
    design, margins = synthesize(p)
    return cfg, p, design, margins


@pytest.fixture(scope="module")
def convergence_run(reduced):
    """60 cold-start inner iterations at the benchmark state, tightened mode."""
    cfg, p, design, margins = reduced
    x0 = cfg.x0()
    ref = solve_reference(x0, p, mode=TIGHTENED, margins=margins, tol=1e-12)
    x1_star = p.system.step(x0, ref.u[0])
    solver = ParallelMpc(p, TIGHTENED, margins)
    it = IterateTriple.zeros(p.N, p.n_x, p.n_u)
    it.z[0] = x0
    d0 = delta(it, ref.triple, p)
    deltas, err_stage, err_cons = [], [], []
    for _ in range(60):
        it, u_stage, _, _ = solver.iterate(it, x0)
        deltas.append(delta(it, ref.triple, p))
        err_stage.append(np.linalg.norm(p.system.step(x0, u_stage) - x1_star))
        err_cons.append(np.linalg.norm(p.system.step(x0, it.v[0]) - x1_star))
    return dict(d0=d0, deltas=np.array(deltas), err_stage=np.array(err_stage), err_cons=np.array(err_cons))


@pytest.fixture(scope="module")
def reduced_bench(reduced):
    cfg, p, design, margins = reduced
    t0 = time.perf_counter()
    rows, _ = run_bench(cfg, design, margins, workers=1)
    return rows, time.perf_counter() - t0


# ---------------------------------------------------------------------------


def test_criterion_1_chain_dimensions():
    t0 = time.perf_counter()
    cfg = BenchConfig()
    system, X, U = build_chain(cfg)
    count = (cfg.N + 1) * system.n_x + cfg.N * system.n_u
    p = make_problem(system, X, U, np.eye(system.n_x), np.eye(system.n_u), cfg.N, P=np.eye(system.n_x))
    ok = count == 18120 and p.n_variables == 18120 and (system.n_x, system.n_u) == (120, 60)
    assert record(1, ok, f"n_x={system.n_x} n_u={system.n_u} variables={p.n_variables}", time.perf_counter() - t0, 1.0)


def _eq10_slacks(design, p):
    """The four ellipsoid conditions, computed here independently of verify_design."""
    Acl = p.system.A + p.system.B @ design.K
    Z, b, a = design.Z, design.beta, design.alpha
    lmi = np.linalg.eigvalsh(b**2 * Z - Acl @ Z @ Acl.T)[0] / max(1.0, np.linalg.norm(Z, 2))
    radius = np.linalg.eigvalsh(Z)[0] - design.r**2 * (1 - 1e-9)
    C, c = p.X.G, p.X.g
    D, d = p.U.G, p.U.g
    rows_x = np.min((1 + a) ** -2 * c**2 - np.einsum("ij,jk,ik->i", C, Z, C)) / max(1.0, c.max() ** 2)
    DK = D @ design.K
    rows_u = np.min((1 + a) ** -2 * d**2 - np.einsum("ij,jk,ik->i", DK, Z, DK)) / max(1.0, d.max() ** 2)
    return lmi, radius, rows_x, rows_u


def test_criterion_2_contraction_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    problems = []
    for _ in range(100):
        n_x = int(rng.integers(1, 7))
        n_u = int(rng.integers(1, min(3, n_x) + 1))
        A, B = random_stabilizable(rng, n_x, n_u)
        X = PolyhedralSet.box(n_x, rng.uniform(0.5, 5.0))
        U = PolyhedralSet.box(n_u, rng.uniform(0.5, 5.0))
        problems.append(make_problem(LtiSystem(A, B), X, U, np.eye(n_x), np.eye(n_u), int(rng.integers(5, 50))))
    for n in range(1, 6):
        problems.append(chain_problem(BenchConfig(n_carts=n, N=20)))
    worst = np.full(4, np.inf)
    for p in problems:
        design, _ = synthesize(p, r_fraction=rng.uniform(0.05, 0.95))
        worst = np.minimum(worst, _eq10_slacks(design, p))
    ok = worst[0] >= -1e-9 and worst[1] >= 0 and worst[2] >= -1e-9 and worst[3] >= -1e-9
    detail = f"{len(problems)} designs, worst slacks lmi={worst[0]:.2e} radius={worst[1]:.2e} state={worst[2]:.2e} input={worst[3]:.2e}"
    assert record(2, ok, detail, time.perf_counter() - t0, 30.0)


def test_criterion_3_certificate_shift():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    failures, worst_ratio = 0, 0.0
    for trial in range(1000):
        if trial % 4 == 0:
            p = chain_problem(BenchConfig(n_carts=int(rng.integers(1, 4)), N=int(rng.integers(5, 16))))
            design, margins = synthesize(p, r_fraction=rng.uniform(0.1, 0.9))
        else:
            p, design, margins = random_design(rng)
        cert = random_admissible(rng, p, design, margins)
        d = rng.standard_normal(p.n_x)
        d *= (1 - design.beta) * design.r * rng.uniform() / np.linalg.norm(d)
        x_plus = p.system.step(cert.y[0], cert.w[0]) + d
        new = shift_certificate(cert, x_plus, design.K, p.system)
        if not check_certificate(new, margins, design.Z, design.alpha, x_plus, new.w[0], p.system, p.X, p.U):
            failures += 1
        Acl = p.system.closed_loop(design.K)
        ext = np.vstack([cert.y[1:], Acl @ cert.y[-1]])
        for k in range(p.N + 1):
            q = ellipsoid_norm2(new.y[k] - ext[k], design.Z)
            budget = (design.beta**k * (1 - design.beta)) ** 2
            worst_ratio = max(worst_ratio, q / budget)
    ok = failures == 0 and worst_ratio <= 1 + 1e-6
    detail = f"1000 trials, certificate failures={failures}, worst inclusion ratio={worst_ratio:.6f}"
    assert record(3, ok, detail, time.perf_counter() - t0, 60.0)


def test_criterion_4_convergence(reduced, convergence_run):
    t0 = time.perf_counter()
    _, _, design, _ = reduced
    run = convergence_run
    fit = fit_geometric(run["deltas"][5:])
    kappa = 1.1 * fit.kappa
    bound = np.array([applied_error_bound(kappa, design.sigma, m, run["d0"]) for m in range(1, 61)])
    viol = int(np.sum(run["err_stage"] > bound) + np.sum(run["err_cons"] > bound))
    ok = fit.kappa < 1 and fit.r_squared >= 0.99 and viol == 0
    detail = f"kappa_hat={fit.kappa:.4f} R2={fit.r_squared:.4f} (need >= 0.99) bound violations={viol}"
    record(4, ok, detail, time.perf_counter() - t0, 120.0)
    assert fit.kappa < 1 and viol == 0
    assert fit.r_squared >= 0.99, detail


def test_criterion_5_recursive_feasibility(reduced, convergence_run):
    t0 = time.perf_counter()
    cfg, p, design, margins = reduced
    kappa = fit_geometric(convergence_run["deltas"][5:]).kappa

    def rule(d0):
        return min_iterations(kappa, design.beta, design.r, design.sigma, d0)

    ctrl = ControllerConfig(m_bar=1, mode=TIGHTENED, design=design, margins=margins)
    policy = RtiPolicy(ctrl, p, reference_mode=TIGHTENED, m_bar_rule=rule)
    infeasible_events = 0
    try:
        trace = simulate_policy(policy, p, cfg.x0(), t_max=200, eps_stop=0.0)
        violations = int(np.sum(~trace.feasible_x) + np.sum(~trace.feasible_u))
        steps = trace.steps
    except Exception as exc:  # StageInfeasible counts as a failed criterion
        infeasible_events, violations, steps = 1, -1, getattr(exc, "step", -1)
    finally:
        policy.solver.close()
    m_bars = [m for _, m, _ in policy.log]
    ok = steps == 200 and violations == 0 and infeasible_events == 0
    detail = f"steps={steps} violations={violations} stage_infeasible={infeasible_events} m_bar range=[{min(m_bars)}, {max(m_bars)}]"
    assert record(5, ok, detail, time.perf_counter() - t0, 300.0)


def test_criterion_6_reduced_trend(reduced_bench):
    rows, seconds = reduced_bench
    gaps = np.array([r[4] for r in rows])
    monotone = bool(np.all(np.diff(gaps) <= 1e-8))
    ok = monotone and gaps[-1] <= 1e-4 and all(g >= -1e-8 for g in gaps)
    detail = "reduced gaps " + " ".join(f"m{r[0]}={r[4]:.2e}" for r in rows)
    record("6a", ok, detail, seconds)
    assert ok, detail


@pytest.mark.slow
def test_criterion_6_full_scale():
    t0 = time.perf_counter()
    cfg = BenchConfig(x0_scale=1.5)
    p = chain_problem(cfg)
    design, margins = synthesize(p)
    x0 = cfg.x0()
    exact = simulate_exact(p, x0, t_max=cfg.t_max, eps_stop=cfg.eps_stop)
    ctrl = ControllerConfig(m_bar=25, mode=TIGHTENED, design=design, margins=margins)
    rfrti = simulate_closed_loop(ctrl, p, x0, t_max=cfg.t_max, eps_stop=cfg.eps_stop)
    gap = performance_gap(rfrti.j_infinity, exact.j_infinity)
    ok = -1e-8 <= gap <= 5e-3 and rfrti.feasible
    detail = f"n=60 N=100 m_bar=25 J_exact={exact.j_infinity:.6f} J_rfrti={rfrti.j_infinity:.6f} gap={gap:.3e} feasible={rfrti.feasible}"
    assert record("6b", ok, detail, time.perf_counter() - t0, 900.0)


def test_criterion_7_rfrti_vs_rti(reduced_bench):
    rows, seconds = reduced_bench
    worst = max(abs(r[5]) for r in rows)
    detail = "max |gap_rfrti_vs_rti| = " + f"{worst:.2e} over m_bar " + ",".join(str(r[0]) for r in rows)
    assert record(7, worst <= 1e-3, detail, seconds, 300.0)


def test_criterion_8_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    eye = np.eye(4)
    qp_err = 0.0
    for _ in range(500):
        H = random_pd(rng, 4, cond=rng.uniform(1, 100))
        g = rng.standard_normal(4) * 3
        lo, hi = -rng.uniform(0.1, 2, 4), rng.uniform(0.1, 2, 4)
        y, _, _ = solve_dense_qp(DenseQp(H, g, np.vstack([eye, -eye]), np.concatenate([hi, -lo])))
        qp_err = max(qp_err, np.abs(y - enumerate_box_qp(H, g, lo, hi)).max())
    cons_err = 0.0
    for _ in range(200):
        n_x = int(rng.integers(1, 5))
        n_u = int(rng.integers(1, n_x + 1))
        N = int(rng.integers(1, 6))
        A, B = random_stabilizable(rng, n_x, n_u)
        sysm = LtiSystem(A, B)
        Q, R, P = random_pd(rng, n_x), random_pd(rng, n_u), random_pd(rng, n_x)
        args = [rng.standard_normal((N + 1, n_x)), rng.standard_normal((N, n_u)),
                rng.standard_normal((N + 1, n_x)), rng.standard_normal((N, n_u)), rng.standard_normal(n_x)]
        c = solve_consensus(*args, sysm, Q, R, P)
        zp, vp, dl = consensus_kkt_oracle(*args, sysm, Q, R, P)
        cons_err = max(cons_err, np.abs(c.z_plus - zp).max(), np.abs(c.v_plus - vp).max(), np.abs(c.delta - dl).max())
    ok = qp_err <= 1e-8 and cons_err <= 1e-9
    detail = f"500 QPs max err={qp_err:.1e} (tol 1e-8), 200 consensus max err={cons_err:.1e} (tol 1e-9)"
    assert record(8, ok, detail, time.perf_counter() - t0, 120.0)


def test_criterion_9_determinism(reduced, reduced_bench):
    t0 = time.perf_counter()
    cfg, _, design, margins = reduced
    rows1, _ = reduced_bench
    rows8, _ = run_bench(cfg, design, margins, workers=8)
    a, b = io.StringIO(), io.StringIO()
    write_bench_csv(rows1, a)
    write_bench_csv(rows8, b)
    same = a.getvalue() == b.getvalue()
    assert record(9, same, f"bench CSV workers=1 vs workers=8 identical={same} ({len(rows1)} rows)", time.perf_counter() - t0)
