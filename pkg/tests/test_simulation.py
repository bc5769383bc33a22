import io

import numpy as np
import pytest

from rfmpc.contraction import synthesize
from rfmpc.controller import INPUT_ONLY, NOMINAL, TIGHTENED, ControllerConfig
from rfmpc.errors import Infeasible, StageInfeasible
from rfmpc.model import LtiSystem, PolyhedralSet, dare_solve, make_problem
from rfmpc.simulation import (
    MonolithicQp,
    objective,
    performance_gap,
    simulate_closed_loop,
    simulate_exact,
    simulate_policy,
    solve_reference,
    write_trace_csv,
)


def kkt_check(p, ref, x_hat, margins=None, tol=1e-7):
    """Independent check of the monolithic KKT conditions at a reference solution."""
    mono = MonolithicQp(p, margins)
    w = np.concatenate([ref.x.ravel(), ref.u.ravel()])
    e = mono.E @ w
    e[: p.n_x] -= x_hat
    assert np.abs(e).max() <= tol
    slack = mono.G @ w - mono.h
    assert slack.max() <= tol
    # recover mu from stationarity on active rows by least squares
    act = np.flatnonzero(slack > -1e-7)
    grad = mono.H @ w
    C = mono.E.T.toarray()
    Ga = mono.G[act].T.toarray()
    sol, *_ = np.linalg.lstsq(np.hstack([C, Ga]), -grad, rcond=None)
    mu = sol[C.shape[1]:]
    assert np.linalg.norm(np.hstack([C, Ga]) @ sol + grad, np.inf) <= 1e-6 * max(1, np.abs(grad).max())
    assert mu.size == 0 or mu.min() >= -1e-6


class TestReference:
    def test_origin(self, small_chain):
        ref = solve_reference(np.zeros(small_chain.n_x), small_chain)
        assert ref.value == 0.0
        assert not np.any(ref.x) and not np.any(ref.u)

    def test_scalar_unconstrained_value(self):
        sysm = LtiSystem([[0.5]], [[1.0]])
        big = PolyhedralSet.box(1, 1e6)
        p = make_problem(sysm, big, big, np.eye(1), np.eye(1), 40)
        x_hat = np.array([0.7])
        ref = solve_reference(x_hat, p, mode=INPUT_ONLY)
        P = dare_solve(sysm.A, sysm.B, np.eye(1), np.eye(1)).P
        assert ref.value == pytest.approx(float(x_hat @ P @ x_hat), rel=1e-10)

    def test_value_matches_objective(self, small_chain, small_chain_x0):
        ref = solve_reference(small_chain_x0, small_chain, mode=NOMINAL, tol=1e-12)
        assert ref.value == pytest.approx(objective(ref.x, ref.u, small_chain))
        kkt_check(small_chain, ref, small_chain_x0, MonolithicQp(small_chain).margins)

    @pytest.mark.parametrize("mode", [NOMINAL, TIGHTENED])
    def test_kkt(self, reduced_chain, reduced_design, reduced_cfg, mode):
        from rfmpc.contraction import untightened_margins

        design, margins = reduced_design
        m = margins if mode == TIGHTENED else untightened_margins(reduced_chain.N, reduced_chain.X, reduced_chain.U)
        x0 = reduced_cfg.x0()
        ref = solve_reference(x0, reduced_chain, mode=mode, margins=margins, tol=1e-12)
        kkt_check(reduced_chain, ref, x0, m)

    def test_tightened_not_better(self, reduced_chain, reduced_design, rng):
        design, margins = reduced_design
        for _ in range(5):
            x = rng.uniform(-1.2, 1.2, reduced_chain.n_x)
            j = solve_reference(x, reduced_chain, mode=NOMINAL).value
            v = solve_reference(x, reduced_chain, mode=TIGHTENED, margins=margins).value
            assert v >= j - 1e-8 * max(1, j)

    def test_infeasible(self, small_chain):
        with pytest.raises(Infeasible):
            solve_reference(np.full(small_chain.n_x, 5.0), small_chain, mode=NOMINAL)


class TestClosedLoop:
    def test_origin(self, small_chain):
        tr = simulate_closed_loop(ControllerConfig(m_bar=3, mode=NOMINAL), small_chain, np.zeros(small_chain.n_x))
        assert tr.j_infinity == 0.0
        assert tr.steps == 0 and tr.converged

    def test_exact_policy(self, small_chain, small_chain_x0):
        tr = simulate_exact(small_chain, small_chain_x0)
        assert tr.converged and tr.feasible
        assert np.isfinite(tr.j_infinity)
        # once the constraints are inactive x'Px is a Lyapunov function
        vals = np.einsum("ti,ij,tj->t", tr.states, small_chain.P, tr.states)
        tail = vals[len(vals) // 4:]
        assert np.all(np.diff(tail) < 0)
        # plant recursion reproduced exactly, step by step
        A, B = small_chain.system.A, small_chain.system.B
        for t in range(tr.steps):
            assert np.array_equal(tr.states[t + 1], A @ tr.states[t] + B @ tr.inputs[t])
        total = tr.stage_costs.sum() + tr.states[-1] @ small_chain.P @ tr.states[-1]
        assert tr.j_infinity == pytest.approx(total, rel=1e-15)

    def test_large_mbar_matches_exact(self, small_chain, small_chain_x0):
        exact = simulate_exact(small_chain, small_chain_x0)
        rti = simulate_closed_loop(ControllerConfig(m_bar=40, mode=NOMINAL), small_chain, small_chain_x0)
        assert abs(performance_gap(rti.j_infinity, exact.j_infinity)) <= 1e-6

    def test_stage_infeasible_reports_step(self, small_chain, reduced_design):
        p = small_chain
        design, margins = synthesize(p)
        cfg = ControllerConfig(m_bar=1, mode=TIGHTENED, design=design, margins=margins)
        with pytest.raises(StageInfeasible) as exc:
            simulate_closed_loop(cfg, p, np.full(p.n_x, 5.0), t_max=5)
        assert exc.value.step == 0

    def test_perturbation_hook(self, small_chain):
        calls = []

        def policy(t, x):
            return np.zeros(small_chain.n_u)

        def kick(t, x):
            calls.append(t)
            return np.full_like(x, 1e-3) if t == 0 else np.zeros_like(x)

        tr = simulate_policy(policy, small_chain, np.zeros(small_chain.n_x) + 1e-3, t_max=3, perturbation=kick)
        assert calls == [0, 1, 2]
        A = small_chain.system.A
        np.testing.assert_allclose(tr.states[1], A @ tr.states[0] + 1e-3)

    def test_unconverged_trace(self, small_chain, small_chain_x0):
        tr = simulate_closed_loop(ControllerConfig(m_bar=2, mode=NOMINAL), small_chain, small_chain_x0, t_max=3)
        assert not tr.converged and tr.steps == 3


class TestGap:
    def test_equal(self):
        assert performance_gap(5.0, 5.0) == 0.0

    def test_relative(self):
        assert performance_gap(1.001 * 7.0, 7.0) == pytest.approx(1e-3)

    def test_nonpositive_reference(self):
        with pytest.raises(ValueError):
            performance_gap(1.0, 0.0)


def test_trace_csv(small_chain, small_chain_x0):
    tr = simulate_closed_loop(ControllerConfig(m_bar=5, mode=NOMINAL), small_chain, small_chain_x0, t_max=4)
    buf = io.StringIO()
    write_trace_csv(tr, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,x0,x1,x2,x3,u0,u1,stage_cost,feasible_x,feasible_u"
    assert len(lines) == 5
    first = lines[1].split(",")
    np.testing.assert_array_equal([float(v) for v in first[1:5]], tr.states[0])
    assert float(first[7]) == tr.stage_costs[0]
    buf2 = io.StringIO()
    write_trace_csv(tr, buf2)
    assert buf2.getvalue() == buf.getvalue()
