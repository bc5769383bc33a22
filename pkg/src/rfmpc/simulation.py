"""Closed-loop simulation, reference MPC solutions and cost accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .contraction import untightened_margins
from .controller import (
    INPUT_ONLY,
    NOMINAL,
    TIGHTENED,
    ControllerConfig,
    IterateTriple,
    ParallelMpc,
    delta,
    make_solver,
    phi,
    shift,
)
from .errors import Infeasible, NoConvergence, StageInfeasible
from .model import MpcProblem


@dataclass
class ReferenceSolution:
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    value: float
    iterations: int = 0
    polished: bool = False
    # active rows of the monolithic QP, filled in by the reference solver
    active: Optional[list] = None

    @property
    def triple(self) -> IterateTriple:
        return IterateTriple(self.x, self.u, self.lam)


def objective(z, v, problem: MpcProblem) -> float:
    Q, R, P, N = problem.Q, problem.R, problem.P, problem.N
    val = np.einsum("ki,ij,kj->", z[:N], Q, z[:N]) + np.einsum("ki,ij,kj->", v, R, v)
    return float(val + z[N] @ P @ z[N])


class MonolithicQp:
    """Sparse form of the full-horizon MPC problem.

    Variables are ``w = (x_0..x_N, u_0..u_{N-1})``. State constraints are
    written on ``A x_k + B u_k`` (not on ``x_{k+1}``) so the dynamics
    multipliers coincide with the co-states of the stage decomposition.
    """

    def __init__(self, problem: MpcProblem, margins=None):
        self.problem = problem
        self.margins = margins
        p = problem
        N, n_x, n_u = p.N, p.n_x, p.n_u
        A, B = p.system.A, p.system.B
        self.nX = (N + 1) * n_x
        self.n = self.nX + N * n_u
        blocks = [2.0 * p.Q] * N + [2.0 * p.P] + [2.0 * p.R] * N
        self.H = sp.block_diag(blocks, format="csc")

        rows = [sp.hstack([sp.eye(n_x), sp.csr_matrix((n_x, self.n - n_x))])]
        for k in range(N):
            r = sp.lil_matrix((n_x, self.n))
            r[:, (k + 1) * n_x : (k + 2) * n_x] = np.eye(n_x)
            r[:, k * n_x : (k + 1) * n_x] = -A
            r[:, self.nX + k * n_u : self.nX + (k + 1) * n_u] = -B
            rows.append(r.tocsr())
        self.E = sp.vstack(rows, format="csr")

        U, X = p.U, p.X
        self.m_u, self.m_x = U.G.shape[0], X.G.shape[0]
        G_rows, h = [], []
        for k in range(N):
            gu = sp.lil_matrix((self.m_u, self.n))
            gu[:, self.nX + k * n_u : self.nX + (k + 1) * n_u] = U.G
            G_rows.append(gu.tocsr())
            h.append(U.g if margins is None else margins.d_hat[k])
            if margins is not None:
                gx = sp.lil_matrix((self.m_x, self.n))
                gx[:, k * n_x : (k + 1) * n_x] = X.G @ A
                gx[:, self.nX + k * n_u : self.nX + (k + 1) * n_u] = X.G @ B
                G_rows.append(gx.tocsr())
                h.append(margins.c_hat[k + 1])
        self.G = sp.vstack(G_rows, format="csr")
        self.h = np.concatenate(h)
        self.rows_per_stage = self.m_u + (self.m_x if margins is not None else 0)

    def split(self, w):
        p = self.problem
        x = w[: self.nX].reshape(p.N + 1, p.n_x)
        u = w[self.nX :].reshape(p.N, p.n_u)
        return x, u

    def active_rows(self, x, u, tol=1e-9):
        w = np.concatenate([np.ravel(x), np.ravel(u)])
        scale = max(1.0, float(np.abs(self.h).max()))
        return np.flatnonzero(self.G @ w - self.h > -tol * scale).tolist()

    def shift_rows(self, rows):
        """Row indices of the same constraints one stage earlier (stage 0 dropped)."""
        k = self.rows_per_stage
        return [i - k for i in rows if i >= k]

    def feasible(self, x_hat, tol=1e-9) -> bool:
        """LP phase-1 check of the feasible set at ``x_hat``."""
        n_x = self.problem.n_x
        beq = np.zeros(self.E.shape[0])
        beq[:n_x] = x_hat
        res = linprog(
            np.zeros(self.n), A_ub=self.G, b_ub=self.h + tol, A_eq=self.E, b_eq=beq,
            bounds=[(None, None)] * self.n, method="highs",
        )
        return res.status == 0

    def polish(self, x_hat, active, tol=1e-9):
        """Solve the KKT system with ``active`` rows held at equality.

        Returns ``(x, u, lam)`` when the result satisfies every KKT condition
        to ``tol``, otherwise ``None``.
        """
        p = self.problem
        n_x = p.n_x
        active = np.asarray(sorted(active), dtype=int)
        Ga = self.G[active] if active.size else sp.csr_matrix((0, self.n))
        C = sp.vstack([self.E, Ga], format="csc")
        nc = C.shape[0]
        K = sp.bmat([[self.H, C.T], [C, None]], format="csc")
        rhs = np.zeros(self.n + nc)
        rhs[self.n : self.n + n_x] = x_hat
        rhs[self.n + self.E.shape[0] :] = self.h[active]
        try:
            sol = spla.spsolve(K, rhs)
        except RuntimeError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        w = sol[: self.n]
        mult = sol[self.n :]
        mu = mult[self.E.shape[0] :]
        scale = max(1.0, float(np.abs(self.h).max()))
        if np.max(self.G @ w - self.h, initial=-np.inf) > tol * scale:
            return None
        if mu.size and mu.min() < -tol * max(1.0, float(np.abs(mu).max())):
            return None
        resid = self.H @ w + C.T @ mult
        if np.linalg.norm(resid, np.inf) > 1e-7 * max(1.0, float(np.abs(w).max())):
            return None
        x, u = self.split(w)
        # dynamics rows carry lam_k' (x_{k+1} - A x_k - B u_k)
        lam = mult[n_x : n_x + p.N * n_x].reshape(p.N, n_x)
        return x, u, lam


def _stage_active_to_rows(solver: ParallelMpc, mono: MonolithicQp):
    rows = []
    for k, W in enumerate(solver._warm_w):
        if not W:
            continue
        base = k * mono.rows_per_stage
        rows.extend(base + i for i in W if i < mono.rows_per_stage)
    return rows


def _mode_margins(problem, mode, margins):
    if mode == INPUT_ONLY:
        return None
    if mode == NOMINAL:
        return untightened_margins(problem.N, problem.X, problem.U)
    if margins is None:
        raise ValueError("tightened mode needs margins")
    return margins


class ReferenceSolver:
    """Converged inner iteration with active-set polishing.

    Polishing takes the active sets of the stage QPs, solves the resulting
    equality-constrained problem exactly and accepts it only if it satisfies
    all KKT conditions; otherwise the inner iteration simply continues.
    """

    def __init__(self, problem: MpcProblem, mode=NOMINAL, margins=None, tol=1e-10, max_iter=200_000, polish_every=10, qp_tol=1e-10):
        self.problem = problem
        self.mode = mode
        self.margins = _mode_margins(problem, mode, margins)
        self.tol = tol
        self.max_iter = max_iter
        self.polish_every = polish_every
        self.solver = ParallelMpc(problem, mode, self.margins if mode == TIGHTENED else None, qp_tol)
        self.mono = MonolithicQp(problem, self.margins)

    def solve(self, x_hat, warm: Optional[IterateTriple] = None, active_guess=None) -> ReferenceSolution:
        """Converged solution at ``x_hat``.

        ``active_guess`` (monolithic row indices) is tried first with a
        single polish; if the KKT check rejects it the iteration runs as usual.
        """
        p = self.problem
        x_hat = np.asarray(x_hat, dtype=float)
        if not np.any(x_hat):
            z = np.zeros((p.N + 1, p.n_x))
            return ReferenceSolution(z, np.zeros((p.N, p.n_u)), np.zeros((p.N, p.n_x)), 0.0, 0, True, [])
        if active_guess is not None:
            got = self.mono.polish(x_hat, active_guess)
            if got is not None:
                return self._finish(*got, 0, True)
        it = warm.copy() if warm is not None else IterateTriple.zeros(p.N, p.n_x, p.n_u)
        it.z[0] = x_hat
        self.solver.reset()
        checked = False
        for m in range(1, self.max_iter + 1):
            try:
                new, _, _, _ = self.solver.iterate(it, x_hat)
            except StageInfeasible as exc:
                raise Infeasible(f"reference problem infeasible at stage {exc.stage}") from exc
            d = new - it
            change = phi(d.z, d.v, d.lam, p.Q, p.R, p.P, p.system)
            it = new
            if change <= self.tol or m % self.polish_every == 0:
                got = self.mono.polish(x_hat, _stage_active_to_rows(self.solver, self.mono))
                if got is not None:
                    return self._finish(*got, m, True)
            if change <= self.tol:
                return self._finish(it.z, it.v, it.lam, m, False)
            if not checked and m >= 5 * self.polish_every:
                checked = True
                if not self.mono.feasible(x_hat):
                    raise Infeasible("reference problem infeasible")
        raise NoConvergence(f"reference solve did not converge in {self.max_iter} iterations")

    def _finish(self, x, u, lam, iterations, polished):
        active = self.mono.active_rows(x, u)
        return ReferenceSolution(x, u, lam, objective(x, u, self.problem), iterations, polished, active)


def solve_reference(x_hat, problem: MpcProblem, mode=NOMINAL, tol=1e-10, margins=None, warm=None) -> ReferenceSolution:
    """Converged solution of the MPC problem at ``x_hat``.

    ``mode`` selects the constraint sets: ``input_only`` (inputs only),
    ``nominal`` (original state and input sets) or ``tightened`` (margins).

    Raises ``Infeasible`` when the problem has no feasible point and
    ``NoConvergence`` if the iteration cap is reached.
    """
    return ReferenceSolver(problem, mode, margins, tol).solve(x_hat, warm)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    j_infinity: float
    feasible_x: np.ndarray
    feasible_u: np.ndarray
    converged: bool
    halted_reason: Optional[str] = None
    halted_step: Optional[int] = None
    records: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.feasible_x) and np.all(self.feasible_u))

    @property
    def steps(self) -> int:
        return len(self.inputs)


class RtiPolicy:
    """Fixed-iteration parallel MPC with shifted warm starts."""

    def __init__(self, cfg: ControllerConfig, problem: MpcProblem, reference_mode=None, m_bar_rule=None):
        self.cfg = cfg
        self.problem = problem
        self.solver = make_solver(cfg, problem)
        self.iterate = IterateTriple.zeros(problem.N, problem.n_x, problem.n_u)
        self.reference = None
        if reference_mode is not None:
            self.reference = ReferenceSolver(problem, reference_mode, self.solver.margins)
        # m_bar_rule(delta0) -> m_bar; needs a reference solver
        self.m_bar_rule = m_bar_rule
        self._guess = None
        self.log = []

    def __call__(self, t, x):
        ref = None
        m_bar = self.cfg.m_bar
        if self.reference is not None:
            sol = self.reference.solve(x, active_guess=self._guess)
            self._guess = self.reference.mono.shift_rows(sol.active)
            ref = sol.triple
            if self.m_bar_rule is not None:
                start = self.iterate.copy()
                start.z[0] = x
                m_bar = self.m_bar_rule(delta(start, ref, self.problem))
        u0, it, records = self.solver.step(self.iterate, x, m_bar, reference=ref, apply=self.cfg.apply)
        self.log.append((t, m_bar, records))
        self.iterate = shift(it)
        return u0


class ExactPolicy:
    """Exact MPC: the reference solution is recomputed at every step."""

    def __init__(self, problem: MpcProblem, mode=NOMINAL, margins=None, tol=1e-10):
        self.reference = ReferenceSolver(problem, mode, margins, tol)
        self.warm = None
        self.guess = None
        self.iterations = []

    def __call__(self, t, x):
        sol = self.reference.solve(x, self.warm, self.guess)
        self.warm = shift(sol.triple)
        # along the closed loop the active set mostly moves one stage forward
        self.guess = self.reference.mono.shift_rows(sol.active)
        self.iterations.append(sol.iterations)
        return sol.u[0].copy()


def simulate_policy(
    policy: Callable,
    problem: MpcProblem,
    x0,
    t_max=2000,
    eps_stop=1e-8,
    perturbation: Optional[Callable] = None,
) -> ClosedLoopTrace:
    """Run ``u_t = policy(t, x_t)`` on the nominal plant.

    Stops when ``||x_t||_inf < eps_stop`` and adds the tail ``x_t' P x_t``.
    A ``StageInfeasible`` raised by the policy is annotated with the step
    index and re-raised. ``perturbation(t, x)`` is added to the successor
    state when given.
    """
    A, B = problem.system.A, problem.system.B
    Q, R, P = problem.Q, problem.R, problem.P
    x = np.asarray(x0, dtype=float).copy()
    states, inputs, costs = [x.copy()], [], []
    converged = False
    for t in range(t_max):
        if np.max(np.abs(x)) < eps_stop:
            converged = True
            break
        try:
            u = np.asarray(policy(t, x), dtype=float)
        except Infeasible as exc:
            if isinstance(exc, StageInfeasible):
                exc.step = t
            raise
        costs.append(float(x @ Q @ x + u @ R @ u))
        inputs.append(u)
        x = A @ x + B @ u
        if perturbation is not None:
            x = x + perturbation(t, x)
        states.append(x.copy())
    else:
        converged = np.max(np.abs(x)) < eps_stop
    states = np.array(states)
    inputs = np.array(inputs).reshape(-1, problem.n_u)
    costs = np.array(costs)
    j_inf = float(costs.sum() + x @ P @ x)
    feas_x = np.all(states[: len(inputs)] @ problem.X.G.T <= problem.X.g + 1e-9, axis=1)
    feas_u = np.all(inputs @ problem.U.G.T <= problem.U.g + 1e-9, axis=1)
    return ClosedLoopTrace(states, inputs, costs, j_inf, feas_x, feas_u, bool(converged))


def simulate_closed_loop(cfg: ControllerConfig, problem: MpcProblem, x0, t_max=2000, eps_stop=1e-8, perturbation=None) -> ClosedLoopTrace:
    """Closed loop under the real-time parallel controller described by ``cfg``."""
    policy = RtiPolicy(cfg, problem)
    try:
        trace = simulate_policy(policy, problem, x0, t_max, eps_stop, perturbation)
    finally:
        policy.solver.close()
    trace.records = policy.log
    return trace


def simulate_exact(problem: MpcProblem, x0, mode=NOMINAL, margins=None, t_max=2000, eps_stop=1e-8, tol=1e-10) -> ClosedLoopTrace:
    return simulate_policy(ExactPolicy(problem, mode, margins, tol), problem, x0, t_max, eps_stop)


def performance_gap(j_test, j_ref) -> float:
    """Relative loss ``(j_test - j_ref) / j_ref``."""
    if not j_ref > 0:
        raise ValueError("reference cost must be positive")
    return (j_test - j_ref) / j_ref


def write_trace_csv(trace: ClosedLoopTrace, fh):
    """Columns ``t, x0.., u0.., stage_cost, feasible_x, feasible_u``."""
    n_x = trace.states.shape[1]
    n_u = trace.inputs.shape[1]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)] + ["stage_cost", "feasible_x", "feasible_u"])
    for t in range(trace.steps):
        row = [t]
        row += [format(v, ".17g") for v in trace.states[t]]
        row += [format(v, ".17g") for v in trace.inputs[t]]
        row += [format(trace.stage_costs[t], ".17g"), int(trace.feasible_x[t]), int(trace.feasible_u[t])]
        w.writerow(row)
