"""Real-time parallel MPC: inner iterations, shift, and convergence diagnostics."""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .contraction import ContractionDesign, TightenedMargins, tighten_margins, untightened_margins
from .errors import Infeasible, NotContracting, StageInfeasible
from .model import MpcProblem
from .qp import ActiveSetSolver, ConsensusSolver, middle_stage_matrices

INPUT_ONLY = "input_only"
NOMINAL = "nominal"
TIGHTENED = "tightened"
MODES = (INPUT_ONLY, NOMINAL, TIGHTENED)


@dataclass
class IterateTriple:
    """Warm-start trajectories: ``z`` (N+1, n_x), ``v`` (N, n_u), ``lam`` (N, n_x)."""

    z: np.ndarray
    v: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.z = np.array(self.z, dtype=float)
        self.v = np.array(self.v, dtype=float)
        self.lam = np.array(self.lam, dtype=float)
        N = self.v.shape[0]
        if self.z.shape[0] != N + 1 or self.lam.shape[0] != N:
            raise ValueError("iterate lengths inconsistent with horizon")

    @classmethod
    def zeros(cls, N, n_x, n_u):
        return cls(np.zeros((N + 1, n_x)), np.zeros((N, n_u)), np.zeros((N, n_x)))

    @property
    def N(self):
        return self.v.shape[0]

    def copy(self):
        return IterateTriple(self.z, self.v, self.lam)

    def __sub__(self, other):
        return IterateTriple(self.z - other.z, self.v - other.v, self.lam - other.lam)


@dataclass
class ControllerConfig:
    m_bar: int = 10
    mode: str = TIGHTENED
    qp_tol: float = 1e-10
    design: Optional[ContractionDesign] = None
    margins: Optional[TightenedMargins] = None
    workers: int = 1
    # "stage": u0 of the initial stage QP; "consensus": v0 after the consensus step
    apply: str = "stage"

    def __post_init__(self):
        if self.m_bar < 1:
            raise ValueError("m_bar must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == TIGHTENED and self.design is None and self.margins is None:
            raise ValueError("tightened mode needs a design")
        if self.apply not in ("stage", "consensus"):
            raise ValueError(f"unknown apply rule {self.apply!r}")


@dataclass
class IterationRecord:
    m: int
    delta: Optional[float]
    active: int
    qp_iterations: int
    seconds: float


class ParallelMpc:
    """Stage solvers and consensus sweep of the parallel scheme for one problem.

    The object keeps per-stage warm starts (last solution and active set), so
    it is meant to be driven by a single owner. Stage constraints depend only
    on the stage index, which makes every previous stage solution a feasible
    start for the next solve of the same stage.
    """

    def __init__(self, problem: MpcProblem, mode=TIGHTENED, margins=None, qp_tol=1e-10, workers=1):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.problem = problem
        self.mode = mode
        self.qp_tol = qp_tol
        self.workers = max(int(workers), 1)
        sysm, X, U, N = problem.system, problem.X, problem.U, problem.N
        B = sysm.B
        if mode == NOMINAL:
            margins = untightened_margins(N, X, U)
        elif mode == TIGHTENED and margins is None:
            raise ValueError("tightened mode needs margins")
        self.margins = margins if mode != INPUT_ONLY else None
        with_state = self.margins is not None

        H, G = middle_stage_matrices(sysm, problem.Q, problem.R, X, U, with_state=with_state)
        self.mid = ActiveSetSolver(H, G)
        if with_state:
            self.h_mid = np.hstack([self.margins.d_hat[1:N], self.margins.c_hat[2 : N + 1]])
            G0 = np.vstack([U.G, X.G @ B])
        else:
            self.h_mid = np.tile(U.g, (N - 1, 1))
            G0 = U.G
        self.init = ActiveSetSolver(4.0 * problem.R, G0)
        self.consensus = ConsensusSolver(sysm, problem.Q, problem.R, problem.P, N)
        self.Pinv = np.linalg.inv(problem.P)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self.reset()

    def reset(self):
        N = self.problem.N
        self._warm_y = [None] * N
        self._warm_w = [None] * N

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def initial_bounds(self, x_hat):
        U, X = self.problem.U, self.problem.X
        if self.margins is None:
            return U.g
        A = self.problem.system.A
        return np.concatenate([self.margins.d_hat[0], self.margins.c_hat[1] - X.G @ (A @ x_hat)])

    def _solve_warm(self, solver, k, g, h):
        res = solver.solve(g, h, x0=self._warm_y[k], working=self._warm_w[k], tol=self.qp_tol)
        self._warm_y[k] = res.x
        self._warm_w[k] = res.active
        return res

    def stage_solutions(self, it: IterateTriple, x_hat):
        """Solve the N+1 decoupled stage problems; returns ``(x, u, n_active, qp_iters)``.

        ``x`` has N+1 rows with ``x[0] = x_hat``.
        """
        p = self.problem
        A, B, Q, R, N = p.system.A, p.system.B, p.Q, p.R, p.N
        n_x = p.n_x
        x = np.empty((N + 1, n_x))
        u = np.empty((N, p.n_u))
        x[0] = x_hat
        n_active = 0
        qp_iters = 0

        g0 = -(B.T @ it.lam[0]) - 2.0 * R @ it.v[0]
        try:
            res = self._solve_warm(self.init, 0, g0, self.initial_bounds(x_hat))
        except Infeasible as exc:
            raise StageInfeasible(0) from exc
        u[0] = res.x
        n_active += len(res.active)
        qp_iters += res.iterations

        if N > 1:
            gx = it.lam[: N - 1] - it.lam[1:N] @ A - 2.0 * it.z[1:N] @ Q
            gu = -(it.lam[1:N] @ B) - 2.0 * it.v[1:N] @ R
            g_all = np.hstack([gx, gu])
            y_free = -g_all @ self.mid.Hinv
            viol = np.einsum("kj,ij->ki", y_free, self.mid.G) - self.h_mid
            tight = np.any(viol > self.qp_tol * np.maximum(1.0, np.abs(self.h_mid)), axis=1)
            for j in np.flatnonzero(~tight):
                self._warm_y[j + 1] = y_free[j]
                self._warm_w[j + 1] = []
            x[1:N] = y_free[:, :n_x]
            u[1:N] = y_free[:, n_x:]
            hard = [int(j) for j in np.flatnonzero(tight)]

            def run(j):
                try:
                    return self._solve_warm(self.mid, j + 1, g_all[j], self.h_mid[j])
                except Infeasible as exc:
                    raise StageInfeasible(j + 1) from exc

            results = self._pool.map(run, hard) if self._pool is not None else map(run, hard)
            for j, res in zip(hard, results):
                x[j + 1] = res.x[:n_x]
                u[j + 1] = res.x[n_x:]
                n_active += len(res.active)
                qp_iters += res.iterations

        x[N] = 0.5 * it.z[N] - 0.25 * self.Pinv @ it.lam[N - 1]
        return x, u, n_active, qp_iters

    def iterate(self, it: IterateTriple, x_hat):
        """One inner round: stage solves, consensus, dual update."""
        x, u, n_active, qp_iters = self.stage_solutions(it, x_hat)
        cons = self.consensus.solve(x, u, it.z, it.v, x_hat)
        new = IterateTriple(cons.z_plus, cons.v_plus, it.lam + cons.delta)
        return new, u[0], n_active, qp_iters

    def step(self, it: IterateTriple, x_hat, m_bar, reference=None, apply="stage"):
        """``m_bar`` inner rounds; returns ``(u0, iterate, records)``."""
        x_hat = np.asarray(x_hat, dtype=float)
        records = []
        u0 = None
        it = it.copy()
        it.z[0] = x_hat
        for m in range(1, m_bar + 1):
            t0 = time.perf_counter()
            it, u0, n_active, qp_iters = self.iterate(it, x_hat)
            dt = time.perf_counter() - t0
            d = delta(it, reference, self.problem) if reference is not None else None
            records.append(IterationRecord(m, d, n_active, qp_iters, dt))
        if apply == "consensus":
            u0 = it.v[0].copy()
        return u0, it, records


def _margins_for(cfg: ControllerConfig, problem: MpcProblem):
    if cfg.mode != TIGHTENED:
        return None
    if cfg.margins is not None:
        return cfg.margins
    d = cfg.design
    return tighten_margins(d.Z, d.K, d.beta, problem.N, problem.X, problem.U)


def make_solver(cfg: ControllerConfig, problem: MpcProblem) -> ParallelMpc:
    return ParallelMpc(problem, cfg.mode, _margins_for(cfg, problem), cfg.qp_tol, cfg.workers)


def rti_step(iterate: IterateTriple, x_hat, cfg: ControllerConfig, problem: MpcProblem, solver=None, reference=None):
    """Run ``cfg.m_bar`` inner iterations from ``iterate`` at measurement ``x_hat``.

    Returns ``(u0, iterate_out, records)``. Pass a persistent ``solver``
    (from :func:`make_solver`) to keep stage warm starts between calls.

    Raises
    ------
    StageInfeasible
        If a stage QP has an empty feasible set.
    """
    solver = solver or make_solver(cfg, problem)
    return solver.step(iterate, x_hat, cfg.m_bar, reference=reference, apply=cfg.apply)


def shift(it: IterateTriple) -> IterateTriple:
    """Drop the first block of every trajectory and append a zero block."""
    z = np.vstack([it.z[1:], np.zeros((1, it.z.shape[1]))])
    v = np.vstack([it.v[1:], np.zeros((1, it.v.shape[1]))])
    lam = np.vstack([it.lam[1:], np.zeros((1, it.lam.shape[1]))])
    return IterateTriple(z, v, lam)


def phi(z, v, lam, Q, R, P, system) -> float:
    """Primal cost plus the quarter-weighted conjugate terms of the co-states."""
    z, v, lam = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (z, v, lam))
    A, B = system.A, system.B
    N = v.shape[0]
    val = np.einsum("ki,ij,kj->", z[:N], Q, z[:N]) + np.einsum("ki,ij,kj->", v, R, v)
    val += z[N] @ P @ z[N]
    Bl = lam @ B
    dual = np.einsum("ki,ki->", Bl, np.linalg.solve(R, Bl.T).T)
    if N > 1:
        d = lam[: N - 1] - lam[1:N] @ A
        dual += np.einsum("ki,ki->", d, np.linalg.solve(Q, d.T).T)
    dual += lam[N - 1] @ np.linalg.solve(P, lam[N - 1])
    return float(val + 0.25 * dual)


def delta(it: IterateTriple, reference: IterateTriple, problem: MpcProblem) -> float:
    """Distance of ``it`` to a converged primal-dual ``reference``, measured by phi."""
    d = it - reference
    return phi(d.z, d.v, d.lam, problem.Q, problem.R, problem.P, problem.system)


@dataclass
class KappaFit:
    kappa: float
    r_squared: float
    residual: float
    prefactor: float


def fit_geometric(seq) -> KappaFit:
    """Least-squares fit of ``log seq[m] = log c + m log kappa`` (m from 1)."""
    y = np.log(np.asarray(seq, dtype=float))
    if y.size < 3 or not np.all(np.isfinite(y)):
        raise ValueError("need at least 3 strictly positive values")
    m = np.arange(1, y.size + 1, dtype=float)
    slope, icpt = np.polyfit(m, y, 1)
    pred = icpt + slope * m
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return KappaFit(float(np.exp(slope)), r2, math.sqrt(ss_res / y.size), float(np.exp(icpt)))


def estimate_kappa(delta_sequence) -> float:
    """Geometric decay ratio of a sequence of distances.

    Raises ``NotContracting`` if the fitted ratio is not below one.
    """
    fit = fit_geometric(delta_sequence)
    if not fit.kappa < 1.0:
        raise NotContracting(f"fitted ratio {fit.kappa:.6g} >= 1")
    return fit.kappa


def applied_error_bound(kappa, sigma, m_bar, delta0) -> float:
    """Applied-input error bound ``sigma (1 + kappa) kappa^(m_bar + 1) delta0``."""
    return sigma * (1.0 + kappa) * kappa ** (m_bar + 1) * delta0


def min_iterations(kappa, beta, r, sigma, delta0) -> int:
    """Smallest ``m_bar`` for which the applied-input error fits in ``(1 - beta) r``."""
    arg = (1.0 - beta) / (1.0 + kappa) * r / (sigma * delta0)
    if arg >= 1.0:
        return 1
    bound = math.log(arg) / math.log(kappa) - 1.0
    return max(1, math.ceil(bound - 1e-12))


def write_records(records, fh):
    """Stream iteration records as CSV rows."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["m", "delta", "active", "qp_iterations", "seconds"])
    for r in records:
        w.writerow([r.m, "" if r.delta is None else format(r.delta, ".17g"), r.active, r.qp_iterations, format(r.seconds, ".6g")])
