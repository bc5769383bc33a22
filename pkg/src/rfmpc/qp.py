"""Dense strictly convex QP kernel, stage problems and the consensus sweep.

Stage objectives are written in the ``0.5 y'Hy + g'y`` convention. With the
stage cost ``||x||_Q^2 + ||x - z||_Q^2`` this gives ``H = 4Q`` (and ``4R``,
``4P`` for the other blocks).

Co-state convention: the Lagrangian of the MPC problem is
``J + sum_k lam_k' (x_{k+1} - A x_k - B u_k)`` and the consensus multipliers
``delta`` use the same sign, so the dual update is ``lam <- lam + delta``.
With this choice an unconstrained problem is solved in a single iteration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import Infeasible, MaxIterations, StageInfeasible
from .model import LtiSystem


@dataclass
class DenseQp:
    """``min 0.5 y'Hy + g'y  s.t.  Gy <= h``."""

    H: np.ndarray
    g: np.ndarray
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.H.shape[0]
        if self.G is None:
            self.G = np.zeros((0, n))
            self.h = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).ravel()


@dataclass
class QpResult:
    x: np.ndarray
    mu: np.ndarray
    active: list
    iterations: int = 0


class ActiveSetSolver:
    """Primal active-set method for a fixed ``(H, G)`` pair.

    Only ``g`` and ``h`` change between calls, so ``H^{-1}`` and ``H^{-1}G'``
    are computed once. Each iteration solves the equality-constrained
    subproblem in range-space form, i.e. a Cholesky factorization of
    ``G_W H^{-1} G_W'`` for the current working set ``W``. Ties in the choice
    of blocking or dropped constraint go to the lowest index.
    """

    def __init__(self, H, G, max_iter=None):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        n = self.H.shape[0]
        self.G = np.asarray(G, dtype=float).reshape(-1, n)
        self.Hinv = sla.cho_solve(sla.cho_factor(self.H), np.eye(n))
        self.HinvGt = self.Hinv @ self.G.T
        self.GHinvGt = self.G @ self.HinvGt
        self.max_iter = max_iter or 10 * (n + self.G.shape[0]) + 50
        self._row_norm = np.maximum(np.linalg.norm(self.G, axis=1), 1e-300)

    @property
    def n(self):
        return self.H.shape[0]

    def unconstrained(self, g):
        return -self.Hinv @ g

    def feasible_point(self, h, tol):
        """Phase 1: an LP point of ``{Gy <= h}`` or ``Infeasible``."""
        m, n = self.G.shape
        # min t  s.t.  G y - t <= h, t >= 0
        c = np.zeros(n + 1)
        c[-1] = 1.0
        A_ub = np.hstack([self.G, -np.ones((m, 1))])
        bounds = [(None, None)] * n + [(0, None)]
        res = linprog(c, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
        if res.status != 0 or res.x[-1] > tol:
            raise Infeasible("no point satisfies G y <= h")
        return res.x[:n]

    def _independent(self, idx):
        if not idx:
            return []
        S = self.GHinvGt[np.ix_(idx, idx)]
        try:
            L = np.linalg.cholesky(S)
            if np.min(np.abs(np.diag(L))) ** 2 > 1e-12 * max(1.0, np.trace(S)):
                return list(idx)
        except np.linalg.LinAlgError:
            pass
        keep = []
        for i in idx:
            trial = keep + [i]
            S = self.GHinvGt[np.ix_(trial, trial)]
            if np.linalg.eigvalsh(S)[0] > 1e-12 * max(1.0, np.trace(S)):
                keep = trial
        return keep

    def solve(self, g, h, x0=None, working=None, tol=1e-10) -> QpResult:
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        G = self.G
        m = G.shape[0]
        y_free = -self.Hinv @ g
        if m == 0 or np.all(G @ y_free <= h + tol):
            return QpResult(y_free, np.zeros(m), [], 0)

        feas_tol = tol * np.maximum(1.0, np.abs(h))
        y = None
        for cand in (x0, np.zeros(self.n)):
            if cand is not None and np.all(G @ cand <= h + feas_tol):
                y = np.array(cand, dtype=float)
                break
        if y is None:
            y = self.feasible_point(h, tol)
        slack = h - G @ y
        act = np.flatnonzero(slack <= feas_tol)
        act = act.tolist()
        if working:
            at_bound = set(act)
            preferred = [i for i in working if i in at_bound]
            chosen = set(preferred)
            act = preferred + [i for i in act if i not in chosen]
        W = self._independent(act)

        for it in range(1, self.max_iter + 1):
            c = self.H @ y + g
            if W:
                Gw = G[W]
                S = self.GHinvGt[np.ix_(W, W)]
                mu_w = sla.cho_solve(sla.cho_factor(S), -(Gw @ (self.Hinv @ c)))
                p = -self.Hinv @ (c + Gw.T @ mu_w)
            else:
                mu_w = np.zeros(0)
                p = -self.Hinv @ c
            if np.linalg.norm(p) <= tol * max(1.0, np.linalg.norm(y)):
                if mu_w.size == 0 or mu_w.min() >= -tol * max(1.0, np.abs(mu_w).max()):
                    mu = np.zeros(m)
                    mu[W] = np.maximum(mu_w, 0.0)
                    return QpResult(y, mu, sorted(W), it)
                W.pop(int(np.argmin(mu_w)))
                continue
            Gp = G @ p
            slack = h - G @ y
            cand = np.flatnonzero(Gp > 1e-14 * self._row_norm * max(np.linalg.norm(p), 1e-300))
            cand = np.setdiff1d(cand, W, assume_unique=False)
            step, block = 1.0, None
            if cand.size:
                ratios = np.maximum(slack[cand], 0.0) / Gp[cand]
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    step, block = float(ratios[j]), int(cand[j])
            y = y + step * p
            if block is not None:
                W.append(block)
        raise MaxIterations(f"active-set method exceeded {self.max_iter} iterations")


def solve_dense_qp(qp: DenseQp, tol=1e-10, x0=None, working=None):
    """Solve ``qp``; returns ``(primal, dual, active_set)``.

    Raises ``Infeasible`` when the constraints admit no point and
    ``MaxIterations`` if the active-set loop does not terminate.
    """
    res = ActiveSetSolver(qp.H, qp.G).solve(qp.g, qp.h, x0=x0, working=working, tol=tol)
    return res.x, res.mu, res.active


def kkt_residuals(qp: DenseQp, y, mu):
    """``(stationarity, primal violation, complementarity, dual violation)``."""
    stat = np.linalg.norm(qp.H @ y + qp.g + qp.G.T @ mu)
    slack = qp.G @ y - qp.h
    prim = float(np.max(slack, initial=0.0))
    comp = float(np.max(np.abs(mu * slack), initial=0.0))
    dual = float(max(-np.min(mu, initial=0.0), 0.0))
    return float(stat), max(prim, 0.0), comp, dual


# ---------------------------------------------------------------------------
# stage problems


def initial_stage_qp(lambda0, v0, x_hat, system: LtiSystem, R, U, c_next=None, X=None, d0=None):
    """QP in ``u0``: ``||u||_R^2 - lam0'Bu + ||u - v0||_R^2`` over the input set.

    When ``c_next`` is given the successor state is also constrained,
    ``C (A x_hat + B u) <= c_next``.
    """
    H = 4.0 * R
    g = -(system.B.T @ lambda0) - 2.0 * R @ v0
    G = [U.G]
    h = [U.g if d0 is None else d0]
    if c_next is not None:
        G.append(X.G @ system.B)
        h.append(c_next - X.G @ (system.A @ x_hat))
    return DenseQp(H, g, np.vstack(G), np.concatenate(h))


def solve_stage_initial(lambda0, v0, x_hat, U, margins, R, system: LtiSystem, X=None, tol=1e-10):
    """Initial-stage input ``u0``.

    ``margins`` may be ``None`` (input constraints only) or a margins object,
    in which case ``X`` is required for the successor-state rows.
    """
    c_next = None if margins is None else margins.c_hat[1]
    d0 = None if margins is None else margins.d_hat[0]
    qp = initial_stage_qp(lambda0, v0, x_hat, system, R, U, c_next=c_next, X=X, d0=d0)
    try:
        u, _, _ = solve_dense_qp(qp, tol=tol)
    except Infeasible as exc:
        raise StageInfeasible(0, "initial stage QP infeasible") from exc
    return u


def middle_stage_matrices(system: LtiSystem, Q, R, X, U, with_state=True):
    """Constant ``(H, G)`` of the stage problems ``1 <= k <= N-1``."""
    n_x = system.n_x
    H = sla.block_diag(4.0 * Q, 4.0 * R)
    G = [np.hstack([np.zeros((U.G.shape[0], n_x)), U.G])]
    if with_state:
        G.append(np.hstack([X.G @ system.A, X.G @ system.B]))
    return H, np.vstack(G)


def middle_stage_linear(lambda_km1, lambda_k, z_k, v_k, system: LtiSystem, Q, R):
    gx = lambda_km1 - system.A.T @ lambda_k - 2.0 * Q @ z_k
    gu = -(system.B.T @ lambda_k) - 2.0 * R @ v_k
    return np.concatenate([gx, gu])


def solve_stage_k(k, lambda_km1, lambda_k, z_k, v_k, margins, Q, R, system: LtiSystem, X=None, U=None, tol=1e-10):
    """Stage ``k`` pair ``(x_k, u_k)``; ``margins=None`` drops the state rows."""
    n_x = system.n_x
    with_state = margins is not None
    H, G = middle_stage_matrices(system, Q, R, X, U, with_state=with_state)
    g = middle_stage_linear(lambda_km1, lambda_k, z_k, v_k, system, Q, R)
    if with_state:
        h = np.concatenate([margins.d_hat[k], margins.c_hat[k + 1]])
    else:
        h = U.g
    try:
        y, _, _ = solve_dense_qp(DenseQp(H, g, G, h), tol=tol)
    except Infeasible as exc:
        raise StageInfeasible(k) from exc
    return y[:n_x], y[n_x:]


def solve_stage_terminal(lambda_Nm1, z_N, P):
    """Closed form ``z_N / 2 - P^{-1} lam_{N-1} / 4``."""
    return 0.5 * np.asarray(z_N, dtype=float) - 0.25 * np.linalg.solve(P, lambda_Nm1)


# ---------------------------------------------------------------------------
# consensus


@dataclass
class ConsensusSolution:
    z_plus: np.ndarray
    v_plus: np.ndarray
    delta: np.ndarray


class ConsensusSolver:
    """Equality-constrained tracking LQ problem solved by a Riccati sweep.

    The feedback part of the sweep depends only on ``(A, B, Q, R, P, N)`` and
    is computed once; each call runs the affine backward pass, a forward
    rollout and a backward costate recursion for the multipliers.
    """

    def __init__(self, system: LtiSystem, Q, R, P, N):
        self.system = system
        self.Q, self.R, self.P, self.N = Q, R, P, N
        A, B = system.A, system.B
        n_x, n_u = system.n_x, system.n_u
        self.K = np.empty((N, n_u, n_x))
        self.Minv = np.empty((N, n_u, n_u))
        self.PB = np.empty((N, n_x, n_u))
        Pk = P
        for k in range(N - 1, -1, -1):
            M = R + B.T @ Pk @ B
            Minv = np.linalg.inv(M)
            self.Minv[k] = 0.5 * (Minv + Minv.T)
            self.K[k] = -self.Minv[k] @ (B.T @ Pk @ A)
            self.PB[k] = Pk @ B
            Pk = Q + A.T @ Pk @ A + A.T @ Pk @ B @ self.K[k]
            Pk = 0.5 * (Pk + Pk.T)

    def solve(self, x, u, z, v, x_hat) -> ConsensusSolution:
        A, B, Q, R, P, N = self.system.A, self.system.B, self.Q, self.R, self.P, self.N
        x = np.asarray(x, dtype=float)
        if x.shape[0] == N:
            x = np.vstack([x_hat, x])
        a = 2.0 * x - z  # tracking targets for z+, row 0 unused
        b = 2.0 * u - v
        n_u = B.shape[1]
        kff = np.empty((N, n_u))
        s = -P @ a[N]
        for k in range(N - 1, -1, -1):
            kff[k] = self.Minv[k] @ (R @ b[k] - B.T @ s)
            if k > 0:
                s = -Q @ a[k] + A.T @ (self.PB[k] @ kff[k] + s)
        z_plus = np.empty_like(z)
        v_plus = np.empty_like(v)
        z_plus[0] = x_hat
        for k in range(N):
            v_plus[k] = self.K[k] @ z_plus[k] + kff[k]
            z_plus[k + 1] = A @ z_plus[k] + B @ v_plus[k]
        delta = np.empty((N, A.shape[0]))
        delta[N - 1] = -2.0 * P @ (z_plus[N] - a[N])
        for k in range(N - 1, 0, -1):
            delta[k - 1] = A.T @ delta[k] - 2.0 * Q @ (z_plus[k] - a[k])
        return ConsensusSolution(z_plus, v_plus, delta)


def solve_consensus(x, u, z, v, x_hat, system, Q, R, P) -> ConsensusSolution:
    """One-shot consensus solve; see :class:`ConsensusSolver`."""
    N = np.asarray(v).shape[0]
    return ConsensusSolver(system, Q, R, P, N).solve(x, u, z, v, x_hat)
