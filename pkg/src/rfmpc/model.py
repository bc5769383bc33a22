"""Problem data for linear-quadratic MPC and the offline Riccati synthesis.

The feedback convention throughout the package is ``u = K x``; the minus
sign of the LQR gain lives inside ``K`` so closed loops read ``A + B K``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NotStabilizable

PD_TOL = 1e-12


@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent dimensions A{A.shape}, B{B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def closed_loop(self, K):
        return self.A + self.B @ K


@dataclass(frozen=True)
class PolyhedralSet:
    """The set ``{y : G y <= g}``; ``g > 0`` keeps the origin interior."""

    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float).ravel())
        if self.G.shape[0] != self.g.shape[0]:
            raise ValueError("G and g have different row counts")

    @classmethod
    def box(cls, dim, bound):
        """Infinity-norm ball ``||y||_inf <= bound``."""
        eye = np.eye(dim)
        return cls(np.vstack([eye, -eye]), np.full(2 * dim, float(bound)))

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def contains(self, y, tol=1e-9) -> bool:
        return bool(np.all(self.G @ np.asarray(y) <= self.g + tol))


@dataclass(frozen=True)
class MpcProblem:
    system: LtiSystem
    X: PolyhedralSet
    U: PolyhedralSet
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    N: int

    def __post_init__(self):
        for name in ("Q", "R", "P"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def n_x(self) -> int:
        return self.system.n_x

    @property
    def n_u(self) -> int:
        return self.system.n_u

    @property
    def n_variables(self) -> int:
        """Decision variables of the monolithic QP: N+1 states and N inputs."""
        return (self.N + 1) * self.n_x + self.N * self.n_u


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def dare_residual(A, B, Q, R, P):
    """Relative residual of the discrete algebraic Riccati equation at ``P``."""
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return np.linalg.norm(P - rhs) / max(np.linalg.norm(P), 1e-300)


def lqr_gain(A, B, R, P):
    """``K = -(R + B'PB)^{-1} B'PA``."""
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def dare_solve(A, B, Q, R, tol=1e-12, max_iter=100_000) -> RiccatiSolution:
    """Solve the DARE by fixed-point Riccati iteration started at ``P = Q``.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`` until the relative
    change drops below ``tol``.

    Raises
    ------
    NotStabilizable
        If ``max_iter`` sweeps pass without convergence, or the limit does not
        stabilize ``A + BK``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            BtP = B.T @ P
            P_new = Q + A.T @ P @ A - (A.T @ P @ B) @ np.linalg.solve(R + BtP @ B, BtP @ A)
            P_new = 0.5 * (P_new + P_new.T)
            if not np.all(np.isfinite(P_new)):
                raise NotStabilizable("Riccati iteration diverged")
            change = np.linalg.norm(P_new - P) / max(np.linalg.norm(P_new), 1e-300)
            P = P_new
            if change <= tol:
                break
        else:
            raise NotStabilizable(f"Riccati iteration did not converge in {max_iter} sweeps")
    K = lqr_gain(A, B, R, P)
    if spectral_radius(A + B @ K) >= 1.0:
        raise NotStabilizable("Riccati limit does not stabilize the closed loop")
    return RiccatiSolution(P=P, K=K, iterations=it, residual=dare_residual(A, B, Q, R, P))


def spectral_radius(M, tol=None) -> float:
    # LAPACK Hessenberg-QR eigenvalues; accurate to roughly eps * ||M||
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def compute_sigma(B, Q, R) -> float:
    """Smallest ``sigma`` with ``B'QB <= sigma R`` in the semidefinite order.

    This is the largest generalized eigenvalue of the pencil ``(B'QB, R)``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    M = B.T @ Q @ B
    M = 0.5 * (M + M.T)
    return float(sla.eigh(M, 0.5 * (R + R.T), eigvals_only=True)[-1])


def _is_pd(M, tol=PD_TOL):
    M = np.atleast_2d(M)
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-10, rtol=1e-10):
        return False
    return np.linalg.eigvalsh(0.5 * (M + M.T))[0] > tol


def validate_problem(p: MpcProblem) -> list[str]:
    """Collect violated invariants of ``p``; an empty list means well formed."""
    out = []
    n_x, n_u = p.n_x, p.n_u
    if p.X.dim != n_x:
        out.append("state set dimension mismatch")
    if p.U.dim != n_u:
        out.append("input set dimension mismatch")
    if not np.all(p.X.g > 0):
        out.append("state bound not strictly positive")
    if not np.all(p.U.g > 0):
        out.append("input bound not strictly positive")
    for name, M, n in (("Q", p.Q, n_x), ("R", p.R, n_u), ("P", p.P, n_x)):
        if M.shape != (n, n):
            out.append(f"{name} has wrong shape")
        elif not _is_pd(M):
            out.append(f"{name} not positive definite")
    if int(p.N) != p.N or p.N < 1:
        out.append("horizon not a positive integer")
    return out


def make_problem(system, X, U, Q, R, N, P=None, tol=1e-12) -> MpcProblem:
    """Build an :class:`MpcProblem`, taking ``P`` from the DARE when omitted."""
    if P is None:
        P = dare_solve(system.A, system.B, Q, R, tol=tol).P
    return MpcProblem(system=system, X=X, U=U, Q=Q, R=R, P=P, N=int(N))
