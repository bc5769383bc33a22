"""Contractive ellipsoids, separable constraint margins and admissibility.

An ellipsoid ``E(Z) = {Z^{1/2} v : ||v|| <= 1}`` that contracts by ``beta``
under ``A + BK`` is turned into per-stage tightened bounds ``c_hat[k]`` and
``d_hat[k]``. The tightened sets shrink with the horizon index so that a
shifted plan stays admissible after a bounded one-step error. The
certificate helpers below make that shift argument executable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import EmptyMargin, InvalidBeta, MaxIterations, NotContractive, RadiusTooLarge
from .model import LtiSystem, MpcProblem, PolyhedralSet, compute_sigma, lqr_gain, spectral_radius

MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True)
class ContractionDesign:
    K: np.ndarray
    beta: float
    Z: np.ndarray
    r: float
    alpha: float
    sigma: float
    kappa_hat: Optional[float] = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.Z))


@dataclass(frozen=True)
class TightenedMargins:
    """Bounds of the tightened sets: ``c_hat`` is (N+1, m_x), ``d_hat`` is (N, m_u)."""

    c_hat: np.ndarray
    d_hat: np.ndarray

    @property
    def N(self) -> int:
        return self.d_hat.shape[0]


@dataclass(frozen=True)
class Certificate:
    y: np.ndarray
    w: np.ndarray

    @property
    def N(self) -> int:
        return self.w.shape[0]


def select_beta(system: LtiSystem, K, requested=None) -> float:
    """Contraction factor in ``(rho(A + BK), 1)``; the midpoint unless requested."""
    rho = spectral_radius(system.closed_loop(K))
    if rho >= 1.0:
        raise NotContractive(f"rho(A+BK) = {rho:.6g} >= 1")
    if requested is None:
        return 0.5 * (rho + 1.0)
    if not rho < requested < 1.0:
        raise InvalidBeta(f"beta = {requested} not in (rho(A+BK), 1) = ({rho:.6g}, 1)")
    return float(requested)


def solve_stein(S, tol=1e-14, max_doublings=64):
    """Sum ``sum_k S^k (S')^k``, the solution of ``S X S' - X = -I``.

    Uses the doubling form of the series: each sweep adds the next ``2^j``
    terms at once. Stops when the added block falls below ``tol`` in norm.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    X = np.eye(S.shape[0])
    Sk = S.copy()
    for _ in range(max_doublings):
        term = Sk @ X @ Sk.T
        X = X + term
        if np.linalg.norm(term) <= tol * max(1.0, np.linalg.norm(X)):
            return 0.5 * (X + X.T)
        Sk = Sk @ Sk
    raise MaxIterations("Lyapunov series did not converge; is rho(S) < 1?")


def _row_quadratic(G, M):
    # diag(G M G') without forming the full product
    return np.einsum("ij,jk,ik->i", G, M, G)


def _shape_and_bounds(system, K, beta, alpha, X, U):
    K = np.atleast_2d(K)
    rho = spectral_radius(system.closed_loop(K))
    if rho >= 1.0:
        raise NotContractive(f"rho(A+BK) = {rho:.6g} >= 1")
    if not rho < beta < 1.0:
        raise InvalidBeta(f"beta = {beta} not in ({rho:.6g}, 1)")
    Zt = solve_stein(system.closed_loop(K) / beta)
    lam_min = float(np.linalg.eigvalsh(Zt)[0])
    scale = (1.0 + alpha) ** -2
    caps = []
    for G, g in ((X.G, X.g), (U.G @ K, U.g)):
        q = _row_quadratic(G, Zt)
        live = q > 0
        caps.append(scale * g[live] ** 2 / q[live])
    caps = np.concatenate(caps)
    gamma_max = float(caps.min()) if caps.size else np.inf
    return Zt, lam_min, gamma_max


def synth_ellipsoid(system: LtiSystem, K, beta, r, alpha, X: PolyhedralSet, U: PolyhedralSet):
    """Shape matrix of a ``beta``-contractive ellipsoid with inner radius ``r``.

    The Lyapunov solution for ``(A + BK) / beta`` is scaled so that its
    smallest eigenvalue equals ``r**2``. The result is feasible for the
    ellipsoid SDP but not trace-minimal.

    Raises
    ------
    RadiusTooLarge
        If the scaling needed for radius ``r`` pushes ``(1 + alpha) E(Z)``
        out of the state or input constraints.
    """
    Zt, lam_min, gamma_max = _shape_and_bounds(system, K, beta, alpha, X, U)
    gamma = r**2 / lam_min
    if gamma > gamma_max * (1.0 + 1e-12):
        r_star = np.sqrt(gamma_max * lam_min)
        raise RadiusTooLarge(
            f"inner radius {r:.6g} too large; max_inner_radius is about {r_star:.6g}",
            gamma_min=gamma,
            gamma_max=gamma_max,
        )
    return gamma * Zt


def max_inner_radius(system, K, beta, alpha, X, U, tol=1e-10) -> float:
    """Largest inner radius accepted by :func:`synth_ellipsoid`, by bisection."""
    Zt, lam_min, gamma_max = _shape_and_bounds(system, K, beta, alpha, X, U)
    if not np.isfinite(gamma_max):
        return np.inf

    def ok(r):
        return r**2 / lam_min <= gamma_max * (1.0 + 1e-12)

    lo, hi = 0.0, 1.0
    while ok(hi):
        lo, hi = hi, 2.0 * hi
    while not ok(0.5 * hi) and hi > 1e-300:
        hi *= 0.5
    lo = max(lo, 0.5 * hi)
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def tighten_margins(Z, K, beta, N, X: PolyhedralSet, U: PolyhedralSet) -> TightenedMargins:
    """Per-stage bounds ``c - (1 - beta^k) sqrt(C_i Z C_i')`` and the input analogue."""
    K = np.atleast_2d(K)
    sx = np.sqrt(np.maximum(_row_quadratic(X.G, Z), 0.0))
    su = np.sqrt(np.maximum(_row_quadratic(U.G @ K, Z), 0.0))
    shrink = 1.0 - beta ** np.arange(N + 1)
    c_hat = X.g[None, :] - shrink[:, None] * sx[None, :]
    d_hat = U.g[None, :] - shrink[:N, None] * su[None, :]
    if np.any(c_hat <= 0) or np.any(d_hat <= 0):
        raise EmptyMargin("tightened bound is not strictly positive")
    return TightenedMargins(c_hat=c_hat, d_hat=d_hat)


def untightened_margins(N, X: PolyhedralSet, U: PolyhedralSet) -> TightenedMargins:
    """Margins equal to the original bounds at every stage."""
    return TightenedMargins(c_hat=np.tile(X.g, (N + 1, 1)), d_hat=np.tile(U.g, (N, 1)))


def ellipsoid_norm2(x, Z):
    """``x' Z^{-1} x``."""
    x = np.asarray(x, dtype=float)
    c = sla.cho_factor(Z)
    return float(x @ sla.cho_solve(c, x))


def in_terminal(x, Z, alpha, tol=MEMBERSHIP_TOL) -> bool:
    return ellipsoid_norm2(x, Z) <= alpha**2 + tol


def check_certificate(
    cert: Certificate,
    margins: TightenedMargins,
    Z,
    alpha,
    x,
    u,
    system: LtiSystem,
    X: PolyhedralSet,
    U: PolyhedralSet,
    tol=MEMBERSHIP_TOL,
) -> bool:
    """Whether ``cert`` witnesses that ``(x, u)`` lies in the admissible set."""
    y, w = np.asarray(cert.y), np.asarray(cert.w)
    N = w.shape[0]
    if y.shape[0] != N + 1 or margins.N != N:
        return False
    if np.max(np.abs(y[0] - x)) > tol or np.max(np.abs(w[0] - u)) > tol:
        return False
    resid = y[1:] - (y[:-1] @ system.A.T + w @ system.B.T)
    if np.max(np.abs(resid), initial=0.0) > tol:
        return False
    if np.any(y[:N] @ X.G.T > margins.c_hat[:N] + tol):
        return False
    if np.any(w @ U.G.T > margins.d_hat + tol):
        return False
    return in_terminal(y[N], Z, alpha, tol)


def shift_certificate(cert: Certificate, x_plus, K, system: LtiSystem) -> Certificate:
    """Witness for the successor pair, built by feedback on the deviation.

    The old plan is extended by one LQR step, then
    ``y+[k+1] = y[k+2] + (A+BK)(y+[k] - y[k+1])`` and
    ``w+[k] = w[k+1] + K(y+[k] - y[k+1])``.
    """
    K = np.atleast_2d(K)
    y, w = np.asarray(cert.y), np.asarray(cert.w)
    N = w.shape[0]
    Acl = system.closed_loop(K)
    y_ext = np.vstack([y, Acl @ y[N]])
    w_ext = np.vstack([w, K @ y[N]])
    y_new = np.empty_like(y)
    w_new = np.empty_like(w)
    y_new[0] = x_plus
    for k in range(N):
        dev = y_new[k] - y_ext[k + 1]
        y_new[k + 1] = y_ext[k + 2] + Acl @ dev
        w_new[k] = w_ext[k + 1] + K @ dev
    return Certificate(y=y_new, w=w_new)


def lqr_certificate(x, K, N, system: LtiSystem) -> Certificate:
    """Certificate generated by the linear feedback ``u = K y`` from ``x``."""
    K = np.atleast_2d(K)
    Acl = system.closed_loop(K)
    y = np.empty((N + 1, system.n_x))
    y[0] = x
    for k in range(N):
        y[k + 1] = Acl @ y[k]
    return Certificate(y=y, w=y[:N] @ K.T)


def synthesize(
    problem: MpcProblem,
    beta=None,
    r=None,
    alpha=None,
    r_fraction=0.05,
):
    """Offline synthesis: gain, contraction factor, ellipsoid and margins.

    ``K`` is the LQR gain for the problem's terminal weight. When ``r`` is
    omitted it is ``r_fraction`` times the largest admissible radius.
    Returns ``(design, margins)``.
    """
    system = problem.system
    K = lqr_gain(system.A, system.B, problem.R, problem.P)
    beta = select_beta(system, K, beta)
    if alpha is None:
        alpha = beta**problem.N
    elif alpha < beta**problem.N:
        raise ValueError(f"alpha = {alpha} must be >= beta^N = {beta ** problem.N}")
    if r is None:
        r = r_fraction * max_inner_radius(system, K, beta, alpha, problem.X, problem.U)
    Z = synth_ellipsoid(system, K, beta, r, alpha, problem.X, problem.U)
    sigma = compute_sigma(system.B, problem.Q, problem.R)
    design = ContractionDesign(K=K, beta=beta, Z=Z, r=float(r), alpha=float(alpha), sigma=sigma)
    margins = tighten_margins(Z, K, beta, problem.N, problem.X, problem.U)
    return design, margins


def verify_design(design: ContractionDesign, problem: MpcProblem, margins=None, tol=1e-9):
    """Run the invariant checks of a design; returns ``[(name, ok, slack)]``.

    Slacks are signed so that non-negative means satisfied.
    """
    system, X, U = problem.system, problem.X, problem.U
    K, Z, beta, alpha, r = design.K, design.Z, design.beta, design.alpha, design.r
    Acl = system.closed_loop(K)
    scale = (1.0 + alpha) ** -2
    rows = []

    contraction = float(np.linalg.eigvalsh(beta**2 * Z - Acl @ Z @ Acl.T)[0])
    rows.append(("contraction", contraction >= -tol * max(1.0, np.linalg.norm(Z)), contraction))
    radius = float(np.linalg.eigvalsh(Z)[0] - r**2 * (1.0 - tol))
    rows.append(("inner_radius", radius >= 0.0, radius))
    sym = float(np.linalg.eigvalsh(0.5 * (Z + Z.T))[0])
    rows.append(("positive_definite", sym > 0 and np.allclose(Z, Z.T, atol=1e-14, rtol=1e-12), sym))
    sx = float(np.min(scale * X.g**2 - _row_quadratic(X.G, Z)))
    rows.append(("state_rows", sx >= -tol * max(1.0, X.g.max() ** 2), sx))
    su = float(np.min(scale * U.g**2 - _row_quadratic(U.G @ K, Z)))
    rows.append(("input_rows", su >= -tol * max(1.0, U.g.max() ** 2), su))
    a = float(alpha - beta**problem.N)
    rows.append(("alpha_bound", a >= -1e-15, a))
    rho = spectral_radius(Acl)
    rows.append(("beta_range", rho < beta < 1.0, float(min(beta - rho, 1.0 - beta))))
    sigma_slack = float(np.linalg.eigvalsh(design.sigma * problem.R - system.B.T @ problem.Q @ system.B)[0])
    rows.append(("sigma", sigma_slack >= -1e-10 * max(1.0, design.sigma), sigma_slack))
    if margins is not None:
        ok_pos = bool(np.all(margins.c_hat > 0) and np.all(margins.d_hat > 0))
        mono = bool(np.all(np.diff(margins.c_hat, axis=0) <= 1e-15) and np.all(np.diff(margins.d_hat, axis=0) <= 1e-15))
        rows.append(("margins_positive", ok_pos, float(min(margins.c_hat.min(), margins.d_hat.min()))))
        rows.append(("margins_monotone", mono, 0.0))
        ref = tighten_margins(Z, K, beta, problem.N, X, U)
        err = float(max(np.max(np.abs(ref.c_hat - margins.c_hat)), np.max(np.abs(ref.d_hat - margins.d_hat))))
        rows.append(("margins_consistent", err <= 1e-12, -err))
    return rows
