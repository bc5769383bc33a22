"""Spring-mass-damper chain benchmark and its flat key/value configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .model import LtiSystem, MpcProblem, PolyhedralSet, make_problem


@dataclass
class BenchConfig:
    """Benchmark settings; the defaults describe the 60-cart chain study."""

    n_carts: int = 60
    h: float = 0.1
    m_mass: float = 1.0
    k_s: float = 1.0
    k_d: float = 1.0
    x_bar: float = 2.5
    u_bar: float = 1.0
    N: int = 100
    x0_scale: float = 2.0
    # half-width of a seeded uniform offset added to the initial state
    x0_jitter: float = 0.0
    m_bar_sweep: list = field(default_factory=lambda: [1, 5, 10, 25, 50])
    seeds: list = field(default_factory=lambda: [0])
    # synthesis
    beta: Optional[float] = None
    r: Optional[float] = None
    r_fraction: float = 0.05
    alpha: Optional[float] = None
    # tolerances and run control
    qp_tol: float = 1e-10
    ref_tol: float = 1e-10
    eps_stop: float = 1e-8
    t_max: int = 2000
    workers: int = 1

    def x0(self, seed=None):
        """Initial state ``x0_scale * 1``, offset by seeded noise when ``x0_jitter > 0``."""
        x = np.full(2 * self.n_carts, float(self.x0_scale))
        if self.x0_jitter and seed is not None:
            x += self.x0_jitter * np.random.default_rng(seed).uniform(-1.0, 1.0, x.size)
        return x


def build_chain(cfg: BenchConfig):
    """Assemble ``(system, X, U)`` for a chain of ``cfg.n_carts`` carts.

    State order is ``(p_1, v_1, ..., p_n, v_n)``. The first cart hangs on a
    wall (``p_0 = 0``) and the last one is free (``p_{n+1} = p_n``).
    """
    n = int(cfg.n_carts)
    if n < 1:
        raise ValueError("n_carts must be >= 1")
    h, ks, kd, m = cfg.h, cfg.k_s, cfg.k_d, cfg.m_mass
    A = np.eye(2 * n)
    B = np.zeros((2 * n, n))
    for i in range(n):
        p, v = 2 * i, 2 * i + 1
        A[p, v] = h
        # stiffness k_s (p_{i-1} - 2 p_i + p_{i+1}) with boundary substitution
        A[v, p] += -2.0 * h * ks / m
        if i > 0:
            A[v, 2 * (i - 1)] += h * ks / m
        if i < n - 1:
            A[v, 2 * (i + 1)] += h * ks / m
        else:
            A[v, p] += h * ks / m
        A[v, v] += -h * kd / m
        B[v, i] = h / m
    X = PolyhedralSet.box(2 * n, cfg.x_bar)
    U = PolyhedralSet.box(n, cfg.u_bar)
    return LtiSystem(A, B), X, U


def chain_problem(cfg: BenchConfig) -> MpcProblem:
    """Chain MPC problem with ``Q = I``, ``R = I`` and the DARE terminal weight."""
    system, X, U = build_chain(cfg)
    return make_problem(system, X, U, np.eye(system.n_x), np.eye(system.n_u), cfg.N)


_LIST_KEYS = {"m_bar_sweep": int, "seeds": int}


def _coerce(name, raw, default):
    raw = raw.strip()
    if name in _LIST_KEYS:
        conv = _LIST_KEYS[name]
        return [conv(tok) for tok in raw.split(",") if tok.strip()]
    if raw.lower() in ("", "none"):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    return float(raw)


def parse_config(text: str, base: Optional[BenchConfig] = None) -> BenchConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a config.

    Unknown keys raise ``ValueError`` so typos do not pass silently.
    """
    cfg = base if base is not None else BenchConfig()
    known = {f.name: f for f in fields(BenchConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw, getattr(BenchConfig(), key)))
    return cfg


def load_config(path) -> BenchConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: BenchConfig) -> str:
    lines = []
    for f in fields(BenchConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, list):
            val = ", ".join(str(v) for v in val)
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
