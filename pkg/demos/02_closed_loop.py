"""
Closed loop with a fixed iteration budget
=========================================

Run the parallel real-time controller with tightened margins next to exact
MPC and compare the accumulated cost.
"""

# %%
from rfmpc import (
    BenchConfig,
    ControllerConfig,
    chain_problem,
    performance_gap,
    simulate_closed_loop,
    simulate_exact,
    synthesize,
)
from rfmpc.controller import TIGHTENED

cfg = BenchConfig(n_carts=5, N=20, x0_scale=1.5)
problem = chain_problem(cfg)
design, margins = synthesize(problem)
x0 = cfg.x0()

# %%
exact = simulate_exact(problem, x0, t_max=cfg.t_max, eps_stop=cfg.eps_stop)
print(f"exact MPC      J = {exact.j_infinity:.8f}  steps = {exact.steps}")

# %%
for m_bar in (1, 5, 25):
    ctrl = ControllerConfig(m_bar=m_bar, mode=TIGHTENED, design=design, margins=margins)
    trace = simulate_closed_loop(ctrl, problem, x0, t_max=cfg.t_max, eps_stop=cfg.eps_stop)
    gap = performance_gap(trace.j_infinity, exact.j_infinity)
    print(f"m_bar = {m_bar:3d}   J = {trace.j_infinity:.8f}  gap = {gap:.2e}  feasible = {trace.feasible}")
