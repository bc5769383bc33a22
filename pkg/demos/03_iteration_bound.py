"""
Contraction rate and the iteration bound
========================================

Record the distance to the converged reference along a cold-started solve,
fit a geometric rate and turn it into a sufficient iteration count.
"""

# %%
import numpy as np

from rfmpc import BenchConfig, IterateTriple, chain_problem, synthesize
from rfmpc.controller import TIGHTENED, ParallelMpc, delta, fit_geometric, min_iterations
from rfmpc.simulation import solve_reference

cfg = BenchConfig(n_carts=5, N=20, x0_scale=1.5)
problem = chain_problem(cfg)
design, margins = synthesize(problem)
x0 = cfg.x0()

# %%
ref = solve_reference(x0, problem, mode=TIGHTENED, margins=margins)
solver = ParallelMpc(problem, TIGHTENED, margins)
it = IterateTriple.zeros(problem.N, problem.n_x, problem.n_u)
it.z[0] = x0
d0 = delta(it, ref.triple, problem)
dist = []
for _ in range(40):
    it, *_ = solver.iterate(it, x0)
    dist.append(delta(it, ref.triple, problem))
fit = fit_geometric(np.asarray(dist[5:]))
print(f"fitted rate kappa = {fit.kappa:.4f}  R^2 = {fit.r_squared:.4f}")

# %%
m = min_iterations(min(fit.kappa, 0.999), design.beta, design.r, design.sigma, d0)
print("iterations per step that guarantee feasibility:", m)
