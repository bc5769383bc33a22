"""
Offline synthesis on a small cart chain
=======================================

Build the chain benchmark, compute the LQR gain, pick a contraction factor,
size the ellipsoid and read off the tightened margins.
"""

# %%
import numpy as np

from rfmpc import BenchConfig, chain_problem, synthesize, verify_design
from rfmpc.model import spectral_radius

cfg = BenchConfig(n_carts=5, N=20, x0_scale=1.5)
problem = chain_problem(cfg)
print("states", problem.n_x, "inputs", problem.n_u, "horizon", problem.N)

# %%
# beta is picked between rho(A+BK) and 1, r is a fraction of the largest
# admissible radius and alpha defaults to beta^N
design, margins = synthesize(problem)
Acl = problem.system.closed_loop(design.K)
print(f"rho(A+BK) = {spectral_radius(Acl):.4f}  beta = {design.beta:.4f}")
print(f"r = {design.r:.4e}  alpha = {design.alpha:.4e}  sigma = {design.sigma:.4e}")

# %%
# margins shrink from the nominal bound towards c - sqrt(diag(C Z C'))
print("state margin, first row, by stage:", np.round(margins.c_hat[[0, 1, 5, 10, 20], 0], 6))

# %%
for name, ok, slack in verify_design(design, problem, margins):
    print(f"{'PASS' if ok else 'FAIL'}  {name:<20s} {slack:+.3e}")
