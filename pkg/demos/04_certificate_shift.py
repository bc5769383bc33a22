"""
Shifting a feasibility certificate
==================================

A certificate is a state and input sequence inside the tightened margins
that ends in the terminal ellipsoid. After applying its first input, a
bounded disturbance and a shift with local feedback correction yield a
certificate for the successor state.
"""

# %%
import numpy as np

from rfmpc import BenchConfig, chain_problem, synthesize
from rfmpc.contraction import check_certificate, lqr_certificate, shift_certificate

cfg = BenchConfig(n_carts=5, N=20)
problem = chain_problem(cfg)
design, margins = synthesize(problem)
system = problem.system

# %%
rng = np.random.default_rng(0)
x = rng.standard_normal(problem.n_x)


def valid(cert, x):
    return check_certificate(cert, margins, design.Z, design.alpha, x, cert.w[0], system, problem.X, problem.U)


# the local feedback tail is a certificate once x is close enough to the origin
cert = lqr_certificate(x, design.K, problem.N, system)
while not valid(cert, x):
    x *= 0.5
    cert = lqr_certificate(x, design.K, problem.N, system)
print(f"start state norm {np.linalg.norm(x):.3e}")
print("initial certificate valid:", valid(cert, x))

# %%
for t in range(5):
    # a disturbance inside the admissible ball (1 - beta) r
    e = rng.standard_normal(problem.n_x)
    e *= 0.9 * (1 - design.beta) * design.r / np.linalg.norm(e)
    x = system.step(x, cert.w[0]) + e
    cert = shift_certificate(cert, x, design.K, system)
    print(f"step {t + 1}: valid = {valid(cert, x)}")
