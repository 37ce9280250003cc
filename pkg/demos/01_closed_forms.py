"""
Closed forms for catalytic branching Brownian motion
====================================================

Effective rates, the critical speed, the growth exponents Delta_lambda and
the expected number of particles above a level. No simulation.
"""
import math

import numpy as np

from catbbm import ModelParams, delta_lambda, derive_rates, optimal_split, split_exponent
from catbbm.analytics import expected_count_above, expected_population

# binary branching at rate 1 everywhere plus rate 1 catalytic branching at the origin
params = ModelParams.binary(beta=1.0, beta0=1.0)
d = derive_rates(params)
print("regime", d.regime.value, " lambda_crit", d.lambda_crit, " growth exponent", d.growth_exponent)

# Delta_lambda is the exponential growth rate of the count above lambda t
for lam in (0.5, 1.0, math.sqrt(2), 2.0):
    print(f"Delta({lam:.4f}) = {delta_lambda(d, lam):+.6f}   p* = {optimal_split(d, lam):.3f}")

# the optimal split p* maximises the two-phase exponent
grid = np.linspace(0, 0.999, 1000)
vals = [split_exponent(d, 0.5, p) for p in grid]
print("grid argmax", grid[int(np.argmax(vals))], "vs p*", optimal_split(d, 0.5))

# expected counts: E|N_t^x| and E|N_t|
for t in (0.5, 1.0, 2.0):
    print(f"t={t}: E|N_t^0| = {expected_count_above(d, t, 0.0):.6f}   E|N_t| = {expected_population(d, t):.6f}")

# when catalytic branching dominates the front is driven by the origin
cat = derive_rates(ModelParams.binary(0.25, 1.0))
print("catalytic-dominant lambda_crit", cat.lambda_crit, cat.regime.value)
