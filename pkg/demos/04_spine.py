"""
The spine and the Many-to-One lemma
===================================

A single line of descent under the original measure and under the
toward-origin change of measure, and the Many-to-One estimator.
"""
import numpy as np

from catbbm import ModelParams, RandomStream, derive_rates
from catbbm.analytics import expected_count_above
from catbbm.spine import SpineMeasure, many_to_one_estimate, simulate_spines, spine_decomposition_value

params = ModelParams.binary(1.0, 1.0)
d = derive_rates(params)

# E|N_t^x| as a one-particle expectation weighted by e^{beta0_hat L_t + beta_hat t}
m, se = many_to_one_estimate(params, 1.0, 0.5, 100000, RandomStream(1))
print(f"Many-to-One {m:.4f} +- {se:.4f}; closed form {expected_count_above(d, 1.0, 0.5):.4f}")

# under the toward-origin measure the spine is recurrent: L_t / t -> beta0_hat
pm = SpineMeasure.toward_origin_pm()
paths = simulate_spines(pm, params, 50.0, RandomStream(2), 50, step_h=0.05)
print("L_50 / 50:", np.mean([p.local_time[-1] / 50 for p in paths]))
print("fissions per unit time off the origin:", np.mean([p.n_off_origin() / 50 for p in paths]))

# the spine decomposition stays bounded along the path
vals = [[spine_decomposition_value(p, pm, params, t) for t in (10.0, 30.0, 50.0)] for p in paths]
print("median spine decomposition at t = 10, 30, 50:", np.median(vals, axis=0))
