"""
Additive martingales
====================

M^+- on the full model and M^lambda on the homogeneous-only model: unit
mean at fixed t, and the positive versus degenerate limit.
"""
import math

import numpy as np

from catbbm import ModelParams, RandomStream, derive_rates
from catbbm.analytics import mean_and_se
from catbbm.martingales import MartingaleKind, evaluate_batch, limit_diagnostic
from catbbm.population import SimConfig, simulate_batch

params = ModelParams.binary(1.0, 1.0)
d = derive_rates(params)
n = 10000
times = (0.5, 1.0, 2.0)
b = simulate_batch(params, SimConfig(step_h=0.1, horizon=2.0, record_times=times, track_genealogy=False),
                   RandomStream(3), n)
for t in times:
    m, se = mean_and_se(evaluate_batch(MartingaleKind.pm(), b.snapshots[t], d, n))
    print(f"E[M^pm_{t}] = {m:.4f} +- {se:.4f}")

# above sqrt(2 beta_hat) the homogeneous martingale dies out
dh = derive_rates(params.homogeneous_only())
times = (2.0, 4.0, 8.0)
b = simulate_batch(params, SimConfig(step_h=0.25, horizon=8.0, record_times=times, track_genealogy=False,
                                     homogeneous_only=True), RandomStream(4), 300)
for lam in (0.5, 1.2 * math.sqrt(2)):
    k = MartingaleKind.of_lambda(lam)
    vals = np.column_stack([evaluate_batch(k, b.snapshots[t], dh, 300) for t in times])
    rep = limit_diagnostic(times, vals)
    print(f"lambda={lam:.3f}: medians {np.round(rep.median, 4).tolist()}, "
          f"fraction below 1e-6 {rep.fraction_below_eps_by_t}")
