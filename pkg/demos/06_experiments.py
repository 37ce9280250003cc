"""
Experiments through the runner
==============================

The same runner the ``bbm`` command uses: growth of the population, the
speed of the rightmost particle and the decay of the survival probability
above lambda t for lambda > lambda_crit.
"""
from catbbm.experiments import ExperimentConfig, run


def show(report):
    for m in report.metrics:
        print(f"  {m['name']}: {m['estimate']}  (reference {m['reference']}, pass {m['pass']})")


sim = {"horizon": 8.0, "step_h": 0.25}
print("growth of |N_t| over [4, 8]")
show(run(ExperimentConfig.from_dict({"experiment": {"name": "growth"}, "replicas": 8, "master_seed": 5,
                                     "sim": sim}), write=False))

print("rightmost particle at t = 8")
show(run(ExperimentConfig.from_dict({"experiment": {"name": "rightmost"}, "replicas": 10, "master_seed": 5,
                                     "sim": {"horizon": 8.0, "step_h": 0.05}}), write=False))

print("survival above 2t (Delta = -1)")
show(run(ExperimentConfig.from_dict({"experiment": {"name": "rare-survival", "lambda": 2.0, "times": [3, 4, 5]},
                                     "replicas": 20000, "master_seed": 5, "sim": {"step_h": 0.25}}),
         write=False))
