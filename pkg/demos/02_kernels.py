"""
Exact Brownian samplers
=======================

Bridge minima, hitting times and the joint law of (B_t, L_t), each checked
against its closed form.
"""
import numpy as np

from catbbm import RandomStream
from catbbm.experiments import joint_chi_square
from catbbm.kernels import JointLaw, bridge_min, hitting_time_cdf, hitting_time_of_zero, sample_joint

root = RandomStream(2024)

# depth of the minimum of a 0 -> 0 bridge over unit time: median sqrt(log 2 / 2)
depth = -bridge_min(root.child(0), 0.0, 0.0, 1.0, size=100000)
print("median depth", np.median(depth), "closed form", np.sqrt(np.log(2) / 2))

# first hitting time of 0 from x = 1
ht = hitting_time_of_zero(root.child(1), 1.0, size=100000)
print("P(H <= 1)", np.mean(ht <= 1.0), "closed form", hitting_time_cdf(1.0, 1.0))

# (B_1, L_1): |B| + L is a 3-d Bessel radius, so E[|B| + L] = 2 sqrt(2 / pi)
y, l = sample_joint(root.child(2), JointLaw(1.0), size=100000)
print("E[|B|+L]", np.mean(np.abs(y) + l), "closed form", 2 * np.sqrt(2 / np.pi))

stat, p, dof = joint_chi_square(root.child(3), 1.0, 100000)
print(f"chi-square on a 20x20 grid: statistic {stat:.1f}, dof {dof}, p = {p:.3f}")
