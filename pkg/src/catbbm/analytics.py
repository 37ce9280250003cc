"""Closed-form reference values and statistical post-processing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .params import DerivedRates

WILSON_Z = 1.959963984540054  # two-sided 95%


def normal_cdf(x):
    """Standard normal CDF. Scalars go through ``math.erfc``; arrays through ``ndtr``."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    return ndtr(np.asarray(x, dtype=float))


def expected_count_above(derived: DerivedRates, t: float, x: float) -> float:
    """Expected number of particles strictly above ``x >= 0`` at time ``t``."""
    if t <= 0:
        raise ValueError("t must be > 0")
    if x < 0:
        raise ValueError(
            "closed form holds for x >= 0 only; use E|N_t| minus the mirrored count for x < 0"
        )
    if math.isinf(x):
        return 0.0
    b, b0 = derived.beta_hat, derived.beta0_hat
    rt = math.sqrt(t)
    return normal_cdf(b0 * rt - x / rt) * math.exp(0.5 * b0 * b0 * t - b0 * x + b * t)


def expected_population(derived: DerivedRates, t: float) -> float:
    if t <= 0:
        raise ValueError("t must be > 0")
    return 2.0 * expected_count_above(derived, t, 0.0)


@dataclass(frozen=True)
class GrowthFit:
    slope: float
    intercept: float
    window: tuple[float, float]
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "window": list(self.window),
            "r_squared": self.r_squared,
            "n_points": self.n_points,
        }


def growth_rate_fit(series: Sequence[tuple[float, float]], window_fraction: float = 0.5) -> GrowthFit:
    """Least-squares slope of log(value) against t over the trailing window."""
    if not 0 < window_fraction <= 1:
        raise ValueError("window_fraction must lie in (0, 1]")
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a sequence of (t, value) pairs")
    t, v = arr[:, 0], arr[:, 1]
    if np.any(v <= 0):
        raise ValueError("values must be positive to take logs")
    t_lo = t.max() - window_fraction * (t.max() - t.min())
    keep = t >= t_lo - 1e-12 * max(1.0, abs(t_lo))
    if keep.sum() < 4:
        raise ValueError(f"need >= 4 points in the fit window, have {int(keep.sum())}")
    tw, yw = t[keep], np.log(v[keep])
    tc = tw - tw.mean()
    slope = float(np.dot(tc, yw - yw.mean()) / np.dot(tc, tc))
    intercept = float(yw.mean() - slope * tw.mean())
    resid = yw - (intercept + slope * tw)
    ss_tot = float(np.sum((yw - yw.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return GrowthFit(slope, intercept, (float(tw.min()), float(tw.max())), r2, int(keep.sum()))


def survival_estimate(successes: int, trials: int, z: float = WILSON_Z) -> tuple[float, float, float]:
    """Point estimate and Wilson score interval."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    n = float(trials)
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return p, lo, hi


def mean_and_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values")
    return math.fsum(v) / v.size, float(np.std(v, ddof=1) / math.sqrt(v.size))


def z_score(estimate: float, se: float, reference: float) -> float:
    if se == 0:
        return 0.0 if estimate == reference else math.copysign(math.inf, estimate - reference)
    return (estimate - reference) / se


def decay_fit(times, successes, trials, min_successes: int = 10):
    """Regress log p-hat on t using only times with at least ``min_successes``.

    Returns ``None`` when fewer than two usable points remain.
    """
    pts = [(t, s / n) for t, s, n in zip(times, successes, trials) if s >= min_successes]
    if len(pts) < 2:
        return None
    t = np.array([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
    return slope, float(y.mean() - slope * t.mean()), len(pts)
