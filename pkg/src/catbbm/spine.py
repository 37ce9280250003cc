"""The spine: one distinguished line of descent, under the original and
the changed measures, plus the Many-to-One estimator."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _engine
from .analytics import mean_and_se
from .kernels import JointLaw, sample_joint
from .params import DerivedRates, ModelParams, OffspringDistribution, derive_rates
from .rng import RandomStream


class SpineKind(str, enum.Enum):
    ORIGINAL = "Original"
    TOWARD_ORIGIN_PM = "TowardOriginPM"
    CONSTANT_DRIFT = "ConstantDriftLambda"
    SIGN_DRIFT = "SignDrift"


@dataclass(frozen=True)
class SpineMeasure:
    kind: SpineKind
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SpineKind(self.kind))
        needs_lam = self.kind in (SpineKind.CONSTANT_DRIFT, SpineKind.SIGN_DRIFT)
        if needs_lam:
            if self.lam is None or not math.isfinite(self.lam):
                raise ValueError(f"{self.kind.value} needs a finite lambda")
        elif self.lam is not None:
            raise ValueError(f"{self.kind.value} takes no lambda")

    @classmethod
    def original(cls):
        return cls(SpineKind.ORIGINAL)

    @classmethod
    def toward_origin_pm(cls):
        return cls(SpineKind.TOWARD_ORIGIN_PM)

    @classmethod
    def constant_drift(cls, lam: float):
        return cls(SpineKind.CONSTANT_DRIFT, float(lam))

    @classmethod
    def sign_drift(cls, lam: float):
        return cls(SpineKind.SIGN_DRIFT, float(lam))

    @property
    def biased(self) -> bool:
        return self.kind is not SpineKind.ORIGINAL

    @property
    def homogeneous(self) -> bool:
        # the constant-drift change of measure lives in the homogeneous-only model
        return self.kind is SpineKind.CONSTANT_DRIFT

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.lam is not None:
            d["lambda"] = self.lam
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpineMeasure":
        return cls(SpineKind(d["kind"]), d.get("lambda"))


@dataclass
class SpinePath:
    measure: SpineMeasure
    times: np.ndarray
    xi: np.ndarray
    local_time: np.ndarray
    fission_time: np.ndarray
    fission_at_origin: np.ndarray
    fission_offspring: np.ndarray
    # spine state at each fission instant
    fission_xi: np.ndarray = field(repr=False, default=None)
    fission_local_time: np.ndarray = field(repr=False, default=None)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def fissions(self) -> list[tuple[float, bool, int]]:
        return list(zip(self.fission_time.tolist(), self.fission_at_origin.tolist(),
                        self.fission_offspring.tolist()))

    def n_off_origin(self, t: float | None = None) -> int:
        t = self.horizon if t is None else t
        return int(np.count_nonzero(~self.fission_at_origin & (self.fission_time <= t)))

    def n_at_origin(self, t: float | None = None) -> int:
        t = self.horizon if t is None else t
        return int(np.count_nonzero(self.fission_at_origin & (self.fission_time <= t)))

    def state_at(self, t: float) -> tuple[float, float]:
        """(xi_t, L_t) at a grid time or a fission time."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) <= 1e-9 * max(1.0, abs(t)):
            return float(self.xi[k]), float(self.local_time[k])
        j = np.nonzero(np.abs(self.fission_time - t) <= 1e-12 * max(1.0, abs(t)))[0]
        if j.size:
            return float(self.fission_xi[j[0]]), float(self.fission_local_time[j[0]])
        raise KeyError(f"spine state at t={t} was not recorded")


def size_biased(dist: OffspringDistribution) -> OffspringDistribution:
    """Reweight by k / m."""
    m = dist.mean
    counts, w = dist.counts, dist.weights
    pairs = [(int(k), float(k * wk / m)) for k, wk in zip(counts, w)]
    # renormalise away the last-ulp drift from k * w / m
    total = math.fsum(p[1] for p in pairs)
    return OffspringDistribution.from_pairs([(k, v / total) for k, v in pairs])


def _dynamics(measure: SpineMeasure, params: ModelParams, derived: DerivedRates):
    """(mode, drift, off_rate, cat_rate, cat_enabled, p-law, q-law) for the kernel."""
    if measure.kind is SpineKind.ORIGINAL:
        return 0, 0.0, params.beta, params.beta0, True, params.p_dist, params.q_dist
    p_b, q_b = size_biased(params.p_dist), size_biased(params.q_dist)
    off = derived.m * params.beta
    cat = derived.m0 * params.beta0
    if measure.kind is SpineKind.TOWARD_ORIGIN_PM:
        return 1, -derived.beta0_hat, off, cat, True, p_b, q_b
    if measure.kind is SpineKind.SIGN_DRIFT:
        return 1, measure.lam, off, cat, True, p_b, q_b
    return 2, measure.lam, off, 1.0, False, p_b, q_b


def simulate_spines(measure: SpineMeasure, params: ModelParams, horizon: float, stream: RandomStream,
                    n_replicas: int, step_h: float = 0.005) -> list[SpinePath]:
    """Replica ``r`` uses the key of ``stream.child(r)``."""
    keys = np.array([stream.child(r).key for r in range(n_replicas)], dtype=np.uint64)
    return _simulate(measure, params, horizon, keys, step_h)


def simulate_spine(measure: SpineMeasure, params: ModelParams, horizon: float, stream: RandomStream,
                   step_h: float = 0.005) -> SpinePath:
    return _simulate(measure, params, horizon, np.array([stream.key], dtype=np.uint64), step_h)[0]


def _simulate(measure, params, horizon, keys, step_h):
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    if not step_h > 0:
        raise ValueError("step_h must be > 0")
    derived = derive_rates(params)
    mode, drift, off, cat, cat_on, p_law, q_law = _dynamics(measure, params, derived)
    n_steps = max(1, int(math.ceil(horizon / step_h - 1e-9)))
    h = horizon / n_steps
    pc, pcum = p_law.cdf_table()
    qc, qcum = q_law.cdf_table()
    n = keys.shape[0]
    # generous first guess; rerun with more room if it runs out (same keys, same draws)
    expect = off * horizon + (cat * (1.0 + abs(drift)) * horizon + 4.0 * cat * math.sqrt(horizon) if cat_on else 0)
    max_f = int(n * (2 * expect + 20)) + 64
    while True:
        out = _engine.spine_paths(keys, n_steps, h, mode, float(drift), float(off), float(cat), cat_on,
                                  pc, pcum, qc, qcum, max_f)
        if out[-1]:
            break
        max_f *= 4
    xi, lt, f_rep, f_time, f_orig, f_count, f_x, f_l, _ = out
    times = np.arange(n_steps + 1) * h
    times[-1] = horizon
    order = np.lexsort((f_time, f_rep))
    f_rep, f_time, f_orig, f_count, f_x, f_l = (a[order] for a in (f_rep, f_time, f_orig, f_count, f_x, f_l))
    bounds = np.searchsorted(f_rep, np.arange(n + 1))
    paths = []
    for r in range(n):
        sl = slice(bounds[r], bounds[r + 1])
        paths.append(SpinePath(measure, times, xi[r], lt[r], f_time[sl], f_orig[sl], f_count[sl],
                               f_x[sl], f_l[sl]))
    return paths


# --- Many-to-One ----------------------------------------------------------------

def many_to_one_estimate(params: ModelParams, t: float, x: float, n_samples: int,
                         stream: RandomStream) -> tuple[float, float]:
    """Mean and standard error of 1{xi_t > x} e^{beta0_hat L_t + beta_hat t}.

    Draws (xi_t, L_t) in one shot from their exact joint law.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    d = derive_rates(params)
    y, l = sample_joint(stream, JointLaw(t), size=n_samples)
    vals = np.where(y > x, np.exp(d.beta0_hat * l + d.beta_hat * t), 0.0)
    return mean_and_se(vals)


def many_to_one_path_estimate(params: ModelParams, t: float, functional: Callable[[SpinePath], float],
                              n_samples: int, stream: RandomStream,
                              step_h: float = 0.005) -> tuple[float, float]:
    """Many-to-One for a path functional f, using simulated Original spines."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    d = derive_rates(params)
    paths = simulate_spines(SpineMeasure.original(), params, t, stream, n_samples, step_h)
    vals = np.array([functional(p) * math.exp(d.beta0_hat * p.local_time[-1] + d.beta_hat * t)
                     for p in paths])
    return mean_and_se(vals)


# --- spine decomposition ----------------------------------------------------------

def spine_weight(measure: SpineMeasure, derived: DerivedRates, s, xi, lt):
    """spine(s) = M1_s e^{-beta_hat s - beta0_hat L_s} for the measure's M1."""
    s = np.asarray(s, dtype=float)
    xi = np.asarray(xi, dtype=float)
    lt = np.asarray(lt, dtype=float)
    b, b0 = derived.beta_hat, derived.beta0_hat
    k = measure.kind
    if k is SpineKind.ORIGINAL:
        e = -b0 * lt - b * s
    elif k is SpineKind.TOWARD_ORIGIN_PM:
        e = -b0 * np.abs(xi) - 0.5 * b0 * b0 * s - b * s
    elif k is SpineKind.SIGN_DRIFT:
        lam = measure.lam
        # Tanaka: int sgn(xi) dxi = |xi| - L
        e = lam * np.abs(xi) - (lam + b0) * lt - 0.5 * lam * lam * s - b * s
    else:
        lam = measure.lam
        e = lam * xi - 0.5 * lam * lam * s - b * s
    return np.exp(e)


def spine_decomposition_value(path: SpinePath, measure: SpineMeasure, params: ModelParams, t: float) -> float:
    """spine(t) + sum over fissions S_n <= t of (A_n - 1) spine(S_n)."""
    if path.measure != measure:
        raise ValueError(f"path was simulated under {path.measure}, not {measure}")
    if t < 0 or t > path.horizon + 1e-12:
        raise ValueError("t must lie in [0, horizon]")
    derived = derive_rates(params.homogeneous_only() if measure.homogeneous else params)
    xi_t, l_t = path.state_at(t)
    terms = [float(spine_weight(measure, derived, t, xi_t, l_t))]
    m = path.fission_time <= t
    if m.any():
        w = spine_weight(measure, derived, path.fission_time[m], path.fission_xi[m], path.fission_local_time[m])
        terms.extend(((path.fission_offspring[m] - 1) * w).tolist())
    return math.fsum(terms)


# --- CSV ----------------------------------------------------------------------------

def write_path_csv(path: SpinePath, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "xi", "local_time"])
    for t, x, l in zip(path.times.tolist(), path.xi.tolist(), path.local_time.tolist()):
        w.writerow([f"{t:.17g}", f"{x:.17g}", f"{l:.17g}"])


def write_fissions_csv(path: SpinePath, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "at_origin", "offspring"])
    for t, o, a in path.fissions:
        w.writerow([f"{t:.17g}", "true" if o else "false", a])
