"""Additive martingales M^{+-} (full model) and M^lambda (homogeneous-only model)."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import DerivedRates
from .population import PopulationSnapshot, SnapshotBatch

DEFAULT_EPS = (1e-4, 1e-6, 1e-8)


class Kind(str, enum.Enum):
    PM = "PM"
    LAMBDA = "Lambda"


@dataclass(frozen=True)
class MartingaleKind:
    kind: Kind
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.LAMBDA:
            if self.lam is None or not math.isfinite(self.lam):
                raise ValueError("Lambda martingale needs a finite lambda")
        elif self.lam is not None:
            raise ValueError("PM martingale takes no lambda")

    @classmethod
    def pm(cls):
        return cls(Kind.PM)

    @classmethod
    def of_lambda(cls, lam: float):
        return cls(Kind.LAMBDA, float(lam))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value} if self.lam is None else {"kind": self.kind.value, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "MartingaleKind":
        return cls(Kind(d["kind"]), d.get("lambda"))

    def check(self, homogeneous_only: bool | None) -> None:
        if homogeneous_only is None:
            return
        if self.kind is Kind.LAMBDA and not homogeneous_only:
            raise ValueError("Lambda martingale applies to homogeneous-only simulations only")
        if self.kind is Kind.PM and homogeneous_only:
            raise ValueError("PM martingale applies to the full model, not homogeneous-only runs")

    def log_terms(self, positions: np.ndarray, t: float, derived: DerivedRates) -> np.ndarray:
        b = derived.beta_hat
        if self.kind is Kind.PM:
            b0 = derived.beta0_hat
            return -b0 * np.abs(positions) - 0.5 * b0 * b0 * t - b * t
        lam = self.lam
        return lam * positions - 0.5 * lam * lam * t - b * t


def _sum_exp(log_terms: np.ndarray) -> float:
    # compensated sum; terms span many orders of magnitude at large t
    if log_terms.size == 0:
        return 0.0
    return math.fsum(np.exp(log_terms).tolist())


def evaluate(kind: MartingaleKind, snap: PopulationSnapshot, derived: DerivedRates) -> float:
    kind.check(snap.homogeneous_only)
    return _sum_exp(kind.log_terms(np.asarray(snap.positions, dtype=float), snap.time, derived))


def evaluate_batch(kind: MartingaleKind, sb: SnapshotBatch, derived: DerivedRates, n_replicas: int) -> np.ndarray:
    """Per-replica values from a whole-batch snapshot (compensated per replica)."""
    kind.check(sb.homogeneous_only)
    terms = np.exp(kind.log_terms(sb.positions, sb.time, derived))
    order = np.argsort(sb.rep, kind="stable")
    bounds = np.searchsorted(sb.rep[order], np.arange(n_replicas + 1))
    ts = terms[order]
    return np.array([math.fsum(ts[bounds[r]:bounds[r + 1]].tolist()) for r in range(n_replicas)])


def trajectory(kind: MartingaleKind, snapshots: Sequence[PopulationSnapshot], derived: DerivedRates):
    times = [s.time for s in snapshots]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshots must be ordered in time")
    return [(s.time, evaluate(kind, s, derived)) for s in snapshots]


@dataclass
class LimitReport:
    times: list[float]
    mean: list[float]
    se: list[float]
    median: list[float]
    eps: tuple[float, ...]
    frac_below_eps: list[list[float]]
    n_replicas: int

    @property
    def empirical_mean_by_t(self) -> dict[float, float]:
        return dict(zip(self.times, self.mean))

    @property
    def fraction_below_eps_by_t(self) -> dict[float, float]:
        # headline eps is the middle of the sweep (1e-6 by default)
        k = len(self.eps) // 2
        return {t: f[k] for t, f in zip(self.times, self.frac_below_eps)}

    def to_dict(self) -> dict:
        return {
            "eps": list(self.eps),
            "n_replicas": self.n_replicas,
            "rows": [
                {"t": t, "mean": m, "se": s, "median": md, "frac_below_eps": f}
                for t, m, s, md, f in zip(self.times, self.mean, self.se, self.median, self.frac_below_eps)
            ],
        }


def limit_diagnostic(times: Sequence[float], values, eps: Sequence[float] = DEFAULT_EPS) -> LimitReport:
    """Cross-replica mean, median and fraction below each eps at every time.

    ``values`` has one row per replica and one column per time.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.shape[1] != len(times):
        raise ValueError("values must have shape (n_replicas, len(times))")
    if v.shape[0] < 100:
        raise ValueError("limit diagnostics need at least 100 replicas")
    n = v.shape[0]
    mean = [math.fsum(col.tolist()) / n for col in v.T]
    se = [float(np.std(col, ddof=1) / math.sqrt(n)) for col in v.T]
    med = [float(np.median(col)) for col in v.T]
    frac = [[float(np.mean(col < e)) for e in eps] for col in v.T]
    return LimitReport([float(t) for t in times], mean, se, med, tuple(eps), frac, n)
