"""Model parameters, offspring laws and the closed-form constants derived from them."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class OffspringDistribution:
    """Finite-support offspring law on {1, 2, ...}.

    ``probs`` is a tuple of ``(n, weight)`` pairs sorted by ``n``. Zero counts
    are rejected: every particle leaves at least one child.
    """

    probs: tuple[tuple[int, float], ...]
    mean: float = field(init=False)

    def __post_init__(self):
        merged: dict[int, float] = {}
        for n, w in self.probs:
            if int(n) != n or n < 1:
                raise ValueError(f"offspring count must be an integer >= 1, got {n!r}")
            if not (w >= 0.0) or not math.isfinite(w):
                raise ValueError(f"offspring weight must be a finite probability, got {w!r}")
            merged[int(n)] = merged.get(int(n), 0.0) + float(w)
        if not merged:
            raise ValueError("offspring distribution is empty")
        total = math.fsum(merged.values())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"offspring weights sum to {total!r}, expected 1")
        pairs = tuple(sorted((n, w) for n, w in merged.items() if w > 0.0))
        object.__setattr__(self, "probs", pairs)
        object.__setattr__(self, "mean", math.fsum(n * w for n, w in pairs))

    @classmethod
    def point_mass(cls, n: int) -> "OffspringDistribution":
        return cls(((n, 1.0),))

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]] | Mapping[int, float]) -> "OffspringDistribution":
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        return cls(tuple((int(n), float(w)) for n, w in pairs))

    @property
    def counts(self) -> np.ndarray:
        return np.array([n for n, _ in self.probs], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.probs], dtype=np.float64)

    @property
    def max_count(self) -> int:
        return self.probs[-1][0]

    @property
    def is_degenerate(self) -> bool:
        """True when the law is the point mass at 1 (no effective growth)."""
        return self.probs == ((1, 1.0),)

    def cdf_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Counts and cumulative weights for inverse-transform sampling."""
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return self.counts, cum

    def to_list(self) -> list[list[float]]:
        return [[n, w] for n, w in self.probs]


@dataclass(frozen=True)
class ModelParams:
    beta: float
    beta0: float
    p_dist: OffspringDistribution
    q_dist: OffspringDistribution

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be > 0, got {self.beta!r}")
        if not (self.beta0 > 0 and math.isfinite(self.beta0)):
            raise ValueError(f"beta0 must be > 0, got {self.beta0!r}")

    @classmethod
    def binary(cls, beta: float = 1.0, beta0: float = 1.0) -> "ModelParams":
        two = OffspringDistribution.point_mass(2)
        return cls(beta, beta0, two, two)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelParams":
        try:
            return cls(
                beta=float(d["beta"]),
                beta0=float(d["beta0"]),
                p_dist=OffspringDistribution.from_pairs(d["p_dist"]),
                q_dist=OffspringDistribution.from_pairs(d["q_dist"]),
            )
        except KeyError as exc:
            raise ValueError(f"model parameters missing key {exc}") from None

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "beta0": self.beta0,
            "p_dist": self.p_dist.to_list(),
            "q_dist": self.q_dist.to_list(),
        }

    def homogeneous_only(self) -> "ModelParams":
        """Same homogeneous part with catalytic fissions made growth-neutral.

        Swapping the catalytic law for the point mass at 1 gives an effective
        catalytic rate of zero, which is how homogeneous-only runs are
        described by the derived constants.
        """
        return ModelParams(self.beta, self.beta0, self.p_dist, OffspringDistribution.point_mass(1))


class Regime(str, enum.Enum):
    CATALYTIC_DOMINANT = "CatalyticDominant"
    HOMOGENEOUS_DOMINANT = "HomogeneousDominant"


@dataclass(frozen=True)
class DerivedRates:
    beta_hat: float
    beta0_hat: float
    m: float
    m0: float
    growth_exponent: float
    lambda_crit: float
    regime: Regime
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "beta0_hat": self.beta0_hat,
            "m": self.m,
            "m0": self.m0,
            "growth_exponent": self.growth_exponent,
            "lambda_crit": self.lambda_crit,
            "regime": self.regime.value,
            "degenerate": self.degenerate,
        }


def rates_from_effective(beta_hat: float, beta0_hat: float, m: float = float("nan"),
                         m0: float = float("nan")) -> DerivedRates:
    """Build DerivedRates straight from the effective rates."""
    if beta_hat < 0 or beta0_hat < 0:
        raise ValueError("effective rates must be non-negative")
    half_sq = 0.5 * beta0_hat * beta0_hat
    regime = Regime.CATALYTIC_DOMINANT if beta_hat <= half_sq else Regime.HOMOGENEOUS_DOMINANT
    degenerate = beta_hat == 0.0 and beta0_hat == 0.0
    if degenerate:
        lam = 0.0
    elif regime is Regime.CATALYTIC_DOMINANT:
        lam = beta_hat / beta0_hat + 0.5 * beta0_hat
    else:
        lam = math.sqrt(2.0 * beta_hat)
    return DerivedRates(
        beta_hat=beta_hat,
        beta0_hat=beta0_hat,
        m=m,
        m0=m0,
        growth_exponent=half_sq + beta_hat,
        lambda_crit=lam,
        regime=regime,
        degenerate=degenerate,
    )


def derive_rates(params: ModelParams) -> DerivedRates:
    m, m0 = params.p_dist.mean, params.q_dist.mean
    return rates_from_effective(params.beta * (m - 1.0), params.beta0 * (m0 - 1.0), m, m0)


def delta_lambda(derived: DerivedRates, lam: float) -> float:
    """Exponential rate of the expected number of particles above ``lam * t``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    b, b0 = derived.beta_hat, derived.beta0_hat
    if lam <= b0:
        return 0.5 * b0 * b0 - b0 * lam + b
    return -0.5 * lam * lam + b


def xlogx_holds(dist: OffspringDistribution) -> tuple[bool, float]:
    """Check sum n log n w_n < inf; finite support makes this always true."""
    s = math.fsum(n * math.log(n) * w for n, w in dist.probs)
    return math.isfinite(s), s


def optimal_split(derived: DerivedRates, lam: float) -> float:
    """Fraction of time spent growing at the origin that maximises split_exponent."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    b0 = derived.beta0_hat
    if b0 == 0.0 or lam >= b0:
        return 0.0
    return 1.0 - lam / b0


def split_exponent(derived: DerivedRates, lam: float, p: float) -> float:
    # grow at the origin for time p*t, then travel at speed lam/(1-p)
    if not (0.0 <= p < 1.0):
        raise ValueError("p must lie in [0, 1)")
    return derived.beta_hat + 0.5 * derived.beta0_hat ** 2 * p - lam * lam / (2.0 * (1.0 - p))
