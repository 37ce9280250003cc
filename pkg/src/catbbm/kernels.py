"""Exact samplers and densities for Brownian functionals.

Every sampler takes a :class:`~catbbm.rng.RandomStream` and draws from a
fresh generator for that stream, so calling twice with the same stream
returns the same values. Pass ``size`` to get an array of independent draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RandomStream


def gaussian_increment(stream: RandomStream, h: float, size=None):
    """N(0, h) increment(s)."""
    if h <= 0:
        raise ValueError("h must be > 0")
    return stream.generator().normal(0.0, math.sqrt(h), size=size)


def bridge_min_from_uniform(a, b, h, u):
    """Inverse transform of P(min <= w) = exp(-2(a-w)(b-w)/h), w <= min(a, b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a - b
    return 0.5 * (a + b - np.sqrt(d * d - 2.0 * h * np.log(u)))


def bridge_min(stream: RandomStream, a: float, b: float, h: float, size=None):
    """Exact sample of the minimum of a Brownian bridge from ``a`` to ``b`` over ``h``."""
    if h <= 0:
        raise ValueError("h must be > 0")
    u = stream.generator().random(size)
    # Generator.random is in [0, 1); flip to (0, 1] so log(u) is finite
    out = bridge_min_from_uniform(a, b, h, 1.0 - u)
    return float(out) if size is None else out


def bridge_max(stream: RandomStream, a: float, b: float, h: float, size=None):
    """Maximum of the same bridge, by reflection of :func:`bridge_min`."""
    out = -bridge_min(stream, -a, -b, h, size)
    return out


def bridge_hits_zero_prob(a: float, b: float, h: float) -> float:
    if h <= 0:
        raise ValueError("h must be > 0")
    if a * b <= 0:
        return 1.0
    return math.exp(-2.0 * a * b / h)


def bridge_local_time_from_uniform(a, b, h, u):
    """Local time at 0 of a Brownian bridge from ``a`` to ``b`` over ``h``.

    Uses P(L > l) = exp(-((|a| + |b| + l)^2 - (b - a)^2) / (2h)) for l >= 0;
    the atom at 0 carries the no-hit probability.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = np.abs(a) + np.abs(b)
    return np.maximum(0.0, np.sqrt((b - a) ** 2 - 2.0 * h * np.log(u)) - s)


def hitting_time_of_zero(stream: RandomStream, x: float, size=None):
    """First hitting time of 0 for Brownian motion started at ``x`` (x^2 / Z^2)."""
    if x == 0:
        raise ValueError("hitting time from 0 is identically 0")
    z = stream.generator().standard_normal(size)
    return x * x / (z * z)


def hitting_time_cdf(x: float, t: float) -> float:
    """P(H_0 <= t) = 2(1 - Phi(|x| / sqrt t)) = erfc(|x| / sqrt(2t))."""
    if t <= 0:
        return 0.0
    return math.erfc(abs(x) / math.sqrt(2.0 * t))


@dataclass(frozen=True)
class JointLaw:
    """Law of (B_t, L_t) for a standard Brownian motion from 0 at fixed ``t``."""

    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("t must be > 0")


def joint_density(law: JointLaw, y, l):
    """(|y| + l) / sqrt(2 pi t^3) * exp(-(|y| + l)^2 / (2t))."""
    l = np.asarray(l, dtype=float)
    if np.any(l < 0):
        raise ValueError("local time must be >= 0")
    t = law.t
    s = np.abs(np.asarray(y, dtype=float)) + l
    out = s / math.sqrt(2.0 * math.pi * t ** 3) * np.exp(-s * s / (2.0 * t))
    return float(out) if out.ndim == 0 else out


def sample_joint(stream: RandomStream, law: JointLaw, size=None):
    """Exact draw of (y, l) from :func:`joint_density`.

    S = |y| + l is the norm of a centred 3-d Gaussian with variance t per
    coordinate; given S, y is uniform on (-S, S) and l = S - |y|.
    """
    gen = stream.generator()
    shape = (3,) if size is None else (3,) + tuple(int(k) for k in np.atleast_1d(size))
    g = gen.standard_normal(shape)
    s = math.sqrt(law.t) * np.sqrt(np.sum(g * g, axis=0))
    y = s * (2.0 * gen.random(s.shape) - 1.0)
    l = s - np.abs(y)
    if size is None:
        return float(y), float(l)
    return y, l


def joint_cell_probability(law: JointLaw, y0, y1, l0, l1):
    """Mass of the rectangle [y0, y1] x [l0, l1] (y0 <= y1, 0 <= l0 <= l1).

    With g(s) = s e^{-s^2/2t} / sqrt(2 pi t^3) the iterated antiderivative in
    (y, l) is -Phi(s / sqrt t), so each half-plane y >= 0 cell is a
    four-corner difference. Cells straddling y = 0 are split.
    """
    from scipy.special import ndtr

    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    l0 = np.asarray(l0, dtype=float)
    l1 = np.asarray(l1, dtype=float)
    rt = math.sqrt(law.t)

    def pos(a, b):
        # a <= b, both >= 0
        H = lambda s: -ndtr(s / rt)  # noqa: E731
        return H(b + l1) - H(a + l1) - H(b + l0) + H(a + l0)

    lo_neg = np.minimum(y1, 0.0)
    neg = np.where(y0 < 0, pos(np.maximum(-lo_neg, 0.0), -y0), 0.0)
    hi_pos = np.maximum(y0, 0.0)
    posm = np.where(y1 > 0, pos(hi_pos, y1), 0.0)
    return neg + posm
