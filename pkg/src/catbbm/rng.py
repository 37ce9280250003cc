"""Counter-based, splittable random streams.

A stream is addressed by ``(master_seed, path_key)``. Its 64-bit key is a
hash chain over the path, so child streams are derived without any shared
state and the numbers a consumer sees never depend on scheduling order.
The simulator uses the same hash chain inside jitted code (``key_child``,
``uniform``), so a particle labelled ``u`` in replica ``r`` draws from the key
of ``RandomStream(seed, (r, *u))`` whichever worker runs it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_PATH_SALT = 0xD1B54A32D192ED03
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB

# counters at and above this value are reserved for clocks drawn at birth
BIRTH_COUNTER = 1 << 62


def mix64(z: int) -> int:
    """splitmix64 finalizer on Python ints."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _C1) & _MASK
    z = ((z ^ (z >> 27)) * _C2) & _MASK
    return z ^ (z >> 31)


def root_key(master_seed: int) -> int:
    return mix64((master_seed & _MASK) + _GOLDEN)


def child_key(key: int, index: int) -> int:
    if index < 0:
        raise ValueError("path components must be non-negative")
    return mix64(key ^ mix64(index + _PATH_SALT))


def uniform_py(key: int, counter: int) -> float:
    z = mix64(mix64(key ^ mix64(counter & _MASK)) + _GOLDEN)
    return ((z >> 11) + 0.5) * 2.0 ** -53


@dataclass(frozen=True)
class RandomStream:
    master_seed: int
    path_key: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.master_seed <= _MASK:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        object.__setattr__(self, "path_key", tuple(int(p) for p in self.path_key))

    @property
    def key(self) -> int:
        k = root_key(self.master_seed)
        for p in self.path_key:
            k = child_key(k, p)
        return k

    def child(self, *path: int) -> "RandomStream":
        return RandomStream(self.master_seed, self.path_key + tuple(path))

    def generator(self) -> np.random.Generator:
        """A fresh numpy generator for this stream; same stream, same draws."""
        k = self.key
        return np.random.Generator(np.random.Philox(key=np.array([k, mix64(k ^ _GOLDEN)], dtype=np.uint64)))


# --- jitted twins -----------------------------------------------------------

_U_C1 = np.uint64(_C1)
_U_C2 = np.uint64(_C2)
_U_GOLDEN = np.uint64(_GOLDEN)
_U_SALT = np.uint64(_PATH_SALT)


@nb.njit(inline="always")
def _mix64_nb(z):
    z = (z ^ (z >> np.uint64(30))) * _U_C1
    z = (z ^ (z >> np.uint64(27))) * _U_C2
    return z ^ (z >> np.uint64(31))


@nb.njit(inline="always")
def key_child(key, index):
    return _mix64_nb(key ^ _mix64_nb(np.uint64(index) + _U_SALT))


@nb.njit(inline="always")
def uniform(key, counter):
    z = _mix64_nb(_mix64_nb(key ^ _mix64_nb(np.uint64(counter))) + _U_GOLDEN)
    return (np.float64(z >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16


@nb.njit(inline="always")
def normal(key, counter):
    # Box-Muller from two counters: counter and counter + 1
    u1 = uniform(key, counter)
    u2 = uniform(key, counter + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@nb.njit(cache=True)
def _uniform_array(key, counters):
    out = np.empty(counters.shape[0])
    for i in range(counters.shape[0]):
        out[i] = uniform(key, counters[i])
    return out


def uniforms_for(key: int, counters: np.ndarray) -> np.ndarray:
    """Vectorised jitted uniforms; used to cross-check the Python twin."""
    return _uniform_array(np.uint64(key), np.asarray(counters, dtype=np.uint64))
