"""Particle-level simulation of BBM with homogeneous and catalytic branching.

Positions and local times are exact in law at step boundaries (Skorokhod
reflection with exact bridge minima); homogeneous deaths happen at their exact
clock time; catalytic deaths happen, at position 0, at the exact time the
local time reaches the particle's exponential level (an inverse Gaussian
passage time of the driving bridge). The law does not depend on the step.

Many replicas are advanced together in one particle array. Each particle's
randomness is keyed by ``(master_seed, replica, label, step)``, so the law
and the exact numbers of a replica do not depend on which other replicas share
its batch or on how replicas are spread over workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numba as nb
import numpy as np

from . import _engine
from .analytics import normal_cdf
from .params import DerivedRates, ModelParams, derive_rates
from .rng import BIRTH_COUNTER, RandomStream, child_key, uniform_py
from .rng import normal as _normal_nb
from .rng import uniform as _uniform_nb

Label = tuple[int, ...]


def format_label(label: Label) -> str:
    return ".".join(str(c) for c in label)


def parse_label(text: str) -> Label:
    return tuple(int(c) for c in text.split(".")) if text else ()


def is_ancestor(u: Label, v: Label) -> bool:
    """``u < v``: u's label is a strict prefix of v's."""
    return len(u) < len(v) and v[: len(u)] == u


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class LevelPruning:
    """Drop particles whose expected number of descendants above ``level``
    at ``time`` (summed over targets) is below ``eps``.

    Valid when the only statistics of interest are counts above the targets.
    """

    targets: tuple[tuple[float, float], ...]
    eps: float = 1e-10
    every: float = 0.1


@dataclass(frozen=True)
class FrontPruning:
    """Drop particles that will almost surely not be rightmost later on.

    At a checkpoint ``s`` the guessed front at a future record time ``t`` is
    Y = R_s + lambda_crit (t - s) - slack sqrt(t - s); a particle is dropped
    (never a replica's current rightmost) when the many-to-one bound on its
    descendants above Y, summed over future record times, is below ``eps``.

    The guess only steers pruning. Correctness is certified afterwards: the
    kept particles form a subsystem, so their rightmost R'_t is a lower bound
    on the true R_t, and the futures of dropped particles are independent of
    the kept ones. Hence P(R_t != R'_t | kept system) is at most the sum over
    dropped particles of their expected descendants above R'_t. That sum,
    added over record times, is reported as ``prune_bound``.
    """

    eps: float = 1e-8
    slack: float = 0.5
    every: float = 0.25


@dataclass(frozen=True)
class SimConfig:
    step_h: float = 0.005
    horizon: float = 1.0
    record_times: tuple[float, ...] = ()
    population_cap: int = 10 ** 6
    cap_policy: str = "StopAndFlag"
    homogeneous_only: bool = False
    windows: tuple[int, ...] = ()
    track_genealogy: bool = True
    keep_snapshots: bool = True
    pruning: LevelPruning | FrontPruning | None = None

    def __post_init__(self):
        if not self.step_h > 0:
            raise ValueError("step_h must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        rt = tuple(sorted(float(t) for t in self.record_times))
        if any(t < 0 or t > self.horizon + 1e-12 for t in rt):
            raise ValueError("record_times must lie in [0, horizon]")
        object.__setattr__(self, "record_times", rt)
        if self.population_cap < 1:
            raise ValueError("population_cap must be >= 1")
        if self.cap_policy != "StopAndFlag":
            raise ValueError(f"unknown cap_policy {self.cap_policy!r}")
        for n in self.windows:
            if n < 0 or n + 1 > self.horizon + 1e-12:
                raise ValueError(f"window [{n}, {n + 1}] outside [0, horizon]")
        if self.windows and not self.track_genealogy:
            raise ValueError("trajectory windows need genealogy tracking")

    def all_record_times(self) -> tuple[float, ...]:
        extra = set()
        for n in self.windows:
            extra.update((float(n), float(n + 1)))
        return tuple(sorted(set(self.record_times) | extra))

    def time_grid(self) -> np.ndarray:
        h = self.step_h
        n = int(math.floor(self.horizon / h + 1e-9))
        pts = [k * h for k in range(n + 1)]
        pts.extend(self.all_record_times())
        pts.append(self.horizon)
        pts = np.array(sorted(pts))
        keep = np.concatenate(([True], np.diff(pts) > 1e-9 * max(1.0, self.horizon)))
        grid = pts[keep]
        # snap near-duplicates onto the requested record times
        for t in self.all_record_times() + (self.horizon,):
            j = int(np.argmin(np.abs(grid - t)))
            grid[j] = t
        return grid

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "pruning"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sim settings: {sorted(unknown)}")
        kwargs = dict(d)
        for k in ("record_times", "windows"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "step_h": self.step_h,
            "horizon": self.horizon,
            "record_times": list(self.record_times),
            "population_cap": self.population_cap,
            "cap_policy": self.cap_policy,
            "homogeneous_only": self.homogeneous_only,
            "windows": list(self.windows),
        }


# --- particle state (single-particle API) -------------------------------------

@dataclass(frozen=True)
class ParticleState:
    label: Label
    sign: int
    abs_pos: float
    local_time: float
    driver_value: float
    driver_min: float
    hom_clock_residual: float
    cat_clock_level: float
    birth_time: float
    time: float
    key: int

    @property
    def position(self) -> float:
        return self.sign * self.abs_pos

    @classmethod
    def fresh(cls, params: ModelParams, stream: RandomStream, label: Label = (), position: float = 0.0,
              local_time: float = 0.0, time: float = 0.0, homogeneous_only: bool = False) -> "ParticleState":
        k = stream.key
        tau = -math.log(uniform_py(k, BIRTH_COUNTER)) / params.beta
        ell = math.inf if homogeneous_only else -math.log(uniform_py(k, BIRTH_COUNTER + 1)) / params.beta0
        return cls(label, int(np.sign(position)), abs(position), local_time, abs(position), abs(position),
                   tau, ell, time, time, k)


@dataclass(frozen=True)
class BranchEvent:
    time: float
    label: Label
    kind: str  # "hom" or "cat"
    position: float
    n_children: int


def step_particle(state: ParticleState, h: float, stream: RandomStream, step_idx: int = 0,
                  cat_enabled: bool = True) -> tuple[ParticleState, list[BranchEvent]]:
    """Advance one particle by at most ``h`` using the simulator's kernel.

    Stops early at a death; the returned state then carries the death time
    and position and ``events`` holds the branch event (offspring are drawn
    separately with :func:`branch_offspring`). Randomness comes from
    ``stream.key`` only.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    key = np.uint64(stream.key)
    base = np.uint64(step_idx) * _engine.SLOTS
    sub = min(state.hom_clock_residual, h)
    a = state.abs_pos
    new_a, dl, dend, m = _engine.reflected_substep(a, sub, 0.0, key, base)
    touched = m <= 0.0
    sign = state.sign
    if touched:
        sign = 1 if _uniform_nb(key, base + np.uint64(3)) < 0.5 else -1
    driver_value = state.driver_value + (dend - a)
    driver_min = min(state.driver_min, state.driver_value + (m - a))
    events: list[BranchEvent] = []
    if cat_enabled and dl >= state.cat_clock_level:
        lt = state.local_time + state.cat_clock_level
        t_cat = float(_engine.bridge_passage_time(a, dend, -state.cat_clock_level, sub, key, base))
        new = replace(state, sign=0, abs_pos=0.0, local_time=lt,
                      driver_value=state.driver_value - a - state.cat_clock_level,
                      driver_min=min(state.driver_min, state.driver_value - a - state.cat_clock_level),
                      hom_clock_residual=state.hom_clock_residual - t_cat,
                      cat_clock_level=0.0, time=state.time + t_cat)
        events.append(BranchEvent(new.time, state.label, "cat", 0.0, 0))
        return new, events
    lt = state.local_time + dl
    new = replace(state, sign=sign, abs_pos=new_a, local_time=lt, driver_value=driver_value,
                  driver_min=driver_min, hom_clock_residual=state.hom_clock_residual - sub,
                  cat_clock_level=state.cat_clock_level - dl, time=state.time + sub)
    if state.hom_clock_residual <= h:
        events.append(BranchEvent(new.time, state.label, "hom", new.position, 0))
    return new, events


def branch_offspring(parent: ParticleState, at_origin: bool, params: ModelParams,
                     stream: RandomStream, homogeneous_only: bool = False) -> list[ParticleState]:
    """Children of ``parent`` at its death position, with fresh clocks."""
    dist = params.q_dist if at_origin else params.p_dist
    counts, cum = dist.cdf_table()
    u = uniform_py(stream.key, 4)
    k = int(counts[np.searchsorted(cum, u)])
    pos = 0.0 if at_origin else parent.position
    children = []
    for c in range(1, k + 1):
        children.append(ParticleState.fresh(params, stream.child(c), parent.label + (c,), pos,
                                            parent.local_time, parent.time, homogeneous_only))
    return children


# --- results -----------------------------------------------------------------

class Genealogy:
    """Per-particle table indexed by global id; roots are ids ``0..n_rep-1``."""

    def __init__(self, parent, cidx, rep, birth, death, kind, pos, nchild, lt):
        self.parent = parent
        self.cidx = cidx
        self.rep = rep
        self.birth = birth
        self.death = death
        self.kind = kind
        self.pos = pos
        self.nchild = nchild
        self.local_time_at_birth = lt
        self._cache: dict[int, Label] = {}

    def __len__(self):
        return self.parent.shape[0]

    def label(self, gid: int) -> Label:
        path = []
        g = int(gid)
        cache = self._cache
        while self.parent[g] >= 0:
            if g in cache:
                break
            path.append(int(self.cidx[g]))
            g = int(self.parent[g])
        prefix = cache.get(g, ())
        out = prefix + tuple(reversed(path))
        cache[int(gid)] = out
        return out

    def labels(self, gids: Iterable[int]) -> list[Label]:
        return [self.label(g) for g in gids]


@dataclass
class PopulationSnapshot:
    time: float
    positions: np.ndarray
    local_times: np.ndarray
    gids: np.ndarray | None = None
    genealogy: Genealogy | None = field(default=None, repr=False)
    # None for hand-built snapshots; set by the simulator
    homogeneous_only: bool | None = None

    def __len__(self):
        return self.positions.shape[0]

    @property
    def labels(self) -> list[Label]:
        if getattr(self, "_labels", None) is not None:
            return list(self._labels)
        if self.gids is None or self.genealogy is None:
            raise ValueError("snapshot was recorded without genealogy")
        return self.genealogy.labels(self.gids)

    @property
    def particles(self) -> list[tuple[Label, float, float]]:
        return list(zip(self.labels, self.positions.tolist(), self.local_times.tolist()))

    @classmethod
    def from_particles(cls, time: float, particles: Sequence[tuple[Label, float, float]]) -> "PopulationSnapshot":
        """Build a snapshot by hand (labels are kept for reference only)."""
        labels = [tuple(p[0]) for p in particles]
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be unique")
        pos = np.array([p[1] for p in particles], dtype=float)
        lt = np.array([p[2] for p in particles], dtype=float)
        snap = cls(time, pos, lt)
        snap._labels = labels
        return snap


@dataclass
class SnapshotBatch:
    """All replicas' particles at one record time."""

    time: float
    rep: np.ndarray
    positions: np.ndarray
    local_times: np.ndarray
    gids: np.ndarray
    homogeneous_only: bool = False

    def for_replica(self, r: int, genealogy: Genealogy | None = None) -> PopulationSnapshot:
        m = self.rep == r
        return PopulationSnapshot(self.time, self.positions[m], self.local_times[m],
                                  self.gids[m] if genealogy is not None else None, genealogy,
                                  self.homogeneous_only)


@dataclass
class Trajectory:
    """Step-level path segments of every particle alive during [n, n+1]."""

    n: int
    step_h: float
    gid: np.ndarray
    rep: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    sup: np.ndarray
    inf: np.ndarray
    end_gids: np.ndarray
    end_rep: np.ndarray
    genealogy: Genealogy = field(repr=False)

    def for_replica(self, r: int) -> "Trajectory":
        m = self.rep == r
        e = self.end_rep == r
        return Trajectory(self.n, self.step_h, self.gid[m], self.rep[m], self.t0[m], self.t1[m],
                          self.x0[m], self.x1[m], self.sup[m], self.inf[m],
                          self.end_gids[e], self.end_rep[e], self.genealogy)


@dataclass
class SimulationResult:
    snapshots: list[PopulationSnapshot]
    event_log: list[BranchEvent]
    truncated: bool
    truncation_time: float | None = None
    trajectories: dict[int, Trajectory] = field(default_factory=dict)
    pruned: int = 0
    prune_bound: float = 0.0

    def snapshot_at(self, t: float) -> PopulationSnapshot:
        for s in self.snapshots:
            if abs(s.time - t) < 1e-9:
                return s
        raise KeyError(f"no snapshot recorded at t={t}")


@dataclass
class BatchResult:
    record_times: tuple[float, ...]
    n_replicas: int
    counts: np.ndarray                 # (n_replicas, n_times) kept population; -1 after truncation
    truncated: np.ndarray              # bool per replica
    truncation_time: np.ndarray        # nan when not truncated
    pruned: np.ndarray                 # particles dropped by pruning, per replica
    prune_bound: np.ndarray            # upper bound on P(pruning changed a target statistic)
    snapshots: dict[float, SnapshotBatch]
    trajectories: dict[int, Trajectory]
    genealogy: Genealogy | None
    particle_steps: int

    def result_for(self, r: int) -> SimulationResult:
        snaps = [sb.for_replica(r, self.genealogy) for t, sb in sorted(self.snapshots.items())]
        events = []
        g = self.genealogy
        if g is not None:
            idx = np.nonzero((g.rep == r) & ~np.isnan(g.death))[0]
            order = np.lexsort((idx, g.death[idx]))
            for j in idx[order]:
                events.append(BranchEvent(float(g.death[j]), g.label(j),
                                          "hom" if g.kind[j] == _engine.KIND_HOM else "cat",
                                          float(g.pos[j]), int(g.nchild[j])))
        trajs = {n: tr.for_replica(r) for n, tr in self.trajectories.items()}
        tt = self.truncation_time[r]
        return SimulationResult(snaps, events, bool(self.truncated[r]),
                                None if math.isnan(tt) else float(tt), trajs,
                                int(self.pruned[r]), float(self.prune_bound[r]))


# --- pruning bounds ---------------------------------------------------------

def descendant_mass_bound(derived: DerivedRates, abs_pos, r, level):
    """Upper bound on the expected number of descendants above ``level``
    after time ``r`` of a particle at distance ``abs_pos`` from the origin.

    Paths that avoid 0 only branch homogeneously; a path that hits 0 first
    does no better than starting at 0 (the closed-form expected count from 0,
    discounted by e^{-beta_hat s}, increases in s). Broadcasts over all three
    arguments; levels <= 0 give inf.
    """
    a, r, level = np.broadcast_arrays(np.asarray(abs_pos, dtype=float), np.asarray(r, dtype=float),
                                      np.asarray(level, dtype=float))
    b, b0 = derived.beta_hat, derived.beta0_hat
    rt = np.sqrt(r)
    with np.errstate(over="ignore", invalid="ignore"):
        free = np.exp(b * r) * normal_cdf((a - level) / rt)
        from_zero = normal_cdf(b0 * rt - level / rt) * np.exp(0.5 * b0 * b0 * r - b0 * level + b * r)
        hit = 2.0 * normal_cdf(-a / rt)
        out = free + hit * from_zero
    return np.where(level > 0, out, np.inf)


# --- the simulator ------------------------------------------------------------

class _Buffers:
    FIELDS = (("sign", np.int8), ("apos", np.float64), ("lt", np.float64), ("tau", np.float64),
              ("ell", np.float64), ("key", np.uint64), ("rep", np.int32), ("gid", np.int64),
              ("alive", np.bool_), ("rem", np.float64), ("tstart", np.float64))
    GFIELDS = (("parent", np.int64), ("cidx", np.int32), ("rep", np.int32), ("birth", np.float64),
               ("death", np.float64), ("kind", np.int8), ("pos", np.float64), ("nchild", np.int32),
               ("lt", np.float64))
    SFIELDS = (("gid", np.int64), ("rep", np.int32), ("t0", np.float64), ("t1", np.float64),
               ("x0", np.float64), ("x1", np.float64), ("sup", np.float64), ("inf", np.float64))

    def __init__(self, cap, gcap, scap):
        self.p = {k: np.zeros(cap, dtype=t) for k, t in self.FIELDS}
        self.g = {k: np.zeros(gcap, dtype=t) for k, t in self.GFIELDS}
        self.s = {k: np.zeros(scap, dtype=t) for k, t in self.SFIELDS}

    @staticmethod
    def _grow(d, need):
        cap = next(iter(d.values())).shape[0]
        new = max(need, int(cap * 1.5) + 16)
        for k, v in d.items():
            w = np.zeros(new, dtype=v.dtype)
            w[:cap] = v
            d[k] = w

    def compact(self, n):
        alive = self.p["alive"][:n]
        keep = np.nonzero(alive)[0]
        for k, v in self.p.items():
            v[: keep.shape[0]] = v[keep]
        return keep.shape[0]


def simulate_batch(params: ModelParams, cfg: SimConfig, stream: RandomStream, n_replicas: int,
                   first_replica: int = 0,
                   observer: Callable[[SnapshotBatch], None] | None = None) -> BatchResult:
    """Run replicas ``first_replica .. first_replica + n_replicas - 1``.

    Replica ``r`` starts from the key of ``stream.child(r)``. Results are
    indexed ``0..n_replicas-1`` in that order.
    """
    keys = [stream.child(first_replica + r).key for r in range(n_replicas)]
    return _run(params, cfg, keys, observer)


def simulate(params: ModelParams, cfg: SimConfig, stream: RandomStream) -> SimulationResult:
    """One realisation started from ``stream.key``."""
    batch = _run(params, cfg, [stream.key], None)
    return batch.result_for(0)


def _run(params, cfg, root_keys, observer) -> BatchResult:
    n_rep = len(root_keys)
    grid = cfg.time_grid()
    rec_times = cfg.all_record_times()
    rec_set = {t: i for i, t in enumerate(rec_times)}
    derived = derive_rates(params.homogeneous_only() if cfg.homogeneous_only else params)
    cat_enabled = not cfg.homogeneous_only
    track = cfg.track_genealogy
    p_counts, p_cum = params.p_dist.cdf_table()
    q_counts, q_cum = params.q_dist.cdf_table()

    cap0 = max(1024, 4 * n_rep)
    buf = _Buffers(cap0, cap0 if track else 1, 1024 if cfg.windows else 1)
    P, G, S = buf.p, buf.g, buf.s
    for r, k in enumerate(root_keys):
        P["sign"][r] = 0
        P["apos"][r] = 0.0
        P["lt"][r] = 0.0
        P["tau"][r] = -math.log(uniform_py(k, BIRTH_COUNTER)) / params.beta
        P["ell"][r] = -math.log(uniform_py(k, BIRTH_COUNTER + 1)) / params.beta0 if cat_enabled else math.inf
        P["key"][r] = k
        P["rep"][r] = r
        P["gid"][r] = r if track else -1
        P["alive"][r] = True
    if track:
        G["parent"][:n_rep] = -1
        G["rep"][:n_rep] = np.arange(n_rep)
        G["death"][:n_rep] = np.nan
        G["pos"][:n_rep] = np.nan
    n = n_rep
    next_gid = n_rep if track else 0
    n_seg = 0
    pop = np.ones(n_rep, dtype=np.int64)
    active = np.ones(n_rep, dtype=bool)
    truncated = np.zeros(n_rep, dtype=bool)
    trunc_time = np.full(n_rep, np.nan)
    pruned = np.zeros(n_rep, dtype=np.int64)
    prune_bound = np.zeros(n_rep)
    counts = np.full((n_rep, len(rec_times)), -1, dtype=np.int64)
    snapshots: dict[float, SnapshotBatch] = {}
    trajectories: dict[int, Trajectory] = {}
    window_seg_start: dict[int, int] = {}
    particle_steps = 0
    next_prune = cfg.pruning.every if cfg.pruning is not None else math.inf
    dropped: list = []

    def record(t):
        m = P["alive"][:n]
        sb = SnapshotBatch(t, P["rep"][:n][m].copy(), (P["sign"][:n][m] * P["apos"][:n][m]).astype(float),
                           P["lt"][:n][m].copy(), P["gid"][:n][m].copy(), cfg.homogeneous_only)
        counts[:, rec_set[t]] = np.where(active, np.bincount(sb.rep, minlength=n_rep), -1)
        if dropped:
            front = np.full(n_rep, -np.inf)
            np.maximum.at(front, sb.rep, sb.positions)
            prune_bound[:] += _front_certificate(derived, dropped, t, front)
        if observer is not None:
            observer(sb)
        if cfg.keep_snapshots:
            snapshots[t] = sb
        for w in cfg.windows:
            if t == float(w):
                window_seg_start[w] = n_seg
            elif t == float(w + 1):
                s0 = window_seg_start[w]
                trajectories[w] = (s0, n_seg, sb.gids, sb.rep)

    if 0.0 in rec_set:
        record(0.0)

    for step_idx in range(len(grid) - 1):
        t0, t1 = float(grid[step_idx]), float(grid[step_idx + 1])
        h = t1 - t0
        in_window = any(w <= t0 and t1 <= w + 1 + 1e-12 for w in cfg.windows)
        n_start = n
        i = 0
        while True:
            i, n, next_gid, n_seg, _ = _engine.advance_step(
                n_start, n, h, t0, step_idx,
                P["sign"], P["apos"], P["lt"], P["tau"], P["ell"], P["key"], P["rep"], P["gid"],
                P["alive"], P["rem"], P["tstart"],
                params.beta, params.beta0, cat_enabled,
                p_counts, p_cum, q_counts, q_cum,
                pop, track, next_gid,
                G["parent"], G["cidx"], G["rep"], G["birth"], G["death"], G["kind"], G["pos"],
                G["nchild"], G["lt"],
                in_window, n_seg,
                S["gid"], S["rep"], S["t0"], S["t1"], S["x0"], S["x1"], S["sup"], S["inf"],
                i,
            )
            if i >= n:
                break
            kmax = max(params.p_dist.max_count, params.q_dist.max_count)
            if n + kmax > P["sign"].shape[0]:
                buf._grow(P, n + kmax)
            if track and next_gid + kmax > G["parent"].shape[0]:
                buf._grow(G, next_gid + kmax)
            if in_window and n_seg + 1 > S["gid"].shape[0]:
                buf._grow(S, n_seg + 1)
        particle_steps += int(pop[active].sum())

        # population cap: stop and flag
        over = active & (pop > cfg.population_cap)
        if over.any():
            bad = np.nonzero(over)[0]
            m = np.isin(P["rep"][:n], bad)
            P["alive"][:n][m] = False
            active[bad] = False
            truncated[bad] = True
            trunc_time[bad] = t1

        if cfg.pruning is not None and t1 >= next_prune - 1e-12 and t1 < cfg.horizon - 1e-12:
            next_prune += cfg.pruning.every
            _prune(cfg, derived, P, n, t1, rec_times, pop, pruned, prune_bound, dropped)

        dead = n - int(P["alive"][:n].sum())
        if dead > 0 and (dead > n // 4 or t1 in rec_set):
            n = buf.compact(n)

        if t1 in rec_set and t1 > 0.0:
            record(t1)

    genealogy = None
    if track:
        genealogy = Genealogy(*(G[k][:next_gid].copy() for k, _ in _Buffers.GFIELDS))
    trajs = {}
    for w, (s0, s1, end_g, end_r) in trajectories.items():
        trajs[w] = Trajectory(w, cfg.step_h, *(S[k][s0:s1].copy() for k, _ in _Buffers.SFIELDS),
                              end_g, end_r, genealogy)
    return BatchResult(rec_times, n_rep, counts, truncated, trunc_time, pruned, prune_bound,
                       snapshots, trajs, genealogy, particle_steps)


def _prune(cfg, derived, P, n, s, rec_times, pop, pruned, prune_bound, dropped):
    pr = cfg.pruning
    alive = P["alive"][:n]
    idx = np.nonzero(alive)[0]
    if idx.size == 0:
        return
    a = P["apos"][idx]
    reps = P["rep"][idx]
    future = [t for t in rec_times if t > s + 1e-12]
    if isinstance(pr, LevelPruning):
        future = [(t, level) for t, level in pr.targets if t > s + 1e-12]
    if not future:
        return
    mass = np.zeros(idx.size)
    if isinstance(pr, LevelPruning):
        for t, level in future:
            mass += descendant_mass_bound(derived, a, t - s, level)
    else:
        x = P["sign"][idx] * a
        front = np.full(pop.shape[0], -np.inf)
        np.maximum.at(front, reps, x)
        for t in future:
            r = t - s
            y = front[reps] + derived.lambda_crit * r - pr.slack * math.sqrt(r)
            mass += descendant_mass_bound(derived, a, r, y)
        # never drop a replica's current rightmost particle
        mass[x >= front[reps]] = np.inf
    drop = mass < pr.eps
    if not drop.any():
        return
    d_idx = idx[drop]
    P["alive"][d_idx] = False
    d_rep = reps[drop]
    k = np.bincount(d_rep, minlength=pop.shape[0])
    pop -= k
    pruned += k
    if isinstance(pr, LevelPruning):
        # a-priori bound: the targets are fixed
        prune_bound += np.bincount(d_rep, weights=mass[drop], minlength=pop.shape[0])
    else:
        dropped.append((d_rep.copy(), s, a[drop].copy()))


def _front_certificate(derived, dropped, t, front):
    """Per-replica sum of expected descendants above the kept front at ``t``."""
    cert = np.zeros(front.shape[0])
    for d_rep, s, a in dropped:
        if s >= t - 1e-12:
            continue
        lev = front[d_rep]
        m = descendant_mass_bound(derived, a, t - s, np.where(np.isfinite(lev), lev, 1.0))
        m = np.where(np.isfinite(lev), m, 0.0)
        cert += np.bincount(d_rep, weights=m, minlength=front.shape[0])
    return cert


# --- counting operations ------------------------------------------------------

def count_above(snap: PopulationSnapshot, x: float) -> int:
    return int(np.count_nonzero(snap.positions > x))


def count_below(snap: PopulationSnapshot, x: float) -> int:
    return int(np.count_nonzero(snap.positions < x))


def rightmost(snap: PopulationSnapshot) -> float:
    if len(snap) == 0:
        raise ValueError("empty snapshot has no rightmost particle")
    return float(snap.positions.max())


@nb.njit(cache=True)
def _propagate(parent, birth, gids_born, own, t_start, combine_max):
    # gids_born ascending; a parent always has a smaller id than its children
    for g in gids_born:
        p = parent[g]
        if p >= 0 and birth[g] > t_start:
            if combine_max:
                if own[p] > own[g]:
                    own[g] = own[p]
            else:
                if own[p] < own[g]:
                    own[g] = own[p]
    return own


def _check_traj(traj: Trajectory):
    if traj.step_h > 0.01 + 1e-12:
        raise ValueError(f"trajectory step {traj.step_h} too coarse; envelope counts need h <= 0.01")
    if traj.gid.size == 0 and traj.end_gids.size > 0:
        raise ValueError("trajectory has no recorded segments for its window")


def _path_reduce(traj: Trajectory, seg_values: np.ndarray, use_max: bool) -> np.ndarray:
    g = traj.genealogy
    n_g = len(g)
    fill = -np.inf if use_max else np.inf
    own = np.full(n_g, fill)
    if use_max:
        np.maximum.at(own, traj.gid, seg_values)
    else:
        np.minimum.at(own, traj.gid, seg_values)
    born = np.unique(traj.gid)
    own = _propagate(g.parent, g.birth, born, own, float(traj.n), use_max)
    return own[traj.end_gids]


def count_envelope(traj: Trajectory, lam: float, n: int | None = None) -> int:
    """Particles alive at n+1 whose path over [n, n+1] reached ``lam * n``."""
    _check_traj(traj)
    n = traj.n if n is None else n
    if n != traj.n:
        raise ValueError(f"trajectory covers window {traj.n}, not {n}")
    sup = _path_reduce(traj, traj.sup, use_max=True)
    return int(np.count_nonzero(sup >= lam * n))


def count_path_above(traj: Trajectory, lam: float, t: int | None = None) -> int:
    """Particles alive at t+1 whose path stayed strictly above ``lam * s`` on [t, t+1]."""
    _check_traj(traj)
    t = traj.n if t is None else t
    if t != traj.n:
        raise ValueError(f"trajectory covers window {traj.n}, not {t}")
    margin = traj.inf - np.maximum(lam * traj.t0, lam * traj.t1)
    worst = _path_reduce(traj, margin, use_max=False)
    return int(np.count_nonzero(worst > 0))


# --- batch helpers ----------------------------------------------------------

def counts_above_by_replica(sb: SnapshotBatch, x: float, n_replicas: int) -> np.ndarray:
    return np.bincount(sb.rep[sb.positions > x], minlength=n_replicas)


def rightmost_by_replica(sb: SnapshotBatch, n_replicas: int) -> np.ndarray:
    out = np.full(n_replicas, -np.inf)
    np.maximum.at(out, sb.rep, sb.positions)
    return out


# --- CSV ------------------------------------------------------------------------

def write_snapshots_csv(snapshots: Sequence[PopulationSnapshot], fh) -> None:
    """``time,label,position,local_time``; particles ordered by label."""
    import csv

    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "label", "position", "local_time"])
    for snap in snapshots:
        rows = sorted(zip(snap.labels, snap.positions.tolist(), snap.local_times.tolist()))
        for lab, x, l in rows:
            w.writerow([f"{snap.time:.17g}", format_label(lab), f"{x:.17g}", f"{l:.17g}"])


def write_events_csv(events: Sequence[BranchEvent], fh) -> None:
    """``time,label,kind,position,n_children`` in time order."""
    import csv

    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "label", "kind", "position", "n_children"])
    for e in events:
        w.writerow([f"{e.time:.17g}", format_label(e.label), e.kind, f"{e.position:.17g}", e.n_children])
