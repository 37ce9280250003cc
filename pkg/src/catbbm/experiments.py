"""Reproducible experiments: configuration, replica fan-out, reports.

A report is a pure function of its configuration apart from the
``runtime_seconds`` field. Replicas are cut into fixed-size chunks whose
boundaries depend only on the configuration; each replica draws from
``RandomStream(master_seed, (replica, ...))`` so results do not depend on
how many worker processes run the chunks.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from . import analytics, kernels, martingales, spine
from .params import ModelParams, delta_lambda, derive_rates, optimal_split, split_exponent
from .population import (FrontPruning, LevelPruning, SimConfig, SnapshotBatch, simulate,
                         simulate_batch, write_events_csv, write_snapshots_csv)
from .rng import RandomStream

EXPERIMENTS = ("expect", "simulate", "verify-mean", "growth", "growth-above", "rightmost",
               "rare-survival", "martingale", "spine", "kernels-test")


class ConfigError(ValueError):
    """Invalid experiment configuration (raised before any simulation)."""


# per-experiment options and their defaults; anything else is rejected
_DEFAULTS: dict[str, dict[str, Any]] = {
    "expect": {"lambdas": [0.5, 1.0, math.sqrt(2.0), 2.0], "times": [1.0, 2.0, 5.0]},
    "simulate": {"csv_replicas": 1, "z_tol": 4.0},
    "verify-mean": {"points": [[1.0, 0.5]], "z_tol": 4.0},
    "growth": {"window": [4.0, 8.0], "dt": 0.25, "band": [1.35, 1.65]},
    "growth-above": {"lambda": 0.5, "window": [4.0, 8.0], "dt": 0.25, "band": None},
    "rightmost": {"band": None, "record_every": 1.0, "fit_fraction": 0.5,
                  "pruning": {"eps": 1e-8, "slack": 0.5, "every": 0.25}, "certificate_tol": 1e-3},
    "rare-survival": {"lambda": 2.0, "times": [3.0, 4.0, 5.0], "halfwidth": 0.3, "min_successes": 10,
                      "pruning": {"eps": 1e-9, "every": 0.25}, "certificate_tol": 1e-3},
    "martingale": {"kind": {"kind": "PM"}, "z_tol": 4.0, "eps": list(martingales.DEFAULT_EPS)},
    "spine": {"measure": {"kind": "TowardOriginPM"}, "rate_tol": 0.05, "csv_replicas": 1},
    "kernels-test": {"n_samples": 100000, "grid": 20, "chi2_pmin": 0.001, "t": 1.0,
                     "bridge_median_ref": 0.58871, "hitting_ref": 0.31731, "tol": 0.01},
}

DEFAULT_CHUNK = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelParams
    sim: SimConfig
    experiment: str
    options: dict = field(default_factory=dict)
    replicas: int = 1
    master_seed: int = 0
    output_dir: str = "runs"
    workers: int = 1
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not isinstance(self.replicas, int) or self.replicas < 1:
            raise ConfigError("replicas must be an integer >= 1")
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.workers < 1 or self.chunk < 1:
            raise ConfigError("workers and chunk must be >= 1")
        unknown = set(self.options) - set(_DEFAULTS[self.experiment])
        if unknown:
            raise ConfigError(f"unknown options for {self.experiment}: {sorted(unknown)}")
        merged = {**_DEFAULTS[self.experiment], **self.options}
        object.__setattr__(self, "options", merged)
        _validate(self)

    @classmethod
    def from_dict(cls, d: dict, experiment: str | None = None) -> "ExperimentConfig":
        try:
            exp = dict(d.get("experiment") or {})
            name = exp.pop("name", None)
            if experiment is not None and name is not None and name != experiment:
                raise ConfigError(f"config is for {name!r}, not {experiment!r}")
            name = experiment or name
            if name is None:
                raise ConfigError("no experiment named")
            model = ModelParams.from_dict(d["model"]) if "model" in d else ModelParams.binary()
            sim = SimConfig.from_dict(d.get("sim", {}))
            return cls(model, sim, name, exp, int(d.get("replicas", 1)), int(d.get("master_seed", 0)),
                       str(d.get("output_dir", "runs")), int(d.get("workers", 1)),
                       int(d.get("chunk", DEFAULT_CHUNK)))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        # workers and output_dir are left out on purpose: they must not change the report
        return {
            "model": self.model.to_dict(),
            "sim": self.sim.to_dict(),
            "experiment": {"name": self.experiment, **self.options},
            "replicas": self.replicas,
            "master_seed": self.master_seed,
            "chunk": self.chunk,
        }

    def with_overrides(self, seed=None, replicas=None, output_dir=None, workers=None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["master_seed"] = int(seed)
        if replicas is not None:
            kw["replicas"] = int(replicas)
        if output_dir is not None:
            kw["output_dir"] = str(output_dir)
        if workers is not None:
            kw["workers"] = int(workers)
        try:
            return replace(self, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment / str(self.master_seed)


def _validate(cfg: ExperimentConfig) -> None:
    o, d = cfg.options, derive_rates(cfg.model)
    name = cfg.experiment
    if name == "rare-survival":
        lam = float(o["lambda"])
        if not lam > d.lambda_crit:
            raise ConfigError(f"rare-survival needs lambda > lambda_crit = {d.lambda_crit:.7g}, got {lam}")
        if len(o["times"]) < 3:
            raise ConfigError("rare-survival needs at least 3 times")
        if cfg.replicas < 10_000:
            raise ConfigError("rare-survival needs at least 10^4 replicas")
        if cfg.sim.homogeneous_only:
            raise ConfigError("rare-survival runs the full model")
    if name == "rightmost" and cfg.sim.horizon < 6:
        raise ConfigError("rightmost needs horizon >= 6")
    if name in ("growth", "growth-above"):
        lo, hi = o["window"]
        if not 0 < lo < hi <= cfg.sim.horizon:
            raise ConfigError("window must satisfy 0 < lo < hi <= horizon")
    if name == "martingale":
        try:
            kind = martingales.MartingaleKind.from_dict(o["kind"])
            kind.check(cfg.sim.homogeneous_only)
        except (KeyError, ValueError) as e:
            raise ConfigError(str(e)) from e
    if name == "spine":
        try:
            measure = spine.SpineMeasure.from_dict(o["measure"])
        except (KeyError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if measure.homogeneous != cfg.sim.homogeneous_only and measure.homogeneous:
            raise ConfigError("ConstantDriftLambda needs sim.homogeneous_only = true")
    if name == "verify-mean":
        for pt in o["points"]:
            if len(pt) != 2 or pt[0] <= 0 or (pt[1] is not None and pt[1] < 0):
                raise ConfigError(f"bad point {pt}: need [t > 0, x >= 0 or null]")
            if pt[0] > cfg.sim.horizon:
                raise ConfigError(f"point time {pt[0]} beyond horizon")


# --- metrics and reports ----------------------------------------------------------

def metric(name, estimate, reference, provenance, passed, *, se=None, ci=None, z=None, tolerance=None,
           note=None) -> dict:
    m = {"name": name, "estimate": _num(estimate), "reference": _num(reference), "provenance": provenance}
    if se is not None:
        m["std_error"] = _num(se)
    if ci is not None:
        m["ci"] = [_num(c) for c in ci]
    if z is not None:
        m["z"] = _num(z)
    if tolerance is not None:
        m["tolerance"] = tolerance
    m["pass"] = None if passed is None else bool(passed)
    if note:
        m["note"] = note
    return m


def _num(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class ExperimentReport:
    config: dict
    metrics: list[dict]
    truncation: dict
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(m["pass"] is not False for m in self.metrics)

    def metric(self, name: str) -> dict:
        for m in self.metrics:
            if m["name"] == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "metrics": self.metrics,
            "passed": self.passed,
            "flags": self.flags,
            "truncation": self.truncation,
            **self.extra,
            "runtime_seconds": self.runtime_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"


def _no_truncation(n):
    return {"replicas": n, "truncated": 0, "fraction": 0.0}


# --- replica fan-out ----------------------------------------------------------------

@dataclass(frozen=True)
class _Want:
    """Per-replica statistics a population chunk should return."""

    above: tuple[tuple[float, float], ...] = ()      # (t, x): count strictly above x at t
    rightmost: tuple[float, ...] = ()
    martingale: tuple = ()                           # (kind dict, derived rates)


def _population_chunk(model, sim, seed, first, n, want: _Want):
    stream = RandomStream(seed)
    rec_idx = {t: i for i, t in enumerate(sim.all_record_times())}
    above = np.zeros((n, len(want.above)), dtype=np.int64)
    right = np.full((n, len(want.rightmost)), np.nan)
    mart = np.full((n, len(sim.all_record_times())), np.nan)
    kind = None
    if want.martingale:
        kind = martingales.MartingaleKind.from_dict(want.martingale[0])
        derived = want.martingale[1]

    def observe(sb: SnapshotBatch):
        for j, (t, x) in enumerate(want.above):
            if abs(t - sb.time) < 1e-12:
                above[:, j] = np.bincount(sb.rep[sb.positions > x], minlength=n)
        for j, t in enumerate(want.rightmost):
            if abs(t - sb.time) < 1e-12 and sb.rep.size:
                r = np.full(n, -np.inf)
                np.maximum.at(r, sb.rep, sb.positions)
                right[:, j] = np.where(np.isfinite(r), r, np.nan)
        if kind is not None:
            mart[:, rec_idx[sb.time]] = martingales.evaluate_batch(kind, sb, derived, n)

    sim = replace(sim, keep_snapshots=False, track_genealogy=False)
    b = simulate_batch(model, sim, stream, n, first_replica=first, observer=observe)
    # statistics of truncated replicas are unusable from the truncation time on
    for j, (t, _) in enumerate(want.above):
        above[b.counts[:, rec_idx[t]] < 0, j] = -1
    return {"counts": b.counts, "truncated": b.truncated, "truncation_time": b.truncation_time,
            "pruned": b.pruned, "prune_bound": b.prune_bound, "above": above, "rightmost": right,
            "martingale": mart, "particle_steps": b.particle_steps}


def _run_population(cfg: ExperimentConfig, sim: SimConfig, want: _Want) -> dict:
    chunks = [(s, min(cfg.chunk, cfg.replicas - s)) for s in range(0, cfg.replicas, cfg.chunk)]
    args = [(cfg.model, sim, cfg.master_seed, s, n, want) for s, n in chunks]
    if cfg.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            parts = list(ex.map(_population_chunk, *zip(*args)))
    else:
        parts = [_population_chunk(*a) for a in args]
    out = {}
    for k in parts[0]:
        if k == "particle_steps":
            out[k] = sum(p[k] for p in parts)
        else:
            out[k] = np.concatenate([p[k] for p in parts], axis=0)
    return out


def _truncation(res) -> dict:
    tr = res["truncated"]
    d = {"replicas": int(tr.size), "truncated": int(tr.sum()), "fraction": float(tr.mean())}
    if tr.any():
        d["mean_truncation_time"] = float(np.nanmean(res["truncation_time"]))
    return d


def _pruning(res) -> dict:
    pb = res["prune_bound"]
    return {"pruned_particles_mean": float(res["pruned"].mean()),
            "certificate_mean": float(pb.mean()), "certificate_max": float(pb.max())}


def _mean_z(name, values, reference, provenance, z_tol):
    est, se = analytics.mean_and_se(values)
    z = analytics.z_score(est, se, reference)
    return metric(name, est, reference, provenance, abs(z) <= z_tol, se=se, z=z, tolerance=f"|z| <= {z_tol}")


# --- the experiments ----------------------------------------------------------------

def run(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    t0 = time.perf_counter()
    fn = _RUNNERS[cfg.experiment]
    report = fn(cfg, write)
    report.config = cfg.to_dict()
    report.runtime_seconds = round(time.perf_counter() - t0, 3)
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        (cfg.run_dir / "report.json").write_text(report.to_json())
    return report


def _expect(cfg, write):
    d = derive_rates(cfg.model)
    o = cfg.options
    ms = [
        metric("beta_hat", d.beta_hat, d.beta_hat, "beta (m - 1)", None),
        metric("beta0_hat", d.beta0_hat, d.beta0_hat, "beta0 (m0 - 1)", None),
        metric("growth_exponent", d.growth_exponent, 0.5 * d.beta0_hat ** 2 + d.beta_hat,
               "beta0_hat^2 / 2 + beta_hat", None),
        metric("lambda_crit", d.lambda_crit, d.lambda_crit, f"piecewise formula, regime {d.regime.value}", None),
    ]
    dc = delta_lambda(d, d.lambda_crit)
    ms.append(metric("delta_at_lambda_crit", dc, 0.0, "Delta vanishes at lambda_crit", abs(dc) <= 1e-10,
                     tolerance="abs <= 1e-10"))
    for lam in o["lambdas"]:
        ms.append(metric(f"delta[{lam:.7g}]", delta_lambda(d, lam), delta_lambda(d, lam),
                         "piecewise Delta formula", None))
    for lam in o["lambdas"]:
        if lam > 0:
            p = optimal_split(d, lam)
            ms.append(metric(f"p_star[{lam:.7g}]", p, p, "1 - lambda / beta0_hat, clipped at 0", None))
            ms.append(metric(f"split_exponent_at_p_star[{lam:.7g}]", split_exponent(d, lam, p),
                             delta_lambda(d, lam), "maximised split exponent equals Delta",
                             abs(split_exponent(d, lam, p) - delta_lambda(d, lam)) <= 1e-10,
                             tolerance="abs <= 1e-10"))
    for t in o["times"]:
        v = analytics.expected_population(d, t)
        ms.append(metric(f"expected_population[{t:g}]", v, v, "2 Phi(beta0_hat sqrt t) e^{growth t}", None))
    return ExperimentReport({}, ms, _no_truncation(0), extra={"derived": d.to_dict()})


def _simulate(cfg, write):
    d = derive_rates(cfg.model.homogeneous_only() if cfg.sim.homogeneous_only else cfg.model)
    res = _run_population(cfg, cfg.sim, _Want())
    times = cfg.sim.all_record_times()
    ms, flags = [], []
    for j, t in enumerate(times):
        c = res["counts"][:, j]
        ok = c >= 0
        if t <= 0 or ok.sum() < 2:
            continue
        ref = analytics.expected_population(d, t)
        m = _mean_z(f"mean_population[{t:g}]", c[ok], ref, "2 Phi(beta0_hat sqrt t) e^{growth t}",
                    cfg.options["z_tol"])
        if not ok.all():
            m["note"] = f"{int((~ok).sum())} truncated replicas excluded"
        ms.append(m)
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(cfg.run_dir / "counts.csv", res["counts"], fmt="%d", delimiter=",",
                   header=",".join(f"{t:.17g}" for t in times), comments="")
        stream = RandomStream(cfg.master_seed)
        sim = replace(cfg.sim, track_genealogy=True, keep_snapshots=True, pruning=None)
        for r in range(min(cfg.options["csv_replicas"], cfg.replicas)):
            one = simulate(cfg.model, sim, stream.child(r))
            with open(cfg.run_dir / f"snapshots_{r}.csv", "w") as fh:
                write_snapshots_csv(one.snapshots, fh)
            with open(cfg.run_dir / f"events_{r}.csv", "w") as fh:
                write_events_csv(one.event_log, fh)
    tr = _truncation(res)
    return ExperimentReport({}, ms, tr, flags)


def _verify_mean(cfg, write):
    d = derive_rates(cfg.model.homogeneous_only() if cfg.sim.homogeneous_only else cfg.model)
    pts = [(float(t), None if x is None else float(x)) for t, x in cfg.options["points"]]
    sim = replace(cfg.sim, record_times=tuple(sorted(set(cfg.sim.record_times) | {t for t, _ in pts})))
    want = _Want(above=tuple((t, x) for t, x in pts if x is not None))
    res = _run_population(cfg, sim, want)
    rec = {t: i for i, t in enumerate(sim.all_record_times())}
    ms = []
    ja = 0
    for t, x in pts:
        if x is None:
            vals = res["counts"][:, rec[t]]
            ref = analytics.expected_population(d, t)
            name, prov = f"E|N_t|[t={t:g}]", "2 Phi(beta0_hat sqrt t) e^{growth t}"
        else:
            vals = res["above"][:, ja]
            ja += 1
            ref = analytics.expected_count_above(d, t, x)
            name, prov = f"E|N_t^x|[t={t:g},x={x:g}]", "Phi(beta0_hat sqrt t - x/sqrt t) e^{...} closed form"
        ok = vals >= 0
        m = _mean_z(name, vals[ok], ref, prov, cfg.options["z_tol"])
        if not ok.all():
            m["note"] = f"{int((~ok).sum())} truncated replicas excluded"
        ms.append(m)
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        header = [f"t={t:g};x={'all' if x is None else f'{x:g}'}" for t, x in pts]
        cols = []
        ja = 0
        for t, x in pts:
            if x is None:
                cols.append(res["counts"][:, rec[t]])
            else:
                cols.append(res["above"][:, ja])
                ja += 1
        np.savetxt(cfg.run_dir / "counts.csv", np.column_stack(cols), fmt="%d", delimiter=",",
                   header=",".join(header), comments="")
    return ExperimentReport({}, ms, _truncation(res))


def _window_times(lo, hi, dt):
    k = int(round((hi - lo) / dt))
    return tuple(float(lo + i * (hi - lo) / k) for i in range(k + 1))


def _per_replica_slopes(times, values):
    """Slope of log(value) on t per replica over its usable (positive) points."""
    slopes = []
    excluded = 0
    tt = np.asarray(times)
    for row in values:
        ok = row > 0
        if ok.sum() < 4:
            excluded += 1
            continue
        slopes.append(analytics.growth_rate_fit(list(zip(tt[ok], row[ok])), window_fraction=1.0).slope)
    return np.asarray(slopes), excluded


def _growth_common(cfg, write, lam):
    o = cfg.options
    d = derive_rates(cfg.model.homogeneous_only() if cfg.sim.homogeneous_only else cfg.model)
    times = _window_times(o["window"][0], o["window"][1], o["dt"])
    sim = replace(cfg.sim, record_times=tuple(sorted(set(cfg.sim.record_times) | set(times))))
    rec = {t: i for i, t in enumerate(sim.all_record_times())}
    if lam is None:
        res = _run_population(cfg, sim, _Want())
        vals = np.stack([res["counts"][:, rec[t]] for t in times], axis=1).astype(float)
        ref, prov, name = d.growth_exponent, "beta0_hat^2 / 2 + beta_hat", "growth_slope"
        band = o["band"]
    else:
        res = _run_population(cfg, sim, _Want(above=tuple((t, lam * t) for t in times)))
        vals = res["above"].astype(float)
        ref, prov, name = delta_lambda(d, lam), "Delta_lambda", f"growth_above_slope[lambda={lam:g}]"
        band = o["band"] or [ref - 0.15, ref + 0.15]
    slopes, excluded = _per_replica_slopes(times, vals)
    flags = []
    tr = _truncation(res)
    if tr["fraction"] > 0.5:
        flags.append("underpowered")
    ms = []
    if slopes.size:
        est = float(np.mean(slopes))
        se = float(np.std(slopes, ddof=1) / math.sqrt(slopes.size)) if slopes.size > 1 else None
        ms.append(metric(name, est, ref, prov, band[0] <= est <= band[1], se=se,
                         tolerance=f"band [{band[0]:.6g}, {band[1]:.6g}]",
                         note=f"mean of per-replica least-squares slopes over t in [{times[0]:g}, {times[-1]:g}]"
                              f" ({slopes.size} replicas, {excluded} without 4 usable points)"))
    else:
        ms.append(metric(name, None, ref, prov, False, note="no replica had 4 usable points"))
    # pooled fit of the cross-replica mean of log values, using replicas usable at every time
    full = np.all(vals > 0, axis=1)
    if full.sum() >= 1:
        fit = analytics.growth_rate_fit(list(zip(times, np.exp(np.log(vals[full]).mean(axis=0)))), 1.0)
        ms.append(metric(name + "_pooled", fit.slope, ref, prov, None,
                         note=f"slope of mean log value, {int(full.sum())} replicas complete over the window"))
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(cfg.run_dir / "series.csv", vals, fmt="%d", delimiter=",",
                   header=",".join(f"{t:.17g}" for t in times), comments="")
    return ExperimentReport({}, ms, tr, flags)


def _growth(cfg, write):
    return _growth_common(cfg, write, None)


def _growth_above(cfg, write):
    return _growth_common(cfg, write, float(cfg.options["lambda"]))


def rightmost_speed_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    if cfg.experiment != "rightmost":
        cfg = ExperimentConfig(cfg.model, cfg.sim, "rightmost", {}, cfg.replicas, cfg.master_seed,
                               cfg.output_dir, cfg.workers, cfg.chunk)
    return run(cfg, write)


def _rightmost(cfg, write):
    o = cfg.options
    d = derive_rates(cfg.model.homogeneous_only() if cfg.sim.homogeneous_only else cfg.model)
    T = cfg.sim.horizon
    k = int(math.floor(T / o["record_every"] + 1e-9))
    times = tuple(float(min(T, (i + 1) * o["record_every"])) for i in range(k))
    if times[-1] < T:
        times = times + (T,)
    pr = o["pruning"]
    sim = replace(cfg.sim, record_times=times,
                  pruning=None if pr is None else FrontPruning(**pr))
    res = _run_population(cfg, sim, _Want(rightmost=times))
    R = res["rightmost"]
    ok = ~np.isnan(R[:, -1])
    speed = R[ok, -1] / T
    ref = d.lambda_crit
    band = o["band"] or [0.85 * ref, 1.13 * ref]
    prov = f"lambda_crit, regime {d.regime.value}"
    ms = []
    if speed.size:
        med = float(np.median(speed))
        ms.append(metric(f"median_R_T_over_T[T={T:g}]", med, ref, prov, band[0] <= med <= band[1],
                         tolerance=f"band [{band[0]:.6g}, {band[1]:.6g}]",
                         note=f"{speed.size} replicas" + ("" if ok.all() else f", {int((~ok).sum())} truncated")))
        if speed.size > 1:
            ms.append(metric(f"mean_R_T_over_T[T={T:g}]", float(speed.mean()), ref, prov, None,
                             se=float(speed.std(ddof=1) / math.sqrt(speed.size))))
        # linear fit of the mean front over the trailing window
        tt = np.asarray(times)
        keep = tt >= T - o["fit_fraction"] * (T - tt[0]) - 1e-12
        full = ~np.isnan(R).any(axis=1)
        if keep.sum() >= 2 and full.any():
            y = R[full][:, keep].mean(axis=0)
            slope = float(np.polyfit(tt[keep], y, 1)[0])
            ms.append(metric("front_slope_fit", slope, ref, prov, band[0] <= slope <= band[1],
                             tolerance=f"band [{band[0]:.6g}, {band[1]:.6g}]",
                             note=f"least squares of mean R_t on t over [{tt[keep][0]:g}, {T:g}]"))
    else:
        ms.append(metric(f"median_R_T_over_T[T={T:g}]", None, ref, prov, False, note="all replicas truncated"))
    extra = {}
    if pr is not None:
        p = _pruning(res)
        extra["pruning"] = p
        ms.append(metric("pruning_certificate_mean", p["certificate_mean"], 0.0,
                         "mean bound on P(pruning changed some R_t)", p["certificate_mean"] <= o["certificate_tol"],
                         tolerance=f"<= {o['certificate_tol']:g}"))
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(cfg.run_dir / "rightmost.csv", R, fmt="%.17g", delimiter=",",
                   header=",".join(f"{t:.17g}" for t in times), comments="")
    return ExperimentReport({}, ms, _truncation(res), extra=extra)


def rare_survival_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    if cfg.experiment != "rare-survival":
        raise ConfigError("expected a rare-survival configuration")
    return run(cfg, write)


def _rare_survival(cfg, write):
    o = cfg.options
    d = derive_rates(cfg.model)
    lam = float(o["lambda"])
    times = tuple(float(t) for t in sorted(o["times"]))
    targets = tuple((t, lam * t) for t in times)
    pr = o["pruning"]
    sim = replace(cfg.sim, horizon=max(times), record_times=times,
                  pruning=None if pr is None else LevelPruning(targets=targets, **pr))
    res = _run_population(cfg, sim, _Want(above=targets))
    ref = delta_lambda(d, lam)
    ms, succ, trials = [], [], []
    for j, t in enumerate(times):
        col = res["above"][:, j]
        ok = col >= 0
        s_, n_ = int((col[ok] > 0).sum()), int(ok.sum())
        succ.append(s_)
        trials.append(n_)
        p, lo, hi = analytics.survival_estimate(s_, n_)
        ms.append(metric(f"survival[t={t:g}]", p, None, "Monte Carlo; Wilson 95% interval", None, ci=(lo, hi),
                         note=f"{s_} of {n_}"))
    fit = analytics.decay_fit(times, succ, trials, o["min_successes"])
    hw = o["halfwidth"]
    if fit is None:
        ms.append(metric("decay_slope", None, ref, "Delta_lambda", False, tolerance=f"+-{hw:g}",
                         note="no estimate: fewer than two times with enough successes"))
    else:
        slope, _, npts = fit
        ms.append(metric("decay_slope", slope, ref, "Delta_lambda", abs(slope - ref) <= hw,
                         tolerance=f"+-{hw:g}", note=f"regression of log p-hat on t over {npts} times"))
    extra = {}
    if pr is not None:
        p = _pruning(res)
        extra["pruning"] = p
        ms.append(metric("pruning_certificate_mean", p["certificate_mean"], 0.0,
                         "mean bound on P(pruning removed a survivor)",
                         p["certificate_mean"] <= o["certificate_tol"] * max(min(s / n for s, n in zip(succ, trials)), 1e-300),
                         tolerance=f"<= {o['certificate_tol']:g} x smallest p-hat"))
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        with open(cfg.run_dir / "survival.csv", "w") as fh:
            fh.write("time,level,successes,trials\n")
            for t, s_, n_ in zip(times, succ, trials):
                fh.write(f"{t:.17g},{lam * t:.17g},{s_},{n_}\n")
    return ExperimentReport({}, ms, _truncation(res), extra=extra)


def _martingale(cfg, write):
    o = cfg.options
    kind = martingales.MartingaleKind.from_dict(o["kind"])
    d = derive_rates(cfg.model.homogeneous_only() if cfg.sim.homogeneous_only else cfg.model)
    times = cfg.sim.all_record_times()
    res = _run_population(cfg, cfg.sim, _Want(martingale=(kind.to_dict(), d)))
    vals = res["martingale"]
    name = "M_pm" if kind.kind is martingales.Kind.PM else f"M_lambda[{kind.lam:g}]"
    ms = []
    for j, t in enumerate(times):
        col = vals[:, j]
        ok = ~np.isnan(col)
        if t <= 0 or ok.sum() < 2:
            continue
        m = _mean_z(f"{name}[t={t:g}]", col[ok], 1.0, "unit mean of the additive martingale", o["z_tol"])
        ms.append(m)
    extra = {}
    full = ~np.isnan(vals).any(axis=1)
    if full.sum() >= 100:
        extra["limit_diagnostic"] = martingales.limit_diagnostic(times, vals[full], o["eps"]).to_dict()
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(cfg.run_dir / "martingale.csv", vals, fmt="%.17g", delimiter=",",
                   header=",".join(f"{t:.17g}" for t in times), comments="")
    return ExperimentReport({}, ms, _truncation(res), extra=extra)


def _spine(cfg, write):
    o = cfg.options
    measure = spine.SpineMeasure.from_dict(o["measure"])
    d = derive_rates(cfg.model)
    T = cfg.sim.horizon
    stream = RandomStream(cfg.master_seed)
    paths = spine.simulate_spines(measure, cfg.model, T, stream, cfg.replicas, cfg.sim.step_h)
    n_off = np.array([p.n_off_origin() for p in paths], dtype=float)
    n_cat = np.array([p.n_at_origin() for p in paths], dtype=float)
    L = np.array([p.local_time[-1] for p in paths])
    xi = np.array([p.xi[-1] for p in paths])
    off_rate = cfg.model.beta * (d.m if measure.biased else 1.0)
    cat_rate = cfg.model.beta0 * (d.m0 if measure.biased else 1.0)
    tol = o["rate_tol"]
    ms = []
    r_off = n_off.sum() / (T * len(paths))
    ms.append(metric("off_origin_rate", r_off, off_rate, "Poisson rate in time (biased: m beta)",
                     abs(r_off / off_rate - 1) <= tol, tolerance=f"relative {tol:g}"))
    if not measure.homogeneous and L.sum() > 0:
        r_cat = n_cat.sum() / L.sum()
        ms.append(metric("at_origin_rate_per_local_time", r_cat, cat_rate,
                         "rate in local time (biased: m0 beta0)", abs(r_cat / cat_rate - 1) <= tol,
                         tolerance=f"relative {tol:g}"))
    k = measure.kind
    if k is spine.SpineKind.TOWARD_ORIGIN_PM:
        ms.append(metric(f"L_T_over_T[T={T:g}]", float(L.mean() / T), d.beta0_hat,
                         "local-time speed under the toward-origin measure", None,
                         se=float(L.std(ddof=1) / T / math.sqrt(L.size)) if L.size > 1 else None))
    elif k is spine.SpineKind.CONSTANT_DRIFT:
        est = float(xi.mean() / T)
        ms.append(metric(f"xi_T_over_T[T={T:g}]", est, measure.lam, "law of large numbers with drift",
                         abs(est - measure.lam) <= 0.05, tolerance="abs 0.05"))
    if write:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        for r in range(min(o["csv_replicas"], len(paths))):
            with open(cfg.run_dir / f"spine_{r}.csv", "w") as fh:
                spine.write_path_csv(paths[r], fh)
            with open(cfg.run_dir / f"fissions_{r}.csv", "w") as fh:
                spine.write_fissions_csv(paths[r], fh)
    return ExperimentReport({}, ms, _no_truncation(cfg.replicas))


def joint_chi_square(stream: RandomStream, t: float, n_samples: int, grid: int = 20):
    """Chi-square GOF of :func:`kernels.sample_joint` on a grid x grid partition.

    Cells span y in [-3 sqrt t, 3 sqrt t], l in [0, 3 sqrt t]; everything
    outside is one extra cell. Cells with expected count below 5 are pooled
    into that extra cell. Returns (statistic, p_value, dof).
    """
    law = kernels.JointLaw(t)
    y, l = kernels.sample_joint(stream, law, size=n_samples)
    s = 3.0 * math.sqrt(t)
    ye = np.linspace(-s, s, grid + 1)
    le = np.linspace(0.0, s, grid + 1)
    obs, _, _ = np.histogram2d(y, l, bins=[ye, le])
    Y0, L0 = np.meshgrid(ye[:-1], le[:-1], indexing="ij")
    Y1, L1 = np.meshgrid(ye[1:], le[1:], indexing="ij")
    prob = kernels.joint_cell_probability(law, Y0, Y1, L0, L1)
    exp_ = prob * n_samples
    small = exp_ < 5
    o = np.append(obs[~small], n_samples - obs[~small].sum())
    e = np.append(exp_[~small], n_samples - exp_[~small].sum())
    res = stats.chisquare(o, e)
    return float(res.statistic), float(res.pvalue), int(o.size - 1)


def _kernels_test(cfg, write):
    o = cfg.options
    root = RandomStream(cfg.master_seed)
    n = int(o["n_samples"])
    stat, p, dof = joint_chi_square(root.child(0), float(o["t"]), n, int(o["grid"]))
    ms = [metric("joint_chi_square_p", p, o["chi2_pmin"], "density (|y|+l)/sqrt(2 pi t^3) e^{-(|y|+l)^2/2t}",
                 p > o["chi2_pmin"], tolerance=f"p > {o['chi2_pmin']:g}", note=f"statistic {stat:.6g}, dof {dof}")]
    mins = kernels.bridge_min(root.child(1), 0.0, 0.0, 1.0, size=n)
    med = float(np.median(-mins))
    tol = o["tol"]
    ms.append(metric("bridge_min_depth_median", med, o["bridge_median_ref"],
                     "median of -min of a 0 -> 0 bridge over h=1 is sqrt(log 2 / 2)",
                     abs(med - o["bridge_median_ref"]) <= tol, tolerance=f"abs {tol:g}"))
    ht = kernels.hitting_time_of_zero(root.child(2), 1.0, size=n)
    frac = float(np.mean(ht <= 1.0))
    ms.append(metric("hitting_time_cdf_empirical[x=1,t=1]", frac, o["hitting_ref"], "2(1 - Phi(1))",
                     abs(frac - o["hitting_ref"]) <= tol, tolerance=f"abs {tol:g}"))
    cdf = kernels.hitting_time_cdf(1.0, 1.0)
    ms.append(metric("hitting_time_cdf_closed_form[x=1,t=1]", cdf, o["hitting_ref"], "erfc(1/sqrt 2)",
                     abs(cdf - o["hitting_ref"]) <= tol, tolerance=f"abs {tol:g}"))
    return ExperimentReport({}, ms, _no_truncation(0))


_RUNNERS = {
    "expect": _expect,
    "simulate": _simulate,
    "verify-mean": _verify_mean,
    "growth": _growth,
    "growth-above": _growth_above,
    "rightmost": _rightmost,
    "rare-survival": _rare_survival,
    "martingale": _martingale,
    "spine": _spine,
    "kernels-test": _kernels_test,
}
