import io
import math

import numpy as np
import pytest

import oracles
from catbbm import ModelParams, OffspringDistribution, RandomStream, derive_rates
from catbbm.analytics import expected_count_above, mean_and_se
from catbbm.population import (FrontPruning, LevelPruning, ParticleState, PopulationSnapshot, SimConfig,
                               branch_offspring, count_above, count_below, count_envelope, count_path_above,
                               counts_above_by_replica, descendant_mass_bound, format_label, is_ancestor,
                               parse_label, rightmost, simulate, simulate_batch, step_particle,
                               write_events_csv, write_snapshots_csv)


def test_labels():
    assert format_label(()) == "" and parse_label("") == ()
    assert parse_label(format_label((3, 1, 2))) == (3, 1, 2)
    assert is_ancestor((), (1,)) and is_ancestor((3,), (3, 2))
    assert not is_ancestor((3,), (3,)) and not is_ancestor((3,), (4, 1))


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(step_h=0.0)
    with pytest.raises(ValueError):
        SimConfig(horizon=1.0, record_times=(2.0,))
    with pytest.raises(ValueError):
        SimConfig(cap_policy="Drop")
    with pytest.raises(ValueError):
        SimConfig.from_dict({"horizon": 1.0, "bogus": 1})
    cfg = SimConfig(horizon=2.0, record_times=(1.0, 0.5))
    assert cfg.record_times == (0.5, 1.0)
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_time_grid_contains_record_times():
    cfg = SimConfig(step_h=0.3, horizon=1.0, record_times=(0.5,))
    g = cfg.time_grid()
    assert g[0] == 0.0 and g[-1] == 1.0 and 0.5 in g
    assert np.all(np.diff(g) > 0) and np.diff(g).max() <= 0.3 + 1e-12


# --- step_particle / branch_offspring ------------------------------------------

def test_step_far_from_origin_no_touch(unit):
    st = ParticleState.fresh(unit, RandomStream(1), position=3.0)
    new, ev = step_particle(st, 0.01, RandomStream(2))
    if not ev:
        assert new.local_time == 0.0 and new.sign == 1


def test_step_is_deterministic(unit):
    st = ParticleState.fresh(unit, RandomStream(1), position=0.2)
    assert step_particle(st, 0.05, RandomStream(7), 3) == step_particle(st, 0.05, RandomStream(7), 3)


def test_local_time_from_origin_mean():
    # with the clocks pushed out of reach, E[L_h] = E[-min driver] = sqrt(2h/pi)
    params = ModelParams.binary(1e-9, 1e-9)
    h = 0.04
    st = ParticleState.fresh(params, RandomStream(0), position=0.0)
    lts = np.array([step_particle(st, h, RandomStream(5, (i,)))[0].local_time for i in range(20000)])
    m, se = mean_and_se(lts)
    assert abs(m - math.sqrt(2 * h / math.pi)) < 4 * se


def test_step_rejects_bad_h(unit):
    with pytest.raises(ValueError):
        step_particle(ParticleState.fresh(unit, RandomStream(1)), 0.0, RandomStream(1))


def test_branch_offspring_point_mass_at_origin():
    params = ModelParams(1.0, 1.0, OffspringDistribution.point_mass(2), OffspringDistribution.point_mass(3))
    parent = ParticleState.fresh(params, RandomStream(1), label=(3,), position=0.0)
    kids = branch_offspring(parent, True, params, RandomStream(2))
    assert len(kids) == 3
    assert [k.label for k in kids] == [(3, 1), (3, 2), (3, 3)]
    assert all(k.position == 0.0 for k in kids)


def test_branch_offspring_two_point_mean():
    params = ModelParams(1.0, 1.0, OffspringDistribution.from_pairs({2: 0.5, 4: 0.5}),
                         OffspringDistribution.point_mass(2))
    parent = ParticleState.fresh(params, RandomStream(1), position=0.7)
    k = np.array([len(branch_offspring(parent, False, params, RandomStream(3, (i,)))) for i in range(100000)])
    assert set(np.unique(k)) == {2, 4}
    assert abs(k.mean() - 3.0) < 3 * k.std() / math.sqrt(k.size)


# --- simulate ------------------------------------------------------------------

def test_catalytic_only_branches_at_origin():
    params = ModelParams(1e-12, 1.0, OffspringDistribution.point_mass(2), OffspringDistribution.point_mass(2))
    res = simulate(params, SimConfig(step_h=0.01, horizon=1.0, record_times=(1.0,)), RandomStream(3))
    assert res.event_log
    assert all(e.kind == "cat" and e.position == 0.0 for e in res.event_log)


def test_yule_mean_homogeneous_only():
    params = ModelParams.binary(1.0, 1.0)
    cfg = SimConfig(step_h=0.05, horizon=1.0, record_times=(1.0,), homogeneous_only=True,
                    track_genealogy=False)
    b = simulate_batch(params, cfg, RandomStream(11), 20000)
    m, se = mean_and_se(b.counts[:, 0])
    assert abs(m - math.e) < 4 * se


def test_full_model_mean_population():
    params = ModelParams.binary(1.0, 1.0)
    cfg = SimConfig(step_h=0.05, horizon=1.0, record_times=(1.0,), track_genealogy=False)
    b = simulate_batch(params, cfg, RandomStream(12), 20000)
    m, se = mean_and_se(b.counts[:, 0])
    assert abs(m - oracles.POP_T1) < 4 * se


@pytest.mark.parametrize("beta,beta0,t,x", [(1.0, 1.0, 0.5, 0.0), (0.5, 2.0, 1.0, 0.5), (2.0, 0.5, 1.0, 1.0)])
def test_mean_count_matches_closed_form(beta, beta0, t, x):
    params = ModelParams.binary(beta, beta0)
    cfg = SimConfig(step_h=0.1, horizon=t, record_times=(t,), track_genealogy=False)
    b = simulate_batch(params, cfg, RandomStream(13), 20000)
    c = counts_above_by_replica(b.snapshots[t], x, 20000)
    m, se = mean_and_se(c)
    assert abs(m - expected_count_above(derive_rates(params), t, x)) < 4 * se


def test_coarse_and_fine_steps_agree():
    # the kernel is exact in law, so the step size only changes the draws
    params = ModelParams.binary(1.0, 1.0)
    means = []
    for h in (0.25, 0.02):
        cfg = SimConfig(step_h=h, horizon=1.0, record_times=(1.0,), track_genealogy=False)
        means.append(mean_and_se(simulate_batch(params, cfg, RandomStream(14), 10000).counts[:, 0]))
    (m1, s1), (m2, s2) = means
    assert abs(m1 - m2) < 4 * math.hypot(s1, s2)


def test_genealogy_invariants(unit):
    cfg = SimConfig(step_h=0.01, horizon=1.5, record_times=(0.0, 0.5, 1.0, 1.5))
    res = simulate(unit, cfg, RandomStream(21))
    sizes = [len(s) for s in res.snapshots]
    assert sizes[0] == 1 and sizes == sorted(sizes)
    for snap in res.snapshots:
        labels = snap.labels
        assert len(set(labels)) == len(labels)
        assert not any(is_ancestor(u, v) for u in labels for v in labels)
        assert np.all(snap.local_times >= 0)
    # each death appears once and its children carry its label as prefix
    deaths = {e.label: e for e in res.event_log}
    assert len(deaths) == len(res.event_log)
    for lab in res.snapshots[-1].labels:
        for k in range(len(lab)):
            anc = deaths[lab[:k]]
            assert anc.time < 1.5 and anc.n_children >= lab[k]
    for e in res.event_log:
        if e.kind == "cat":
            assert e.position == 0.0


def test_local_time_monotone_along_lines(unit):
    cfg = SimConfig(step_h=0.01, horizon=1.0, record_times=(0.5, 1.0))
    res = simulate(unit, cfg, RandomStream(22))
    early = dict(zip(res.snapshots[0].labels, res.snapshots[0].local_times))
    for lab, _, l in res.snapshots[1].particles:
        for k in range(len(lab) + 1):
            if lab[:k] in early:
                assert l >= early[lab[:k]]


def test_determinism_and_batch_independence(unit):
    cfg = SimConfig(step_h=0.02, horizon=1.0, record_times=(1.0,))
    alone = simulate_batch(unit, cfg, RandomStream(5), 1, first_replica=7).result_for(0)
    inside = simulate_batch(unit, cfg, RandomStream(5), 10).result_for(7)
    assert alone.event_log == inside.event_log
    a, b = alone.snapshots[0], inside.snapshots[0]
    assert np.array_equal(a.positions, b.positions) and a.labels == b.labels


def test_population_cap_flags():
    params = ModelParams.binary(3.0, 3.0)
    cfg = SimConfig(step_h=0.05, horizon=3.0, record_times=(3.0,), population_cap=50, track_genealogy=False)
    b = simulate_batch(params, cfg, RandomStream(6), 20)
    assert b.truncated.any()
    assert np.all(np.isfinite(b.truncation_time[b.truncated]))
    assert np.all(b.counts[b.truncated, 0] == -1)


def test_symmetry_of_counts(unit):
    cfg = SimConfig(step_h=0.1, horizon=1.0, record_times=(1.0,), track_genealogy=False)
    sb = simulate_batch(unit, cfg, RandomStream(8), 20000).snapshots[1.0]
    above = counts_above_by_replica(sb, 0.5, 20000)
    below = np.bincount(sb.rep[sb.positions < -0.5], minlength=20000)
    (m1, s1), (m2, s2) = mean_and_se(above), mean_and_se(below)
    assert abs(m1 - m2) < 4 * math.hypot(s1, s2)


# --- counting ------------------------------------------------------------------

def test_count_and_rightmost_examples():
    snap = PopulationSnapshot.from_particles(1.0, [((1,), 0.5, 0.0), ((2,), -0.2, 0.1)])
    assert count_above(snap, 0.0) == 1
    assert count_above(snap, -1e12) == 2 and count_above(snap, 1e12) == 0
    assert count_below(snap, 0.0) == 1
    assert rightmost(PopulationSnapshot.from_particles(0.0, [((), 0.0, 0.0)])) == 0.0
    three = PopulationSnapshot.from_particles(1.0, [((1,), 0.5, 0), ((2,), -0.2, 0), ((3,), 1.7, 0)])
    assert rightmost(three) == 1.7
    with pytest.raises(ValueError):
        rightmost(PopulationSnapshot.from_particles(1.0, []))
    with pytest.raises(ValueError):
        PopulationSnapshot.from_particles(1.0, [((1,), 0, 0), ((1,), 1, 0)])


def test_count_strict_at_origin():
    snap = PopulationSnapshot.from_particles(1.0, [((1,), 0.0, 0.3)])
    assert count_above(snap, 0.0) == 0


def test_envelope_and_path_counts(unit):
    cfg = SimConfig(step_h=0.01, horizon=3.0, record_times=(3.0,), windows=(2,))
    res = simulate(unit, cfg, RandomStream(9))
    tr = res.trajectories[2]
    end = res.snapshot_at(3.0)
    n_end = len(end)
    lam = 0.5
    env = count_envelope(tr, lam)
    assert env >= count_above(end, lam * 3.0)
    assert count_envelope(tr, 1e12) == 0
    assert count_path_above(tr, -1e6) == n_end
    assert count_path_above(tr, 1e12) == 0
    assert count_path_above(tr, lam) <= count_above(end, lam * 2.0)
    if rightmost(end) > 0:
        assert count_envelope(tr, 0.0) >= 1
    with pytest.raises(ValueError):
        count_envelope(tr, lam, n=1)


def test_envelope_rejects_coarse_step(unit):
    cfg = SimConfig(step_h=0.05, horizon=2.0, record_times=(2.0,), windows=(1,))
    res = simulate(unit, cfg, RandomStream(10))
    with pytest.raises(ValueError):
        count_envelope(res.trajectories[1], 0.5)


# --- pruning ---------------------------------------------------------------------

def test_descendant_mass_bound_dominates_closed_form():
    d = derive_rates(ModelParams.binary(1.0, 1.0))
    for r, lev in [(1.0, 0.5), (2.0, 3.0), (0.5, 1.0)]:
        assert descendant_mass_bound(d, 0.0, r, lev) >= expected_count_above(d, r, lev)
    assert np.isinf(descendant_mass_bound(d, 1.0, 1.0, 0.0))
    v = descendant_mass_bound(d, np.array([0.0, 1.0, 2.0]), 1.0, 3.0)
    assert v.shape == (3,) and np.all(np.diff(v) > 0)


def test_descendant_mass_bound_dominates_simulation(unit):
    # simulated mean count above 1 from the origin stays under the bound
    d = derive_rates(unit)
    cfg = SimConfig(step_h=0.1, horizon=1.0, record_times=(1.0,), track_genealogy=False)
    b = simulate_batch(unit, cfg, RandomStream(31), 4000)
    c = counts_above_by_replica(b.snapshots[1.0], 1.0, 4000)
    assert c.mean() <= float(descendant_mass_bound(d, 0.0, 1.0, 1.0)) + 4 * c.std() / math.sqrt(c.size)


def test_level_pruning_keeps_counts_and_bounds_error(unit):
    targets = ((2.0, 2.0 * 2.0),)
    base = SimConfig(step_h=0.1, horizon=2.0, record_times=(2.0,), track_genealogy=False)
    pr = SimConfig(step_h=0.1, horizon=2.0, record_times=(2.0,), track_genealogy=False,
                   pruning=LevelPruning(targets, eps=1e-6, every=0.5))
    a = simulate_batch(unit, base, RandomStream(40), 300)
    b = simulate_batch(unit, pr, RandomStream(40), 300)
    assert b.pruned.sum() > 0
    ca = counts_above_by_replica(a.snapshots[2.0], 4.0, 300)
    cb = counts_above_by_replica(b.snapshots[2.0], 4.0, 300)
    # same keys, so the kept subsystem reproduces the full one wherever nothing surviving was pruned
    assert np.sum(ca != cb) <= max(1, 10 * b.prune_bound.sum())
    assert np.all(b.prune_bound <= 1e-6 * b.pruned + 1e-300)


def test_front_pruning_keeps_rightmost(unit):
    base = SimConfig(step_h=0.1, horizon=4.0, record_times=(4.0,), track_genealogy=False)
    pr = SimConfig(step_h=0.1, horizon=4.0, record_times=(4.0,), track_genealogy=False,
                   pruning=FrontPruning(eps=1e-8, slack=0.5, every=0.5))
    a = simulate_batch(unit, base, RandomStream(41), 50)
    b = simulate_batch(unit, pr, RandomStream(41), 50)
    from catbbm.population import rightmost_by_replica

    ra = rightmost_by_replica(a.snapshots[4.0], 50)
    rb = rightmost_by_replica(b.snapshots[4.0], 50)
    assert b.pruned.sum() > 0
    assert np.all(rb <= ra)
    assert np.sum(ra != rb) <= max(1, 10 * b.prune_bound.sum())


# --- CSV -------------------------------------------------------------------------

def test_csv_formats(unit):
    res = simulate(unit, SimConfig(step_h=0.05, horizon=0.5, record_times=(0.0, 0.5)), RandomStream(3))
    fh = io.StringIO()
    write_snapshots_csv(res.snapshots, fh)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "time,label,position,local_time"
    assert lines[1] == "0,,0,0"
    fh = io.StringIO()
    write_events_csv(res.event_log, fh)
    rows = fh.getvalue().splitlines()
    assert rows[0] == "time,label,kind,position,n_children"
    assert len(rows) == len(res.event_log) + 1
    for r in rows[1:]:
        assert r.split(",")[2] in ("hom", "cat")
