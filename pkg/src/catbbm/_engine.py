"""Jitted stepping kernels shared by the population and spine simulators.

Per step a particle at reflected position ``a`` moves its Skorokhod driver
``D = a + drift*d + W_d``; the exact bridge minimum ``m`` of the driver over
the step gives the local-time increment ``max(0, -m)`` and the new reflected
position ``D + max(0, -m)``.

When the local time crosses a particle's catalytic level inside a step, the
crossing time is the first passage of the driver bridge to ``-level``; it is
sampled exactly (``bridge_passage_time``), so catalytic deaths sit at their
exact time as well as at the exact position 0.

Random counters: ``step * 16 + slot`` for in-step draws, ``BIRTH + slot`` for
the clocks drawn at birth. Slots: 0-1 Gaussian, 2 bridge minimum, 3 sign,
4 offspring count, 5 bridge maximum (trajectory recording only), 6-8
passage time.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from .rng import BIRTH_COUNTER, key_child, normal, uniform

BIRTH = np.uint64(BIRTH_COUNTER)
SLOTS = np.uint64(16)

KIND_NONE = 0
KIND_HOM = 1
KIND_CAT = 2


@nb.njit(inline="always")
def reflected_substep(a, d, drift, key, base):
    """Advance reflected BM from ``a`` for duration ``d``.

    Returns (new_abs_pos, local_time_increment, driver_end, driver_min).
    """
    w = np.sqrt(d) * normal(key, base)
    dend = a + drift * d + w
    u = uniform(key, base + np.uint64(2))
    diff = a - dend
    m = 0.5 * (a + dend - np.sqrt(diff * diff - 2.0 * d * np.log(u)))
    dl = -m if m < 0.0 else 0.0
    return dend + dl, dl, dend, m


@nb.njit(inline="always")
def bridge_max_u(a, b, d, u):
    diff = a - b
    return 0.5 * (a + b + np.sqrt(diff * diff - 2.0 * d * np.log(u)))


@nb.njit(inline="always")
def inverse_gaussian(mu, shape, z, u):
    """Michael-Schucany-Haas draw from IG(mu, shape) given N(0,1) ``z`` and U(0,1) ``u``.

    Written in the cancellation-free form so huge ``mu`` stays accurate.
    """
    w = mu * z * z / (2.0 * shape)
    r = 1.0 + w + np.sqrt(w * w + 2.0 * w)
    x_small = mu / r
    if u <= mu / (mu + x_small):
        return x_small
    return mu * r


@nb.njit(inline="always")
def bridge_passage_time(a, b, level, d, key, base):
    """First time a Brownian bridge from ``a`` to ``b`` over ``d`` hits ``level``.

    Requires ``level < a`` and that the bridge does reach ``level``. Reflecting
    the post-passage path makes the endpoint ``b' <= level``; the time change
    s = u d / (d + u) turns the bridge into a Brownian motion with drift
    ``-gamma/d`` from 0 hitting ``-alpha``, whose passage time is
    IG(alpha d / gamma, alpha^2).
    """
    alpha = a - level
    gamma = abs(b - level)
    if gamma <= 0.0:
        gamma = 1e-300
    z = normal(key, base + np.uint64(6))
    u = uniform(key, base + np.uint64(8))
    big_u = inverse_gaussian(alpha * d / gamma, alpha * alpha, z, u)
    if not np.isfinite(big_u):
        return d
    tau = big_u * d / (d + big_u)
    if tau > d:
        tau = d
    return tau


@nb.njit(inline="always")
def draw_count(counts, cum, u):
    for j in range(cum.shape[0]):
        if u <= cum[j]:
            return counts[j]
    return counts[cum.shape[0] - 1]


@nb.njit(cache=True)
def advance_step(
    n_start, n, h, t0, step_idx,
    sign, apos, lt, tau, ell, key, rep, gid, alive, rem, tstart,
    beta, beta0, cat_enabled,
    p_counts, p_cum, q_counts, q_cum,
    pop,
    track_gen, next_gid,
    g_parent, g_cidx, g_rep, g_birth, g_death, g_kind, g_pos, g_nchild, g_lt,
    record_seg, n_seg,
    s_gid, s_rep, s_t0, s_t1, s_x0, s_x1, s_sup, s_inf,
    i_begin,
):
    """Advance slots ``i_begin..`` (growing as children are appended) to ``t0 + h``.

    Slots below ``n_start`` are particles alive at the start of the step and
    move for the full ``h``; later slots are newborns and move for ``rem``.
    Returns (i_stop, n, next_gid, n_seg, n_deaths). ``i_stop < n`` means some
    buffer ran out of room; the caller grows buffers and calls again from
    ``i_stop``.
    """
    cap = sign.shape[0]
    gcap = g_parent.shape[0]
    scap = s_gid.shape[0]
    kmax = max(p_counts[p_counts.shape[0] - 1], q_counts[q_counts.shape[0] - 1])
    base = np.uint64(step_idx) * SLOTS
    n_deaths = 0
    i = i_begin
    while i < n:
        if not alive[i]:
            i += 1
            continue
        if n + kmax > cap:
            return i, n, next_gid, n_seg, n_deaths
        if track_gen and next_gid + kmax > gcap:
            return i, n, next_gid, n_seg, n_deaths
        if record_seg and n_seg + 1 > scap:
            return i, n, next_gid, n_seg, n_deaths
        k_i = key[i]
        if i < n_start:
            d = h
            ts = t0
        else:
            d = rem[i]
            ts = tstart[i]
        sub = tau[i] if tau[i] < d else d
        a = apos[i]
        s_old = sign[i]
        new_a, dl, dend, m = reflected_substep(a, sub, 0.0, k_i, base)
        touched = m <= 0.0
        s_new = s_old
        if touched:
            s_new = np.int8(1) if uniform(k_i, base + np.uint64(3)) < 0.5 else np.int8(-1)
        kind = KIND_NONE
        t_cat = sub
        if cat_enabled and dl >= ell[i]:
            kind = KIND_CAT
            t_cat = bridge_passage_time(a, dend, -ell[i], sub, k_i, base)
        elif tau[i] <= d:
            kind = KIND_HOM

        if record_seg:
            x0 = s_old * a
            x1 = s_new * new_a
            u5 = uniform(k_i, base + np.uint64(5))
            dmax = bridge_max_u(a, dend, sub, u5)
            if touched:
                sup = max(x0, x1, 0.0)
                inf = -(dmax + dl)
            elif s_old > 0:
                sup = dmax
                inf = m
            else:
                sup = -m
                inf = -dmax
            if kind == KIND_CAT:
                x1 = 0.0
                inf = min(inf, 0.0)
                sup = max(sup, 0.0)
            s_gid[n_seg] = gid[i]
            s_rep[n_seg] = rep[i]
            s_t0[n_seg] = ts
            s_t1[n_seg] = ts + t_cat
            s_x0[n_seg] = x0
            s_x1[n_seg] = x1
            s_sup[n_seg] = sup
            s_inf[n_seg] = inf
            n_seg += 1

        if kind == KIND_NONE:
            apos[i] = new_a
            sign[i] = s_new
            lt[i] += dl
            tau[i] -= d
            ell[i] -= dl
            i += 1
            continue

        # death: replace with offspring at the death position
        u4 = uniform(k_i, base + np.uint64(4))
        if kind == KIND_CAT:
            nch = draw_count(q_counts, q_cum, u4)
            c_sign = np.int8(0)
            c_apos = 0.0
            c_lt = lt[i] + ell[i]
            t_death = ts + t_cat
        else:
            nch = draw_count(p_counts, p_cum, u4)
            c_sign = s_new
            c_apos = new_a
            c_lt = lt[i] + dl
            t_death = ts + sub
        left = d - (t_death - ts)
        pop[rep[i]] += nch - 1
        n_deaths += 1
        alive[i] = False
        if track_gen:
            g = gid[i]
            g_death[g] = t_death
            g_kind[g] = kind
            g_pos[g] = c_sign * c_apos
            g_nchild[g] = nch
        for c in range(1, nch + 1):
            kc = key_child(k_i, c)
            sign[n] = c_sign
            apos[n] = c_apos
            lt[n] = c_lt
            tau[n] = -np.log(uniform(kc, BIRTH)) / beta
            if cat_enabled:
                ell[n] = -np.log(uniform(kc, BIRTH + np.uint64(1))) / beta0
            else:
                ell[n] = np.inf
            key[n] = kc
            rep[n] = rep[i]
            alive[n] = True
            rem[n] = left
            tstart[n] = t_death
            if track_gen:
                gid[n] = next_gid
                g_parent[next_gid] = gid[i]
                g_cidx[next_gid] = c
                g_rep[next_gid] = rep[i]
                g_birth[next_gid] = t_death
                g_death[next_gid] = np.nan
                g_kind[next_gid] = 0
                g_pos[next_gid] = np.nan
                g_nchild[next_gid] = 0
                g_lt[next_gid] = c_lt
                next_gid += 1
            else:
                gid[n] = -1
            n += 1
        i += 1
    return i, n, next_gid, n_seg, n_deaths


@nb.njit(cache=True)
def spine_paths(
    keys, n_steps, h, mode, drift,
    off_rate, cat_rate, cat_enabled,
    counts_off, cum_off, counts_cat, cum_cat,
    max_fissions,
):
    """Simulate one spine per key on the grid ``k * h``, k = 0..n_steps.

    mode 0: no drift; mode 1: drift ``drift * sgn(xi)`` (reflected driver with
    drift); mode 2: constant drift ``drift`` on the signed path, local time from
    the bridge local-time law (no catalytic fissions). Off-origin fissions form
    a Poisson process of rate ``off_rate``; each step is split at their times
    so the spine's position there is exact. At-origin fissions fire when the
    local time crosses successive Exp(``cat_rate``) levels, at the exact
    passage time. Every fission records (replica, time, at_origin, count,
    xi, local time). ``ok`` is False when ``max_fissions`` ran out.
    """
    n_rep = keys.shape[0]
    xi = np.zeros((n_rep, n_steps + 1))
    ltp = np.zeros((n_rep, n_steps + 1))
    f_rep = np.empty(max_fissions, dtype=np.int64)
    f_time = np.empty(max_fissions)
    f_orig = np.empty(max_fissions, dtype=np.bool_)
    f_count = np.empty(max_fissions, dtype=np.int64)
    f_x = np.empty(max_fissions)
    f_l = np.empty(max_fissions)
    nf = 0
    horizon = n_steps * h
    for r in range(n_rep):
        k_r = keys[r]
        j = 0
        t_next = -np.log(uniform(k_r, BIRTH + np.uint64(2 * j))) / off_rate
        x = 0.0
        s = np.int8(0)
        a = 0.0
        L = 0.0
        cat_j = 0
        level = np.inf
        if cat_enabled:
            level = -np.log(uniform(k_r, BIRTH + np.uint64(1) + np.uint64(2 * cat_j))) / cat_rate
        for step in range(n_steps):
            base = np.uint64(step) * SLOTS
            t = step * h
            t_b = t + h if step < n_steps - 1 else horizon
            piece = 0
            while t < t_b:
                off_here = t_next <= t_b
                target = t_next if off_here else t_b
                left = target - t
                # advance over [t, target]; at-origin fissions may split it further
                while left > 0.0:
                    k_s = k_r if piece == 0 else key_child(k_r, piece)
                    piece += 1
                    if mode == 2:
                        z = normal(k_s, base)
                        b = x + drift * left + np.sqrt(left) * z
                        u = uniform(k_s, base + np.uint64(2))
                        dl = np.sqrt((b - x) * (b - x) - 2.0 * left * np.log(u)) - (abs(x) + abs(b))
                        if dl < 0.0:
                            dl = 0.0
                        x = b
                        L += dl
                        break
                    mu = drift if mode == 1 else 0.0
                    new_a, dl, dend, m = reflected_substep(a, left, mu, k_s, base)
                    if not (cat_enabled and L + dl >= level):
                        if m <= 0.0:
                            s = np.int8(1) if uniform(k_s, base + np.uint64(3)) < 0.5 else np.int8(-1)
                        a = new_a
                        L += dl
                        x = s * a
                        break
                    # the spine is at 0 when its local time reaches the level
                    tau_c = bridge_passage_time(a, dend, -(level - L), left, k_s, base)
                    if nf >= max_fissions:
                        return xi, ltp, f_rep[:nf], f_time[:nf], f_orig[:nf], f_count[:nf], f_x[:nf], f_l[:nf], False
                    u = uniform(k_r, BIRTH + np.uint64(2 * cat_j) + np.uint64(1 << 41))
                    L = level
                    a = 0.0
                    s = np.int8(0)
                    x = 0.0
                    f_rep[nf] = r
                    f_time[nf] = target - left + tau_c
                    f_orig[nf] = True
                    f_count[nf] = draw_count(counts_cat, cum_cat, u)
                    f_x[nf] = 0.0
                    f_l[nf] = L
                    nf += 1
                    cat_j += 1
                    level += -np.log(uniform(k_r, BIRTH + np.uint64(1) + np.uint64(2 * cat_j))) / cat_rate
                    left -= tau_c
                t = target
                if off_here:
                    if nf >= max_fissions:
                        return xi, ltp, f_rep[:nf], f_time[:nf], f_orig[:nf], f_count[:nf], f_x[:nf], f_l[:nf], False
                    u = uniform(k_r, BIRTH + np.uint64(2 * j) + np.uint64(1 << 40))
                    f_rep[nf] = r
                    f_time[nf] = t_next
                    f_orig[nf] = False
                    f_count[nf] = draw_count(counts_off, cum_off, u)
                    f_x[nf] = x
                    f_l[nf] = L
                    nf += 1
                    j += 1
                    t_next += -np.log(uniform(k_r, BIRTH + np.uint64(2 * j))) / off_rate
            xi[r, step + 1] = x
            ltp[r, step + 1] = L
    return xi, ltp, f_rep[:nf], f_time[:nf], f_orig[:nf], f_count[:nf], f_x[:nf], f_l[:nf], True
