"""Compiled hot loops: per-model Gillespie paths and the SIR particle filter.

These duplicate the generic python Gillespie in :mod:`nlar.simulators`
for the inner loops where python overhead would dominate (dataset
generation and PMMH).  Randomness comes from an inline splitmix64
stream seeded by a 64-bit key derived from the run's named substream,
so results are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True, inline="always")
def _next_u64(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(state):
    # 53-bit mantissa uniform in (0, 1]
    return (np.float64(_next_u64(state) >> np.uint64(11)) + 1.0) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _exponential(state, rate):
    return -np.log(_uniform(state)) / rate


@njit(cache=True)
def sir_daily(n_pop, beta, gamma, max_days, seed):
    """Daily cumulative infection counts from an SIR outbreak.

    Starts from one infectious case (Z1 = 1).  Returns
    (y, n_days, final_size, completed): y[i] is Z1 at day i+1, recorded
    up to absorption day (completed) or max_days (not completed).
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    s = n_pop - 1
    i = 1
    z1 = 1
    t = 0.0
    y = np.zeros(max_days, dtype=np.int64)
    day = 0
    while day < max_days:
        if i == 0:
            # absorbed: remaining days keep the final count
            for d in range(day, max_days):
                y[d] = z1
            return y, day, z1, True
        rate_inf = beta * s * i / (n_pop - 1.0) if n_pop > 1 else 0.0
        rate_rem = gamma * i
        total = rate_inf + rate_rem
        t_next = t + _exponential(state, total)
        while day < max_days and day + 1 <= t_next:
            y[day] = z1
            day += 1
        t = t_next
        if day >= max_days:
            break
        if _uniform(state) * total < rate_inf:
            s -= 1
            i += 1
            z1 += 1
        else:
            i -= 1
    return y, max_days, z1, i == 0


@njit(cache=True)
def sir_propagate_day(s, i, z1, n_pop, beta, gamma, z1_cap, state):
    """Advance one SIR particle by one day; stops early if Z1 > z1_cap."""
    t = 0.0
    while True:
        if i == 0:
            return s, i, z1
        rate_inf = beta * s * i / (n_pop - 1.0) if n_pop > 1 else 0.0
        total = rate_inf + gamma * i
        t += _exponential(state, total)
        if t > 1.0:
            return s, i, z1
        if _uniform(state) * total < rate_inf:
            s -= 1
            i += 1
            z1 += 1
            if z1 > z1_cap:
                return s, i, z1
        else:
            i -= 1


@njit(cache=True)
def sir_pf_loglik(y, n_pop, beta, gamma, n_particles, seed):
    """Bootstrap-filter log-likelihood of SIR final-size data.

    Observations are exact daily cumulative counts, so the weight of a
    particle is the indicator that its count matches; after the last
    day the analytic probability of no further infections conditions on
    the outbreak having ended at its final size.
    Returns -inf if every particle dies at some step.
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    n_days = y.shape[0]
    s_arr = np.full(n_particles, n_pop - 1, dtype=np.int64)
    i_arr = np.ones(n_particles, dtype=np.int64)
    z_arr = np.ones(n_particles, dtype=np.int64)
    loglik = 0.0
    for day in range(n_days):
        target = y[day]
        n_alive = 0
        for p in range(n_particles):
            s, i, z = sir_propagate_day(
                s_arr[p], i_arr[p], z_arr[p], n_pop, beta, gamma, target, state
            )
            if z == target:
                s_arr[n_alive] = s
                i_arr[n_alive] = i
                z_arr[n_alive] = z
                n_alive += 1
        if n_alive == 0:
            return -np.inf
        loglik += np.log(n_alive / n_particles)
        # systematic resampling over the uniform surviving weights
        u0 = _uniform(state)
        for p in range(n_particles - 1, -1, -1):
            idx = int((p + u0) * n_alive / n_particles)
            if idx >= n_alive:
                idx = n_alive - 1
            s_arr[p] = s_arr[idx]
            i_arr[p] = i_arr[idx]
            z_arr[p] = z_arr[idx]
    # end condition: final size reached at the last day and no further
    # infections ever occur.  P(no more infections | S, I) = (g/(g+bS/(N-1)))^I
    wsum = 0.0
    for p in range(n_particles):
        if n_pop > 1:
            rate_ratio = gamma / (gamma + beta * s_arr[p] / (n_pop - 1.0))
        else:
            rate_ratio = 1.0
        wsum += rate_ratio ** i_arr[p]
    if wsum == 0.0:
        return -np.inf
    return loglik + np.log(wsum / n_particles)


@njit(cache=True)
def seiar_daily(n_pop, beta_p, beta_s, sigma, gamma, q, max_days, seed):
    """Daily cumulative symptomatic counts from a SEIAR outbreak.

    Starts at (Z1..Z5) = (1, 1, 0, 0, 0), simulates until the first
    symptomatic case (the recording origin, y0 = 1) and then records Z3
    at integer times.  Returns (y, n_days, final_size, completed).
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    z1, z2, z3, z4, z5 = 1, 1, 0, 0, 0
    t = 0.0
    recording = False
    day = 0
    y = np.zeros(max_days, dtype=np.int64)
    while True:
        r_exp = (n_pop - z1) * (beta_p * (z2 - z3) + beta_s * (z3 - z4)) / n_pop
        r_pre = q * sigma * (z1 - z2 - z5)
        r_sym = gamma * (z2 - z3)
        r_rem = gamma * (z3 - z4)
        r_asy = (1.0 - q) * sigma * (z1 - z2 - z5)
        total = r_exp + r_pre + r_sym + r_rem + r_asy
        if total == 0.0:
            if recording:
                for d in range(day, max_days):
                    y[d] = z3
                return y, day, z3, True
            # cannot happen before Z3 = 1, but guard anyway
            return y, 0, z3, True
        t_next = t + _exponential(state, total)
        if recording:
            while day < max_days and day + 1 <= t_next:
                y[day] = z3
                day += 1
            if day >= max_days:
                return y, max_days, z3, False
        t = t_next
        u = _uniform(state) * total
        if u < r_exp:
            z1 += 1
        elif u < r_exp + r_pre:
            z2 += 1
        elif u < r_exp + r_pre + r_sym:
            z3 += 1
            if not recording and z3 == 1:
                recording = True
                t = 0.0
        elif u < r_exp + r_pre + r_sym + r_rem:
            z4 += 1
        else:
            z5 += 1


@njit(cache=True)
def predprey_path(k_cap, b, d1, d2, p1, p2, p0, q0, n_obs, dt, seed):
    """Predator-prey CTMC observed every ``dt`` time units.

    Returns integer states (n_obs + 1, 2) at times 0, dt, ..., n_obs*dt.
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    p = p0
    q = q0
    t = 0.0
    out = np.zeros((n_obs + 1, 2), dtype=np.int64)
    out[0, 0] = p
    out[0, 1] = q
    obs = 1
    while obs <= n_obs:
        r_pd = d1 * p
        r_qb = 2.0 * b * q * (k_cap - p - q) / k_cap
        r_qd = 2.0 * p2 * p * q / k_cap + d2 * q
        r_pr = 2.0 * p1 * p * q / k_cap
        total = r_pd + r_qb + r_qd + r_pr
        if total == 0.0:
            for o in range(obs, n_obs + 1):
                out[o, 0] = p
                out[o, 1] = q
            return out
        t_next = t + _exponential(state, total)
        while obs <= n_obs and obs * dt <= t_next:
            out[obs, 0] = p
            out[obs, 1] = q
            obs += 1
        t = t_next
        if obs > n_obs:
            break
        u = _uniform(state) * total
        if u < r_pd:
            p -= 1
        elif u < r_pd + r_qb:
            q += 1
        elif u < r_pd + r_qb + r_qd:
            q -= 1
        else:
            p += 1
            q -= 1
    return out
