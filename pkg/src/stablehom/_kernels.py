"""Compiled path kernels.

Randomness comes from a counter-based splitmix64 stream: the k-th uniform of
path p is mix(key_p + k * GAMMA), so a path depends only on (seed, path index)
and never on scheduling.
"""

import math

import numpy as np
from numba import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0
_BRIDGE = np.uint64(0xD1B54A32D192ED03)

STATUS_OK = 0
STATUS_DOMINATION = 1
STATUS_OVERFLOW = 2


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def uniform(key, ctr):
    """Uniform on the open interval (0, 1)."""
    z = mix64(key + ctr * GAMMA)
    return (np.float64(z >> _S11) + 0.5) * _INV53


@njit(cache=True)
def _eval(x, base, amps, freqs, phases, out):
    d = base.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = base[i, j]
    for k in range(phases.shape[0]):
        arg = phases[k]
        for i in range(d):
            arg += freqs[k, i] * x[i]
        c = math.cos(arg)
        for i in range(d):
            for j in range(d):
                out[i, j] += c * amps[k, i, j]


@njit(cache=True)
def _cov_chol(a, s, out):
    """Lower Cholesky factor of s (Tr a I + 2 a)."""
    d = a.shape[0]
    if d == 1:
        out[0, 0] = math.sqrt(s * 3.0 * a[0, 0])
        return
    tr = a[0, 0] + a[1, 1]
    c11 = s * (tr + 2.0 * a[0, 0])
    c22 = s * (tr + 2.0 * a[1, 1])
    c12 = s * 2.0 * a[0, 1]
    l11 = math.sqrt(c11)
    out[0, 0] = l11
    out[0, 1] = 0.0
    out[1, 0] = c12 / l11
    out[1, 1] = math.sqrt(max(c22 - out[1, 0] * out[1, 0], 0.0))


@njit(cache=True)
def run_path(
    key,
    x0,
    base,
    amps,
    freqs,
    phases,
    alpha,
    lam_op,
    r_min,
    gauss,
    substep,
    horizon,
    sample_times,
    out_samples,
    out_integral,
    exit_radius,
    rec_t,
    rec_x,
    rec_mark,
):
    """Simulate one path on [0, horizon].

    Returns (accepted, rejected, n_events, status, exited).  ``rec_*`` arrays of
    length 0 disable recording; otherwise they must hold every event (run once
    with empty arrays to count).
    """
    d = x0.shape[0]
    sphere = 2.0 if d == 1 else 2.0 * math.pi
    lam_tot = lam_op * sphere * r_min ** (-alpha) / alpha
    gcoef = r_min ** (2.0 - alpha) / (2.0 - alpha) * sphere / (d * (d + 2))
    recording = rec_t.shape[0] > 0
    ctr = np.uint64(0)

    x = x0.copy()
    a_l = np.empty((d, d))
    a_r = np.empty((d, d))
    _eval(x, base, amps, freqs, phases, a_l)
    for i in range(d):
        for j in range(d):
            out_integral[i, j] = 0.0

    m = sample_times.shape[0]
    k = 0
    while k < m and sample_times[k] <= 0.0:
        for i in range(d):
            out_samples[k, i] = x[i]
        k += 1

    n_ev = 0
    if recording:
        rec_t[0] = 0.0
        for i in range(d):
            rec_x[0, i] = x[i]
        rec_mark[0] = 0
    n_ev = 1

    t = 0.0
    next_prop = -math.log(uniform(key, ctr)) / lam_tot
    ctr += _ONE
    next_ref = substep
    bkey = mix64(key ^ _BRIDGE)
    acc = 0
    rej = 0
    exited = 0
    dx = np.zeros(d)
    chol = np.zeros((d, d))
    while True:
        tt = horizon
        if next_prop < tt:
            tt = next_prop
        if next_ref < tt:
            tt = next_ref
        dt = tt - t
        for i in range(d):
            dx[i] = 0.0
        if gauss and dt > 0.0:
            s = gcoef * dt
            _cov_chol(a_l, s, chol)
            u1 = uniform(key, ctr)
            u2 = uniform(key, ctr + _ONE)
            ctr += np.uint64(2)
            rad = math.sqrt(-2.0 * math.log(u1))
            g1 = rad * math.cos(2.0 * math.pi * u2)
            g2 = rad * math.sin(2.0 * math.pi * u2)
            dx[0] = chol[0, 0] * g1
            if d == 2:
                dx[1] = chol[1, 0] * g1 + chol[1, 1] * g2
        # passive observations strictly inside (t, tt): Brownian bridge on its own stream
        while k < m and sample_times[k] < tt:
            fr = (sample_times[k] - t) / dt if dt > 0.0 else 0.0
            for i in range(d):
                out_samples[k, i] = x[i] + fr * dx[i]
            if gauss and dt > 0.0 and fr > 0.0:
                sd = math.sqrt(fr * (1.0 - fr))
                v1 = uniform(bkey, np.uint64(2 * k))
                v2 = uniform(bkey, np.uint64(2 * k + 1))
                rb = math.sqrt(-2.0 * math.log(v1))
                h1 = rb * math.cos(2.0 * math.pi * v2)
                h2 = rb * math.sin(2.0 * math.pi * v2)
                out_samples[k, 0] += sd * chol[0, 0] * h1
                if d == 2:
                    out_samples[k, 1] += sd * (chol[1, 0] * h1 + chol[1, 1] * h2)
            k += 1
        if gauss and dt > 0.0:
            for i in range(d):
                x[i] += dx[i]
            _eval(x, base, amps, freqs, phases, a_r)
            for i in range(d):
                for j in range(d):
                    out_integral[i, j] += 0.5 * (a_l[i, j] + a_r[i, j]) * dt
                    a_l[i, j] = a_r[i, j]
        else:
            for i in range(d):
                for j in range(d):
                    out_integral[i, j] += a_l[i, j] * dt
        t = tt
        mark = 0
        if t == next_prop:
            if d == 1:
                sg = 1.0 if uniform(key, ctr) < 0.5 else -1.0
                s0 = sg
                s1 = 0.0
                quad = a_l[0, 0]
            else:
                th = 2.0 * math.pi * uniform(key, ctr)
                s0 = math.cos(th)
                s1 = math.sin(th)
                quad = a_l[0, 0] * s0 * s0 + 2.0 * a_l[0, 1] * s0 * s1 + a_l[1, 1] * s1 * s1
            ctr += _ONE
            p = quad / lam_op
            if p > 1.0 + 1e-12 or p < -1e-12:
                return acc, rej, n_ev, STATUS_DOMINATION, exited
            jump = r_min * uniform(key, ctr) ** (-1.0 / alpha)
            ctr += _ONE
            if uniform(key, ctr) < p:
                x[0] += jump * s0
                if d == 2:
                    x[1] += jump * s1
                _eval(x, base, amps, freqs, phases, a_l)
                acc += 1
                mark = 1
            else:
                rej += 1
                mark = 2
            ctr += _ONE
            next_prop = t - math.log(uniform(key, ctr)) / lam_tot
            ctr += _ONE
        if t == next_ref:
            next_ref = t + substep
        while k < m and sample_times[k] <= t:
            for i in range(d):
                out_samples[k, i] = x[i]
            k += 1
        if recording:
            if n_ev >= rec_t.shape[0]:
                return acc, rej, n_ev, STATUS_OVERFLOW, exited
            rec_t[n_ev] = t
            for i in range(d):
                rec_x[n_ev, i] = x[i]
            rec_mark[n_ev] = mark
        n_ev += 1
        if exit_radius > 0.0:
            r2 = 0.0
            for i in range(d):
                r2 += (x[i] - x0[i]) ** 2
            if r2 >= exit_radius * exit_radius:
                exited = 1
                break
        if t >= horizon:
            break
    return acc, rej, n_ev, STATUS_OK, exited


@njit(cache=True, nogil=True)
def run_batch(
    keys,
    x0,
    base,
    amps,
    freqs,
    phases,
    alpha,
    lam_op,
    r_min,
    gauss,
    substep,
    horizon,
    sample_times,
    out_samples,
    out_integrals,
    stats,
):
    """Many paths: states at ``sample_times`` and time integrals of a(X_s).

    ``stats[p] = (accepted, rejected, status)``.
    """
    empty_t = np.empty(0)
    empty_x = np.empty((0, x0.shape[0]))
    empty_m = np.empty(0, dtype=np.int8)
    for p in range(keys.shape[0]):
        acc, rej, _, status, _ = run_path(
            keys[p], x0, base, amps, freqs, phases, alpha, lam_op, r_min, gauss, substep, horizon,
            sample_times, out_samples[p], out_integrals[p], 0.0, empty_t, empty_x, empty_m,
        )
        stats[p, 0] = acc
        stats[p, 1] = rej
        stats[p, 2] = status


@njit(cache=True, nogil=True)
def run_exit_batch(keys, x0, base, amps, freqs, phases, alpha, lam_op, r_min, gauss, substep, radius, out, stats):
    """E[exp(-tau)] via an independent unit exponential clock: out[p] = 1 iff the ball is left first."""
    d = x0.shape[0]
    empty_s = np.empty(0)
    samp = np.empty((0, d))
    integ = np.empty((d, d))
    empty_t = np.empty(0)
    empty_x = np.empty((0, d))
    empty_m = np.empty(0, dtype=np.int8)
    for p in range(keys.shape[0]):
        # the clock uses a separate derived key so the path stream is untouched
        clock = -math.log(uniform(mix64(keys[p] ^ GAMMA), np.uint64(0)))
        acc, rej, _, status, exited = run_path(
            keys[p], x0, base, amps, freqs, phases, alpha, lam_op, r_min, gauss, substep, clock,
            empty_s, samp, integ, radius, empty_t, empty_x, empty_m,
        )
        out[p] = exited
        stats[p, 0] = acc
        stats[p, 1] = rej
        stats[p, 2] = status
