"""Compiled kernels: congestion scans and the fixed-step integrator loops.

Everything here works on plain float64 arrays; the public wrappers with
validation live in :mod:`scmflow.core` and :mod:`scmflow.engine`.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Status codes returned by the integrator loops.
STATUS_OK = 0
STATUS_NONFINITE = 2
STATUS_EVENT_OVERFLOW = 3

# Crossing times are refined to this absolute resolution (seconds).
EVENT_TIME_TOL = 1e-9

# A refuted contact disarms its slot; the slot re-arms once the pair has
# separated by more than this distance (metres).
REARM_GAP = 1e-9


@njit(cache=True)
def gamma_open_scan(x, kappa, omega):
    """Congestion factors on an open link, front-to-back positions.

    One pass with a running shift: with a_j = -x_j/omega the factor is
    (1/kappa) * sum_{j<i} exp(a_j - a_i), accumulated relative to the
    running maximum of a_j so arbitrarily wide position spans neither
    overflow nor flush to zero.
    """
    n = x.size
    out = np.empty(n)
    out[0] = 0.0
    if n == 1:
        return out
    m = -x[0] / omega  # running max of a_j over seen vehicles
    s = 1.0            # sum of exp(a_j - m) over seen vehicles
    for i in range(1, n):
        ai = -x[i] / omega
        out[i] = s * np.exp(m - ai) / kappa
        if ai > m:
            s = s * np.exp(m - ai) + 1.0
            m = ai
        else:
            s += np.exp(ai - m)
    return out


@njit(cache=True)
def gamma_ring_scan(x, kappa, omega, circumference):
    """Congestion factors on a ring, O(N log N) via one sort and two sweeps.

    Every other vehicle is ahead at its forward wrapped distance.  After
    sorting the wrapped positions, the contribution splits into vehicles
    ahead within the arc (suffix sweep) and vehicles reached across the wrap
    (prefix sweep carrying an exp(-L/omega) attenuation).
    """
    n = x.size
    y = np.empty(n)
    for i in range(n):
        y[i] = x[i] % circumference
    idx = np.argsort(y)
    ys = y[idx]
    f = np.empty(n)  # suffix: sum over later-sorted vehicles
    g = np.empty(n)  # prefix: sum over earlier-sorted vehicles, once around
    f[n - 1] = 0.0
    for k in range(n - 2, -1, -1):
        f[k] = np.exp(-(ys[k + 1] - ys[k]) / omega) * (f[k + 1] + 1.0)
    g[0] = 0.0
    lw = circumference / omega
    for k in range(1, n):
        d = (ys[k] - ys[k - 1]) / omega
        if d > 600.0:
            # one gap spans hundreds of horizons: rescale through logs so the
            # bounded product never materialises exp(d) on its own
            prev = g[k - 1]
            t1 = np.exp(d + np.log(prev)) if prev > 0.0 else 0.0
            g[k] = t1 + np.exp(d - lw)
        else:
            g[k] = np.exp(d) * g[k - 1] + np.exp(d - lw)
    out = np.empty(n)
    for k in range(n):
        out[idx[k]] = (f[k] + g[k]) / kappa
    return out


@njit(cache=True)
def _velocities_open(x, order, vmax, kappa, omega):
    """Velocity by vehicle id given the current front-to-back order."""
    n = x.size
    xo = np.empty(n)
    for p in range(n):
        xo[p] = x[order[p]]
    gam = gamma_open_scan(xo, kappa, omega)
    v = np.empty(n)
    for p in range(n):
        i = order[p]
        v[i] = vmax[i] * (1.0 - gam[p])
    return v


@njit(cache=True)
def _gamma_open_by_slot(x, order, kappa, omega):
    n = x.size
    xo = np.empty(n)
    for p in range(n):
        xo[p] = x[order[p]]
    return gamma_open_scan(xo, kappa, omega)


@njit(cache=True)
def _velocities_ring(x, vmax, kappa, omega, circumference):
    gam = gamma_ring_scan(x, kappa, omega, circumference)
    return vmax * (1.0 - gam)


@njit(cache=True)
def rk4_open_once(x, order, vmax, kappa, omega, h):
    k1 = _velocities_open(x, order, vmax, kappa, omega)
    k2 = _velocities_open(x + 0.5 * h * k1, order, vmax, kappa, omega)
    k3 = _velocities_open(x + 0.5 * h * k2, order, vmax, kappa, omega)
    k4 = _velocities_open(x + h * k3, order, vmax, kappa, omega)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def rk4_ring_once(x, vmax, kappa, omega, circumference, h):
    k1 = _velocities_ring(x, vmax, kappa, omega, circumference)
    k2 = _velocities_ring(x + 0.5 * h * k1, vmax, kappa, omega, circumference)
    k3 = _velocities_ring(x + 0.5 * h * k2, vmax, kappa, omega, circumference)
    k4 = _velocities_ring(x + h * k3, vmax, kappa, omega, circumference)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _hermite_gap_root(g0, d0, g1, d1, h, tol):
    """Earliest root of the cubic Hermite through (0,g0,d0),(h,g1,d1).

    Assumes g0 >= 0 > g1.  Scans eight subintervals for the first sign
    change, then bisects to `tol` seconds.
    """
    if g0 <= 0.0:
        return 0.0
    lo = 0.0
    glo = g0
    hi = h
    # coarse scan so an early crossing of a wiggly cubic is not skipped
    for k in range(1, 8):
        s = h * k / 8.0
        u = s / h
        h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u)
        h10 = u * (1.0 - u) * (1.0 - u)
        h01 = u * u * (3.0 - 2.0 * u)
        h11 = u * u * (u - 1.0)
        gs = h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1
        if gs < 0.0:
            hi = s
            break
        lo = s
        glo = gs
    while hi - lo > tol:
        s = 0.5 * (lo + hi)
        u = s / h
        h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u)
        h10 = u * (1.0 - u) * (1.0 - u)
        h01 = u * u * (3.0 - 2.0 * u)
        h11 = u * u * (u - 1.0)
        gs = h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1
        if gs < 0.0:
            hi = s
        else:
            lo = s
            glo = gs
    return 0.5 * (lo + hi)


@njit(cache=True)
def _all_finite(x):
    for i in range(x.size):
        if not np.isfinite(x[i]):
            return False
    return True


@njit(cache=True)
def advance_open(x, order, armed, vmax, kappa, omega, t0, t1,
                 ev_t, ev_passer, ev_passed, n_ev):
    """Advance an open-link state from t0 to t1 in place, handling crossings.

    Each detected adjacent contact is located with Hermite interpolation and
    bisection, the state is re-integrated to the contact time, and the pass
    is adjudicated with the passing criterion: the follower overtakes only
    if kappa*(1 - Gamma_leader) exceeds V_f/(V_f - V_l).  Refuted contacts
    disarm their slot until the pair separates again.

    Returns (n_ev, status).
    """
    n = x.size
    t_cur = t0
    v = _velocities_open(x, order, vmax, kappa, omega)
    guard = 0
    while t1 - t_cur > 0.0:
        h = t1 - t_cur
        x_new = rk4_open_once(x, order, vmax, kappa, omega, h)
        if not _all_finite(x_new):
            return n_ev, STATUS_NONFINITE
        v_new = _velocities_open(x_new, order, vmax, kappa, omega)
        best_s = h * 2.0
        best_k = -1
        for k in range(n - 1):
            lid = order[k]
            fid = order[k + 1]
            g0 = x[lid] - x[fid]
            if armed[k] == 0:
                if g0 > REARM_GAP:
                    armed[k] = 1
                else:
                    continue
            g1 = x_new[lid] - x_new[fid]
            if g1 < 0.0 and g0 >= 0.0:
                s = _hermite_gap_root(g0, v[lid] - v[fid], g1,
                                      v_new[lid] - v_new[fid], h,
                                      EVENT_TIME_TOL)
                if s < best_s:
                    best_s = s
                    best_k = k
        if best_k < 0:
            for i in range(n):
                x[i] = x_new[i]
            return n_ev, STATUS_OK
        if best_s > 0.0:
            x_c = rk4_open_once(x, order, vmax, kappa, omega, best_s)
        else:
            x_c = x.copy()
        gam = _gamma_open_by_slot(x_c, order, kappa, omega)
        lid = order[best_k]
        fid = order[best_k + 1]
        cond = False
        if vmax[fid] > vmax[lid]:
            gl = gam[best_k]
            cond = kappa * (1.0 - gl) > vmax[fid] / (vmax[fid] - vmax[lid])
        if cond:
            if n_ev >= ev_t.size:
                return n_ev, STATUS_EVENT_OVERFLOW
            ev_t[n_ev] = t_cur + best_s
            ev_passer[n_ev] = fid
            ev_passed[n_ev] = lid
            n_ev += 1
            order[best_k] = fid
            order[best_k + 1] = lid
            if best_k > 0:
                armed[best_k - 1] = 1
            armed[best_k] = 1
            if best_k + 1 < n - 1:
                armed[best_k + 1] = 1
        else:
            armed[best_k] = 0
        for i in range(n):
            x[i] = x_c[i]
        v = _velocities_open(x, order, vmax, kappa, omega)
        t_cur = t_cur + best_s
        guard += 1
        if guard > 64 * n + 1024:
            return n_ev, STATUS_EVENT_OVERFLOW
    return n_ev, STATUS_OK


@njit(cache=True)
def run_open_link(x0, vmax, order0, kappa, omega, dt, n_steps, sample_every):
    """Fixed-step RK4 on an open link with crossing detection.

    Returns (times, xs, vs, n_samples, ev_t, ev_passer, ev_passed, n_ev,
    order, status, bad_step).  On failure the sample arrays are valid up to
    n_samples.
    """
    n = x0.size
    x = x0.copy()
    order = order0.copy()
    n_samples = n_steps // sample_every + 1
    times = np.empty(n_samples)
    xs = np.empty((n_samples, n))
    vs = np.empty((n_samples, n))
    ev_cap = n * (n - 1) // 2 + 1
    ev_t = np.empty(ev_cap)
    ev_passer = np.empty(ev_cap, np.int64)
    ev_passed = np.empty(ev_cap, np.int64)
    n_ev = 0
    armed = np.ones(max(n - 1, 1), np.uint8)
    times[0] = 0.0
    xs[0, :] = x
    vs[0, :] = _velocities_open(x, order, vmax, kappa, omega)
    si = 1
    for step in range(n_steps):
        t0 = step * dt
        t1 = (step + 1) * dt
        n_ev, status = advance_open(x, order, armed, vmax, kappa, omega,
                                    t0, t1, ev_t, ev_passer, ev_passed, n_ev)
        if status != STATUS_OK:
            return (times, xs, vs, si, ev_t, ev_passer, ev_passed, n_ev,
                    order, status, step)
        if (step + 1) % sample_every == 0:
            times[si] = t1
            xs[si, :] = x
            vs[si, :] = _velocities_open(x, order, vmax, kappa, omega)
            si += 1
    return (times, xs, vs, si, ev_t, ev_passer, ev_passed, n_ev, order,
            STATUS_OK, -1)


@njit(cache=True)
def run_ring(x0, vmax, kappa, omega, circumference, dt, n_steps, sample_every):
    """Fixed-step RK4 on a ring; positions accumulate unwrapped."""
    n = x0.size
    x = x0.copy()
    n_samples = n_steps // sample_every + 1
    times = np.empty(n_samples)
    xs = np.empty((n_samples, n))
    vs = np.empty((n_samples, n))
    times[0] = 0.0
    xs[0, :] = x
    vs[0, :] = _velocities_ring(x, vmax, kappa, omega, circumference)
    si = 1
    for step in range(n_steps):
        x = rk4_ring_once(x, vmax, kappa, omega, circumference, dt)
        if not _all_finite(x):
            return times, xs, vs, si, STATUS_NONFINITE, step
        if (step + 1) % sample_every == 0:
            times[si] = (step + 1) * dt
            xs[si, :] = x
            vs[si, :] = _velocities_ring(x, vmax, kappa, omega, circumference)
            si += 1
    return times, xs, vs, si, STATUS_OK, -1
