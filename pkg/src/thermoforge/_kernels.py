"""Jitted fixed-step RK4 endurance integrator.

Same scheme and node layout as thermal_physics.simulate, specialized for the
hot sequential paths (policy scoring, piecewise-policy search, solution
verification) where per-step Python overhead dominates. Branch flows come in
as a piecewise-linear schedule over strictly increasing knot times, held
constant beyond the last knot.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# consts vector layout for the kernels
C_FLUID, HA_CPHX, HA_LLHX, CAP_F, CAP_W, CAP_LW, CAP_H, TANK_MASS, PUMP, SINK_FLOW, SINK_TEMP = range(11)

OK = 0
DIVERGED = 1


@njit(cache=True)
def _deriv(T, m, loads_w, up, leaf, c, out):
    n = m.shape[0]
    lw = 2 * n + 1
    hot = 2 * n + 2
    cold = 2 * n + 3
    merged_e = 0.0
    merged_f = 0.0
    for j in range(leaf.shape[0]):
        b = leaf[j]
        merged_e += m[b] * T[1 + b]
        merged_f += m[b]
    cf = c[C_FLUID]
    for i in range(n):
        Tf = T[1 + i]
        Tw = T[n + 1 + i]
        Tup = T[up[i]]
        out[1 + i] = (m[i] * cf * (Tup - Tf) + c[HA_CPHX] * (Tw - Tf)) / c[CAP_F]
        out[n + 1 + i] = (loads_w[i] + c[HA_CPHX] * (Tf - Tw)) / c[CAP_W]
    out[hot] = (cf * (merged_e - merged_f * T[hot]) + c[HA_LLHX] * (T[lw] - T[hot])) / c[CAP_H]
    out[lw] = (c[HA_LLHX] * (T[hot] - T[lw]) + c[HA_LLHX] * (T[cold] - T[lw])) / c[CAP_LW]
    out[cold] = (c[SINK_FLOW] * cf * (c[SINK_TEMP] - T[cold]) + c[HA_LLHX] * (T[lw] - T[cold])) / c[CAP_H]
    out[0] = c[PUMP] * (T[hot] - T[0]) / c[TANK_MASS]


@njit(cache=True)
def _flows_at(knot_t, knot_m, t, out):
    k = knot_t.shape[0]
    if t <= knot_t[0]:
        for j in range(out.shape[0]):
            out[j] = knot_m[0, j]
        return
    if t >= knot_t[k - 1]:
        for j in range(out.shape[0]):
            out[j] = knot_m[k - 1, j]
        return
    lo = 0
    hi = k - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if knot_t[mid] <= t:
            lo = mid
        else:
            hi = mid
    w = (t - knot_t[lo]) / (knot_t[hi] - knot_t[lo])
    for j in range(out.shape[0]):
        out[j] = (1.0 - w) * knot_m[lo, j] + w * knot_m[hi, j]


@njit(cache=True)
def rk4_sample(T0, loads_w, up, leaf, consts, knot_t, knot_m, dt, sample_t, out_T):
    """Integrate to sample_t[-1], writing states at sample_t rows of out_T.

    Samples are located by linear interpolation across the bracketing step.
    sample_t must be nondecreasing and start at >= 0. Returns a status code.
    """
    n_temps = T0.shape[0]
    n = loads_w.shape[0]
    T = T0.copy()
    newT = np.empty(n_temps)
    k1 = np.empty(n_temps)
    k2 = np.empty(n_temps)
    k3 = np.empty(n_temps)
    k4 = np.empty(n_temps)
    tmp = np.empty(n_temps)
    m0 = np.empty(n)
    mh = np.empty(n)
    m1 = np.empty(n)

    n_samples = sample_t.shape[0]
    idx = 0
    while idx < n_samples and sample_t[idx] <= 0.0:
        for i in range(n_temps):
            out_T[idx, i] = T[i]
        idx += 1
    t_stop = sample_t[n_samples - 1]
    t = 0.0
    while t < t_stop - 1e-12 and idx < n_samples:
        h = dt if t + dt <= t_stop else t_stop - t
        _flows_at(knot_t, knot_m, t, m0)
        _flows_at(knot_t, knot_m, t + 0.5 * h, mh)
        _flows_at(knot_t, knot_m, t + h, m1)
        _deriv(T, m0, loads_w, up, leaf, consts, k1)
        for i in range(n_temps):
            tmp[i] = T[i] + 0.5 * h * k1[i]
        _deriv(tmp, mh, loads_w, up, leaf, consts, k2)
        for i in range(n_temps):
            tmp[i] = T[i] + 0.5 * h * k2[i]
        _deriv(tmp, mh, loads_w, up, leaf, consts, k3)
        for i in range(n_temps):
            tmp[i] = T[i] + h * k3[i]
        _deriv(tmp, m1, loads_w, up, leaf, consts, k4)
        for i in range(n_temps):
            v = T[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            newT[i] = v
            if not np.isfinite(v):
                return DIVERGED
        while idx < n_samples and sample_t[idx] <= t + h + 1e-12:
            w = (sample_t[idx] - t) / h
            if w < 0.0:
                w = 0.0
            if w > 1.0:
                w = 1.0
            for i in range(n_temps):
                out_T[idx, i] = (1.0 - w) * T[i] + w * newT[i]
            idx += 1
        for i in range(n_temps):
            T[i] = newT[i]
        t += h
    while idx < n_samples:
        for i in range(n_temps):
            out_T[idx, i] = T[i]
        idx += 1
    return OK


@njit(cache=True)
def rk4_flow_knots(T0, loads_w, up, leaf, limits, consts, knot_t, knot_m, dt, t_stop, stop_at_cross):
    """Integrate until t_stop, tracking the first bound crossing.

    Returns (status, endurance, max_excess, T_final, steps); endurance is -1.0
    when no temperature reaches its limit inside the window. The crossing is
    located by per-node linear interpolation across the bracketing step, the
    same rule the trajectory-based extractor uses.
    """
    n_temps = T0.shape[0]
    n = loads_w.shape[0]
    T = T0.copy()
    newT = np.empty(n_temps)
    k1 = np.empty(n_temps)
    k2 = np.empty(n_temps)
    k3 = np.empty(n_temps)
    k4 = np.empty(n_temps)
    tmp = np.empty(n_temps)
    m0 = np.empty(n)
    mh = np.empty(n)
    m1 = np.empty(n)

    max_excess = -1.0e300
    endurance = -1.0
    crossed = False
    for i in range(n_temps):
        e = T[i] - limits[i]
        if e > max_excess:
            max_excess = e
    if max_excess >= 0.0:
        return OK, 0.0, max_excess, T, 0

    t = 0.0
    step = 0
    while t < t_stop - 1e-12:
        h = dt if t + dt <= t_stop else t_stop - t
        _flows_at(knot_t, knot_m, t, m0)
        _flows_at(knot_t, knot_m, t + 0.5 * h, mh)
        _flows_at(knot_t, knot_m, t + h, m1)
        _deriv(T, m0, loads_w, up, leaf, consts, k1)
        for i in range(n_temps):
            tmp[i] = T[i] + 0.5 * h * k1[i]
        _deriv(tmp, mh, loads_w, up, leaf, consts, k2)
        for i in range(n_temps):
            tmp[i] = T[i] + 0.5 * h * k2[i]
        _deriv(tmp, mh, loads_w, up, leaf, consts, k3)
        for i in range(n_temps):
            tmp[i] = T[i] + h * k3[i]
        _deriv(tmp, m1, loads_w, up, leaf, consts, k4)
        finite = True
        for i in range(n_temps):
            v = T[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            newT[i] = v
            if not np.isfinite(v):
                finite = False
        step += 1
        if not finite:
            return DIVERGED, endurance, max_excess, newT, step

        hit = False
        for i in range(n_temps):
            e = newT[i] - limits[i]
            if e > max_excess:
                max_excess = e
            if e >= 0.0:
                hit = True
        if hit and not crossed:
            best = t + h
            for i in range(n_temps):
                e1 = newT[i] - limits[i]
                if e1 >= 0.0:
                    e0 = T[i] - limits[i]
                    if e1 == e0:
                        cross = t + h
                    else:
                        cross = t + h * (0.0 - e0) / (e1 - e0)
                    if cross < t:
                        cross = t
                    if cross > t + h:
                        cross = t + h
                    if cross < best:
                        best = cross
            endurance = best
            crossed = True
            if stop_at_cross:
                for i in range(n_temps):
                    T[i] = newT[i]
                return OK, endurance, max_excess, T, step
        for i in range(n_temps):
            T[i] = newT[i]
        t += h
    return OK, endurance, max_excess, T, step
