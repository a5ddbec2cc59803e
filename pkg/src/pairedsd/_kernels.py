"""Compiled inner loops for the large-population simulations.

These kernels mirror the readable implementations in ``market`` and
``mechanisms`` exactly; the test suite asserts equality on fuzzed
instances.  They exist because the learning experiments evaluate hundreds
of thousands of serial-dictatorship runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _insertion_sort_row(row: np.ndarray, count: int) -> None:
    for a in range(1, count):
        key = row[a]
        b = a - 1
        while b >= 0 and row[b] > key:
            row[b + 1] = row[b]
            b -= 1
        row[b + 1] = key


@njit(cache=True, nogil=True)
def sd_courses(order, pref, values, caps, k):
    """Serial dictatorship for course bundles along ``order``.

    ``pref`` holds each student's course ids sorted by value descending with
    ties to the lower id, so walking it and taking the first k available
    courses reproduces the additive best-bundle rule.
    """
    n = order.shape[0]
    num_c = caps.shape[0]
    remaining = caps.copy()
    fill = np.empty(num_c, np.int64)
    navail = 0
    for c in range(num_c):
        if caps[c] == 0:
            fill[c] = 0
        else:
            fill[c] = n + 1
            navail += 1
    bundles = np.full((n, k), -1, np.int32)
    for pos in range(1, n + 1):
        if navail == 0:
            break
        i = order[pos - 1]
        cnt = 0
        for idx in range(num_c):
            c = pref[i, idx]
            if remaining[c] > 0:
                bundles[i, cnt] = c
                cnt += 1
                remaining[c] -= 1
                if remaining[c] == 0:
                    fill[c] = pos
                    navail -= 1
                if cnt == k or navail == 0:
                    break
        _insertion_sort_row(bundles[i], cnt)
    return bundles, fill


@njit(cache=True, nogil=True)
def sd_dorms(order, pref, values, caps):
    n = order.shape[0]
    num_d = caps.shape[0]
    remaining = caps.copy()
    fill = np.empty(num_d, np.int64)
    navail = 0
    for d in range(num_d):
        if caps[d] == 0:
            fill[d] = 0
        else:
            fill[d] = n + 1
            navail += 1
    dorms = np.full(n, -1, np.int32)
    for pos in range(1, n + 1):
        if navail == 0:
            break
        i = order[pos - 1]
        for idx in range(num_d):
            d = pref[i, idx]
            if remaining[d] > 0:
                dorms[i] = d
                remaining[d] -= 1
                if remaining[d] == 0:
                    fill[d] = pos
                    navail -= 1
                break
    return dorms, fill


@njit(cache=True, nogil=True)
def course_pick_order(signals, r_c):
    n = signals.shape[0]
    key = np.empty(n, np.int64)
    for i in range(n):
        key[i] = -(signals[i] * n + r_c[i])
    return np.argsort(key)


@njit(cache=True, nogil=True)
def dorm_pick_order(signals, r_d):
    n = signals.shape[0]
    key = np.empty(n, np.int64)
    for i in range(n):
        key[i] = signals[i] * n + (n - 1 - r_d[i])
    return np.argsort(key)


@njit(cache=True, nogil=True)
def _bisect_right(arr, lo, hi, x):
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True)
def frozen_matrix(signals, r_c, r_d, pref_c, vals_c, pref_d, vals_d, fill_c, fill_d, k, num_signals):
    """Counterfactual utility of every (student, signal) against frozen traces.

    The deviator keeps their tie-break ranks; their pick position at signal s
    is 1 + #{j != i: s_j > s} + #{j: s_j = s, r_j > r_i}, and a good is
    available iff its recorded fill position is >= that position.  Evaluating
    a student at their realized signal therefore returns their realized
    utility exactly.
    """
    n = signals.shape[0]
    num_c = vals_c.shape[1]
    num_d = vals_d.shape[1]
    counts = np.zeros(num_signals, np.int64)
    for i in range(n):
        counts[signals[i]] += 1
    count_gt = np.zeros(num_signals, np.int64)
    acc = 0
    for s in range(num_signals - 1, -1, -1):
        count_gt[s] = acc
        acc += counts[s]
    count_lt = np.zeros(num_signals, np.int64)
    acc = 0
    for s in range(num_signals):
        count_lt[s] = acc
        acc += counts[s]
    start = np.zeros(num_signals + 1, np.int64)
    for s in range(num_signals):
        start[s + 1] = start[s] + counts[s]

    ranks_c = np.empty(n, np.int64)
    ranks_d = np.empty(n, np.int64)
    ptr = start[:num_signals].copy()
    for i in range(n):
        s = signals[i]
        ranks_c[ptr[s]] = r_c[i]
        ranks_d[ptr[s]] = r_d[i]
        ptr[s] += 1
    for s in range(num_signals):
        ranks_c[start[s] : start[s + 1]].sort()
        ranks_d[start[s] : start[s + 1]].sort()

    out = np.empty((n, num_signals), np.float64)
    for i in range(n):
        own = signals[i]
        for s in range(num_signals):
            above_c = count_gt[s]
            if own > s:
                above_c -= 1
            below_d = count_lt[s]
            if own < s:
                below_d -= 1
            lo = start[s]
            hi = start[s + 1]
            tie_c = hi - _bisect_right(ranks_c, lo, hi, r_c[i])
            tie_d = hi - _bisect_right(ranks_d, lo, hi, r_d[i])
            pos_c = 1 + above_c + tie_c
            pos_d = 1 + below_d + tie_d

            total = 0.0
            cnt = 0
            for idx in range(num_c):
                c = pref_c[i, idx]
                if fill_c[c] >= pos_c:
                    total += vals_c[i, c]
                    cnt += 1
                    if cnt == k:
                        break
            for idx in range(num_d):
                d = pref_d[i, idx]
                if fill_d[d] >= pos_d:
                    total += vals_d[i, d]
                    break
            out[i, s] = total
    return out


@njit(cache=True, nogil=True)
def allocation_utilities(bundles, dorms, vals_c, vals_d):
    n = bundles.shape[0]
    k = bundles.shape[1]
    out = np.zeros(n, np.float64)
    for i in range(n):
        for j in range(k):
            c = bundles[i, j]
            if c >= 0:
                out[i] += vals_c[i, c]
        d = dorms[i]
        if d >= 0:
            out[i] += vals_d[i, d]
    return out


@njit(cache=True, nogil=True)
def evaluate_draw(signals, r_c, r_d, pref_c, vals_c, pref_d, vals_d, caps_c, caps_d, k, num_signals):
    """One tie-break draw: run both markets and return the frozen payoff matrix
    together with the realized bundles, dorms and both fill-position arrays."""
    order_c = course_pick_order(signals, r_c)
    bundles, fill_c = sd_courses(order_c, pref_c, vals_c, caps_c, k)
    order_d = dorm_pick_order(signals, r_d)
    dorms, fill_d = sd_dorms(order_d, pref_d, vals_d, caps_d)
    matrix = frozen_matrix(
        signals, r_c, r_d, pref_c, vals_c, pref_d, vals_d, fill_c, fill_d, k, num_signals
    )
    return matrix, bundles, dorms, fill_c, fill_d
