"""Numba inner loops for the SGD trainers.

Shared discipline across kernels:
  - materialized vectors are gathered from stored neighbor rows before any
    update (simultaneous-update semantics), and every touched row is
    updated exactly once per sample;
  - regularization accumulators read pre-update rows;
  - transcendentals go through the math module (libm) so a pure-Python
    mirror can reproduce every bit;
  - negative items are drawn from the passed Generator by rejection, which
    keeps the whole sampling stream reproducible outside compiled code.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _profile_contains(idx, lo, hi, j):
    a, b = lo, hi
    while a < b:
        m = (a + b) // 2
        if idx[m] < j:
            a = m + 1
        else:
            b = m
    return a < hi and idx[a] == j


@njit(cache=True, nogil=True)
def _point_step(squash, P, Q, u, i, r,
                su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
                lr, reg_p, reg_q, ps, qs):
    f = P.shape[1]
    for t in range(f):
        ps[t] = 0.0
        qs[t] = 0.0
    regp = 0.0
    regq = 0.0
    for n in range(su_ptr[u], su_ptr[u + 1]):
        v = su_idx[n]
        w = su_val[n]
        for t in range(f):
            ps[t] += w * P[v, t]
        for t in range(f):
            regp += P[v, t] * P[v, t]
    for n in range(si_ptr[i], si_ptr[i + 1]):
        k = si_idx[n]
        w = si_val[n]
        for t in range(f):
            qs[t] += w * Q[k, t]
        for t in range(f):
            regq += Q[k, t] * Q[k, t]
    z = 0.0
    for t in range(f):
        z += ps[t] * qs[t]
    if squash:
        if z >= 0.0:
            ez = math.exp(-z)
            s = 1.0 / (1.0 + ez)
        else:
            ez = math.exp(z)
            s = ez / (1.0 + ez)
        g = (r - s) * s * (1.0 - s)
        err_term = r - s
    else:
        g = r - z
        err_term = g
    for n in range(su_ptr[u], su_ptr[u + 1]):
        v = su_idx[n]
        w = su_val[n]
        for t in range(f):
            P[v, t] = P[v, t] + lr * (g * w * qs[t] - reg_p * P[v, t])
    for n in range(si_ptr[i], si_ptr[i + 1]):
        k = si_idx[n]
        w = si_val[n]
        for t in range(f):
            Q[k, t] = Q[k, t] + lr * (g * w * ps[t] - reg_q * Q[k, t])
    return 0.5 * err_term * err_term + 0.5 * reg_p * regp + 0.5 * reg_q * regq


@njit(cache=True, nogil=True)
def point_epoch(squash, P, Q, pos_u, pos_i, pos_r, perm,
                prof_ptr, prof_idx,
                su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
                lr, reg_p, reg_q, neg_ratio, rng, trace, trace_used):
    """One epoch of the pointwise trainers (squash False: linear error;
    squash True: sigmoid-squashed prediction). Returns
    (loss, skipped_users, trace_used)."""
    n_items = Q.shape[0]
    f = P.shape[1]
    ps = np.empty(f)
    qs = np.empty(f)
    loss = 0.0
    skipped = 0
    for n in range(perm.shape[0]):
        t = perm[n]
        u = pos_u[t]
        loss += _point_step(squash, P, Q, u, pos_i[t], pos_r[t],
                            su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
                            lr, reg_p, reg_q, ps, qs)
        if neg_ratio > 0:
            lo = prof_ptr[u]
            hi = prof_ptr[u + 1]
            if hi - lo >= n_items:
                skipped += 1
            else:
                for _ in range(neg_ratio):
                    j = rng.integers(0, n_items)
                    while _profile_contains(prof_idx, lo, hi, j):
                        j = rng.integers(0, n_items)
                    if trace_used < trace.shape[0]:
                        trace[trace_used] = j
                        trace_used += 1
                    loss += _point_step(squash, P, Q, u, j, 0.0,
                                        su_ptr, su_idx, su_val,
                                        si_ptr, si_idx, si_val,
                                        lr, reg_p, reg_q, ps, qs)
    return loss, skipped, trace_used


@njit(cache=True, nogil=True)
def bpr_epoch(P, Q, pos_u, pos_i, perm, prof_ptr, prof_idx,
              su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
              lr, reg_p, reg_q, rng, trace, trace_used):
    """One epoch of pairwise ranking SGD over (u, i, j) triples.

    An item appearing in both i's and j's neighborhoods is updated once
    with the combined weight (s_ik - s_jk). Returns
    (loss, skipped_users, trace_used)."""
    n_items = Q.shape[0]
    f = P.shape[1]
    ps = np.empty(f)
    qi = np.empty(f)
    qj = np.empty(f)
    qd = np.empty(f)
    loss = 0.0
    skipped = 0
    for n in range(perm.shape[0]):
        tt = perm[n]
        u = pos_u[tt]
        i = pos_i[tt]
        lo = prof_ptr[u]
        hi = prof_ptr[u + 1]
        if hi - lo >= n_items:
            skipped += 1
            continue
        j = rng.integers(0, n_items)
        while _profile_contains(prof_idx, lo, hi, j):
            j = rng.integers(0, n_items)
        if trace_used < trace.shape[0]:
            trace[trace_used] = j
            trace_used += 1
        for t in range(f):
            ps[t] = 0.0
        regp = 0.0
        for nn in range(su_ptr[u], su_ptr[u + 1]):
            v = su_idx[nn]
            w = su_val[nn]
            for t in range(f):
                ps[t] += w * P[v, t]
            for t in range(f):
                regp += P[v, t] * P[v, t]
        for t in range(f):
            qi[t] = 0.0
            qj[t] = 0.0
        for nn in range(si_ptr[i], si_ptr[i + 1]):
            k = si_idx[nn]
            w = si_val[nn]
            for t in range(f):
                qi[t] += w * Q[k, t]
        for nn in range(si_ptr[j], si_ptr[j + 1]):
            k = si_idx[nn]
            w = si_val[nn]
            for t in range(f):
                qj[t] += w * Q[k, t]
        for t in range(f):
            qd[t] = qi[t] - qj[t]
        x = 0.0
        for t in range(f):
            x += ps[t] * qd[t]
        if x >= 0.0:
            ex = math.exp(-x)
            c = ex / (1.0 + ex)
            ln_term = math.log1p(ex)
        else:
            ex = math.exp(x)
            c = 1.0 / (1.0 + ex)
            ln_term = -x + math.log1p(ex)
        for nn in range(su_ptr[u], su_ptr[u + 1]):
            v = su_idx[nn]
            w = su_val[nn]
            for t in range(f):
                P[v, t] = P[v, t] + lr * (c * w * qd[t] - reg_p * P[v, t])
        # merged walk over both item neighborhoods in ascending id order
        a = si_ptr[i]
        ae = si_ptr[i + 1]
        b = si_ptr[j]
        be = si_ptr[j + 1]
        regq = 0.0
        while a < ae or b < be:
            if b >= be or (a < ae and si_idx[a] < si_idx[b]):
                k = si_idx[a]
                w = si_val[a]
                a += 1
            elif a >= ae or si_idx[b] < si_idx[a]:
                k = si_idx[b]
                w = -si_val[b]
                b += 1
            else:
                k = si_idx[a]
                w = si_val[a] - si_val[b]
                a += 1
                b += 1
            for t in range(f):
                regq += Q[k, t] * Q[k, t]
            for t in range(f):
                Q[k, t] = Q[k, t] + lr * (c * w * ps[t] - reg_q * Q[k, t])
        loss += ln_term + 0.5 * reg_p * regp + 0.5 * reg_q * regq
    return loss, skipped, trace_used


@njit(cache=True, nogil=True)
def slim_bpr_epoch(W, pos_u, pos_i, perm, prof_ptr, prof_idx,
                   lr, reg, rng, trace, trace_used):
    """One epoch of pairwise ranking SGD on a dense item-item weight
    matrix; diagonal entries are never touched. Returns
    (loss, skipped_users, trace_used)."""
    n_items = W.shape[0]
    loss = 0.0
    skipped = 0
    for n in range(perm.shape[0]):
        tt = perm[n]
        u = pos_u[tt]
        i = pos_i[tt]
        lo = prof_ptr[u]
        hi = prof_ptr[u + 1]
        if hi - lo >= n_items:
            skipped += 1
            continue
        j = rng.integers(0, n_items)
        while _profile_contains(prof_idx, lo, hi, j):
            j = rng.integers(0, n_items)
        if trace_used < trace.shape[0]:
            trace[trace_used] = j
            trace_used += 1
        x = 0.0
        for nn in range(lo, hi):
            l = prof_idx[nn]
            if l != i:
                x += W[l, i]
            if l != j:
                x -= W[l, j]
        if x >= 0.0:
            ex = math.exp(-x)
            c = ex / (1.0 + ex)
            ln_term = math.log1p(ex)
        else:
            ex = math.exp(x)
            c = 1.0 / (1.0 + ex)
            ln_term = -x + math.log1p(ex)
        regt = 0.0
        for nn in range(lo, hi):
            l = prof_idx[nn]
            if l != i:
                regt += W[l, i] * W[l, i]
                W[l, i] = W[l, i] + lr * (c - reg * W[l, i])
            if l != j:
                regt += W[l, j] * W[l, j]
                W[l, j] = W[l, j] + lr * (-c - reg * W[l, j])
        loss += ln_term + 0.5 * reg * regt
    return loss, skipped, trace_used
