"""Compiled epoch loops.

The per-instance arithmetic mirrors :func:`sucm.training._sgd_step` and
:mod:`sucm.baselines`; those stay the readable references and the test suite
pins the kernels to them.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


class FlatLayout:
    """CSR-style copies of the per-app index lists in :class:`sucm.model.Layout`."""

    def __init__(self, layout, num_internal: int):
        self.comp_ptr, self.comp_rows = _csr(layout.comp_rows, np.int64)
        _, self.comp_chosen = _csr(layout.comp_chosen, np.float64)
        # absolute segment starts, one extra end per app
        starts = []
        self.seg_ptr = np.zeros(len(layout.comp_starts) + 1, dtype=np.int64)
        for i, s in enumerate(layout.comp_starts):
            base = self.comp_ptr[i]
            starts.extend((base + s).tolist())
            self.seg_ptr[i + 1] = len(starts)
        self.seg_start = np.asarray(starts, dtype=np.int64)
        self.parent_row = layout.parent_row.astype(np.int64)
        self.child_ptr, self.child_idx = _csr(layout.child_rows, np.int64)
        self.hs_ptr, self.hs_nodes = _csr(layout.hs_nodes, np.int64)
        _, self.hs_left = _csr(layout.hs_left, np.float64)
        assert self.child_ptr.size == num_internal + 1


def _csr(parts, dtype):
    ptr = np.zeros(len(parts) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(p) for p in parts])
    flat = np.concatenate([np.asarray(p, dtype=dtype) for p in parts]) if parts else np.zeros(0, dtype)
    return ptr, flat.astype(dtype)


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def sucm_epoch(us, items, lrs, P, Qz, bz, Qn, bn,
               comp_ptr, comp_rows, comp_chosen, seg_ptr, seg_start,
               parent_row, child_ptr, child_idx, hs_ptr, hs_nodes, hs_left,
               prior_weight, inv_s2, l2_user, l2_hs):
    """One pass of simultaneous-update ascent steps.  Returns (touched, sum of squared grads)."""
    K = P.shape[1]
    max_c = 1
    for i in range(comp_ptr.size - 1):
        max_c = max(max_c, comp_ptr[i + 1] - comp_ptr[i])
    max_h = 1
    for i in range(hs_ptr.size - 1):
        max_h = max(max_h, hs_ptr[i + 1] - hs_ptr[i])
    gQ = np.empty((max_c, K))
    gb = np.empty(max_c)
    gQh = np.empty((max_h, K))
    gbh = np.empty(max_h)
    gp = np.empty(K)
    y = np.empty(max_c)
    touched = 0
    sq = 0.0
    for t in range(us.size):
        u = us[t]
        i = items[t]
        lr = lrs[t]
        for k in range(K):
            gp[k] = 0.0
        c0 = comp_ptr[i]
        nc = comp_ptr[i + 1] - c0
        for a in range(nc):
            r = comp_rows[c0 + a]
            s = bz[r]
            for k in range(K):
                s += Qz[r, k] * P[u, k]
            y[a] = s
        s0 = seg_ptr[i]
        ns = seg_ptr[i + 1] - s0
        for g in range(ns):
            lo = seg_start[s0 + g] - c0
            hi = seg_start[s0 + g + 1] - c0 if g + 1 < ns else nc
            m = y[lo]
            for a in range(lo + 1, hi):
                m = max(m, y[a])
            tot = 0.0
            for a in range(lo, hi):
                tot += math.exp(y[a] - m)
            for a in range(lo, hi):
                gb[a] = comp_chosen[c0 + a] - math.exp(y[a] - m) / tot
        for a in range(nc):
            r = comp_rows[c0 + a]
            coef = gb[a]
            pr = parent_row[r]
            for k in range(K):
                gp[k] += coef * Qz[r, k]
                pull = Qz[r, k] - (Qz[pr, k] if pr >= 0 else 0.0)
                for cc in range(child_ptr[r], child_ptr[r + 1]):
                    pull += Qz[r, k] - Qz[child_idx[cc], k]
                gQ[a, k] = coef * P[u, k] - prior_weight * inv_s2 * pull
                sq += gQ[a, k] * gQ[a, k]
            sq += coef * coef
        h0 = hs_ptr[i]
        nh = hs_ptr[i + 1] - h0
        for a in range(nh):
            n = hs_nodes[h0 + a]
            s = bn[n]
            for k in range(K):
                s += Qn[n, k] * P[u, k]
            coef = hs_left[h0 + a] - _sigmoid(s)
            gbh[a] = coef
            for k in range(K):
                gp[k] += coef * Qn[n, k]
                gQh[a, k] = coef * P[u, k] - l2_hs * Qn[n, k]
                sq += gQh[a, k] * gQh[a, k]
            sq += coef * coef
        for k in range(K):
            gp[k] -= l2_user * P[u, k]
            sq += gp[k] * gp[k]
        for k in range(K):
            P[u, k] += lr * gp[k]
        for a in range(nc):
            r = comp_rows[c0 + a]
            bz[r] += lr * gb[a]
            for k in range(K):
                Qz[r, k] += lr * gQ[a, k]
        for a in range(nh):
            n = hs_nodes[h0 + a]
            bn[n] += lr * gbh[a]
            for k in range(K):
                Qn[n, k] += lr * gQh[a, k]
        touched += 1 + nc + nh
    return touched, sq


LLFM, PMF, BPR, CCF = 0, 1, 2, 3


@njit(cache=True)
def flat_epoch(kind, us, pos, negs, lrs, P, Q, b, lam_u, lam_i, lam_b):
    """SGD descent for the flat baselines.

    Row ``t`` touches app ``pos[t]`` and the non-negative entries of
    ``negs[t]``.  Every loss has gradient ``sum_k r_k q_k`` in ``p_u`` and
    ``r_k p_u`` in ``q_k``; only the residuals ``r_k`` differ by ``kind``.
    """
    K = P.shape[1]
    width = negs.shape[1] + 1
    apps = np.empty(width, dtype=np.int64)
    y = np.empty(width)
    r = np.empty(width)
    gp = np.empty(K)
    for t in range(us.size):
        u = us[t]
        lr = lrs[t]
        apps[0] = pos[t]
        m = 1
        if kind != LLFM:
            for c in range(negs.shape[1]):
                if negs[t, c] >= 0:
                    apps[m] = negs[t, c]
                    m += 1
                    if kind == BPR:
                        break
        for a in range(m):
            j = apps[a]
            s = b[j]
            for k in range(K):
                s += P[u, k] * Q[j, k]
            y[a] = s
        if kind == LLFM:
            r[0] = -_sigmoid(-y[0])
        elif kind == PMF:
            for a in range(m):
                r[a] = -2.0 * ((1.0 if a == 0 else 0.0) - y[a])
        elif kind == BPR:
            d = y[0] - y[1]
            r[0] = -_sigmoid(-d)
            r[1] = -r[0]
        else:
            mx = y[0]
            for a in range(1, m):
                mx = max(mx, y[a])
            tot = 0.0
            for a in range(m):
                tot += math.exp(y[a] - mx)
            for a in range(m):
                r[a] = math.exp(y[a] - mx) / tot - (1.0 if a == 0 else 0.0)
        for k in range(K):
            g = 2.0 * lam_u * P[u, k]
            for a in range(m):
                g += r[a] * Q[apps[a], k]
            gp[k] = g
        for a in range(m):
            j = apps[a]
            for k in range(K):
                Q[j, k] -= lr * (r[a] * P[u, k] + 2.0 * lam_i * Q[j, k])
            b[j] -= lr * (r[a] + 2.0 * lam_b * b[j])
        for k in range(K):
            P[u, k] -= lr * gp[k]
