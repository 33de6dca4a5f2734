"""Compiled inner loop of the collapsed Gibbs sweep over user assignments.

State layout: clusters live in physical slots 0..U-1; a slot holds the pooled
transition counts of its members and, per mixture component m, the cached
log-mass

    v[slot, m] = log w_m + log_xi(A_m + pool) - log_xi(A_m),

so that logsumexp(v[slot]) is the log marginal likelihood of the slot's data
under the base.  Adding or removing one user's counts shifts v by a sparse
lgamma delta over that user's nonzero cells, looked up in a precomputed
lgamma table (all counts are integers).  Slot ids come from a counter and are
never reused; the candidate order in each draw is creation order, new cluster
last, one uniform consumed per user step.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _logsumexp_row(v, m):
    mx = v[0]
    for i in range(1, m):
        if v[i] > mx:
            mx = v[i]
    s = 0.0
    for i in range(m):
        s += np.exp(v[i] - mx)
    return mx + np.log(s)


@njit(cache=True)
def _delta_add(table, L, A, Arow, m, pool, poolrow, slot,
               supp_i, supp_j, supp_c, s0, s1, rsupp_i, rsupp_c, r0, r1):
    """log_xi(A_m + pool_slot + n_u) - log_xi(A_m + pool_slot), sparse in u."""
    d = 0.0
    for e in range(s0, s1):
        a = A[m, supp_i[e], supp_j[e]] + pool[slot, supp_i[e], supp_j[e]]
        d += table[a + supp_c[e] + 1] - table[a + 1]
    for e in range(r0, r1):
        a = Arow[m, rsupp_i[e]] + poolrow[slot, rsupp_i[e]]
        d -= table[a + rsupp_c[e] + L] - table[a + L]
    return d


@njit(cache=True)
def run_chain(L, supp_i, supp_j, supp_c, supp_off, rsupp_i, rsupp_c, rsupp_off,
              total_pool, A, Arow, logw, vnew, lnew,
              log_alpha, sweeps, uniforms, table):
    """Run one chain of ``sweeps`` full Gibbs sweeps; return per-user cluster ids."""
    U = supp_off.shape[0] - 1
    M = logw.shape[0]

    pool = np.zeros((U, L, L), dtype=np.int64)
    poolrow = np.zeros((U, L), dtype=np.int64)
    size = np.zeros(U, dtype=np.int64)
    slot_id = np.full(U, -1, dtype=np.int64)
    active = np.zeros(U, dtype=np.int64)
    v = np.zeros((U, M), dtype=np.float64)
    S = np.zeros(U, dtype=np.float64)
    cur = np.zeros(U, dtype=np.int64)
    buf = np.zeros(M, dtype=np.float64)
    scores = np.zeros(U + 1, dtype=np.float64)

    # all users start in slot 0
    for i in range(L):
        for j in range(L):
            pool[0, i, j] = total_pool[i, j]
            poolrow[0, i] += total_pool[i, j]
    size[0] = U
    slot_id[0] = 0
    active[0] = 0
    n_active = 1
    next_id = 1
    for m in range(M):
        lx = 0.0
        for i in range(L):
            for j in range(L):
                lx += table[A[m, i, j] + pool[0, i, j] + 1] - table[A[m, i, j] + 1]
            lx -= table[Arow[m, i] + poolrow[0, i] + L] - table[Arow[m, i] + L]
        v[0, m] = logw[m] + lx
    S[0] = _logsumexp_row(v[0], M)

    step = 0
    for _ in range(sweeps):
        for u in range(U):
            r = uniforms[step]
            step += 1
            s0, s1 = supp_off[u], supp_off[u + 1]
            r0, r1 = rsupp_off[u], rsupp_off[u + 1]
            slot = cur[u]

            # detach u from its cluster
            size[slot] -= 1
            if size[slot] == 0:
                slot_id[slot] = -1
                k = 0
                while active[k] != slot:
                    k += 1
                for kk in range(k, n_active - 1):
                    active[kk] = active[kk + 1]
                n_active -= 1
                for e in range(s0, s1):
                    pool[slot, supp_i[e], supp_j[e]] = 0
                for e in range(r0, r1):
                    poolrow[slot, rsupp_i[e]] = 0
            else:
                for e in range(s0, s1):
                    pool[slot, supp_i[e], supp_j[e]] -= supp_c[e]
                for e in range(r0, r1):
                    poolrow[slot, rsupp_i[e]] -= rsupp_c[e]
                for m in range(M):
                    v[slot, m] -= _delta_add(table, L, A, Arow, m, pool, poolrow, slot,
                                             supp_i, supp_j, supp_c, s0, s1,
                                             rsupp_i, rsupp_c, r0, r1)
                S[slot] = _logsumexp_row(v[slot], M)

            # score existing clusters (creation order) and a fresh one (last)
            for k in range(n_active):
                c = active[k]
                for m in range(M):
                    buf[m] = v[c, m] + _delta_add(table, L, A, Arow, m, pool, poolrow, c,
                                                  supp_i, supp_j, supp_c, s0, s1,
                                                  rsupp_i, rsupp_c, r0, r1)
                scores[k] = np.log(float(size[c])) + _logsumexp_row(buf, M) - S[c]
            scores[n_active] = log_alpha + lnew[u]

            mx = scores[0]
            for k in range(1, n_active + 1):
                if scores[k] > mx:
                    mx = scores[k]
            tot = 0.0
            for k in range(n_active + 1):
                tot += np.exp(scores[k] - mx)
            target = r * tot
            pick = n_active
            acc = 0.0
            for k in range(n_active + 1):
                acc += np.exp(scores[k] - mx)
                if target < acc:
                    pick = k
                    break

            if pick < n_active:
                c = active[pick]
                for m in range(M):
                    v[c, m] += _delta_add(table, L, A, Arow, m, pool, poolrow, c,
                                          supp_i, supp_j, supp_c, s0, s1,
                                          rsupp_i, rsupp_c, r0, r1)
                for e in range(s0, s1):
                    pool[c, supp_i[e], supp_j[e]] += supp_c[e]
                for e in range(r0, r1):
                    poolrow[c, rsupp_i[e]] += rsupp_c[e]
                size[c] += 1
                S[c] = _logsumexp_row(v[c], M)
                cur[u] = c
            else:
                f = 0
                while slot_id[f] >= 0:
                    f += 1
                slot_id[f] = next_id
                next_id += 1
                active[n_active] = f
                n_active += 1
                size[f] = 1
                for e in range(s0, s1):
                    pool[f, supp_i[e], supp_j[e]] = supp_c[e]
                for e in range(r0, r1):
                    poolrow[f, rsupp_i[e]] = rsupp_c[e]
                for m in range(M):
                    v[f, m] = vnew[u, m]
                S[f] = lnew[u]
                cur[u] = f

    labels = np.empty(U, dtype=np.int64)
    for u in range(U):
        labels[u] = slot_id[cur[u]]
    return labels
