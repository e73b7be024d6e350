"""numba kernels for routing decisions and the event loop.

Servers are organised in pools (one per routing target set). Each pool owns a
contiguous slice of ``perm``; its idle servers occupy the first
``idle_cnt[pool]`` slots, so picking a uniform idle server is O(1).
"""
from __future__ import annotations

import numpy as np
from numba import njit

RANDOM, JIQ, JFIQ, JFSQ, MINDRIFT, PBASED, ICRD = range(7)
REJECTION_TRIES = 32


@njit(cache=True)
def _pick(rng, c):
    k = int(rng.random() * c)
    return k if k < c else c - 1


@njit(cache=True)
def eff_rate(kind, table, row_key, col_key, dgroup, sclass, i, j):
    if kind == ICRD and sclass[j] != dgroup[i]:
        return 0.0
    return table[row_key[i], col_key[j]]


@njit(cache=True)
def build_pools(pool_of, n_pools, Z):
    N = pool_of.size
    sizes = np.zeros(n_pools + 1, dtype=np.int64)
    for j in range(N):
        p = pool_of[j]
        sizes[p if p >= 0 else n_pools] += 1
    pool_off = np.zeros(n_pools + 2, dtype=np.int64)
    for p in range(n_pools + 1):
        pool_off[p + 1] = pool_off[p] + sizes[p]
    perm = np.empty(N, dtype=np.int64)
    pos = np.empty(N, dtype=np.int64)
    idle_cnt = np.zeros(n_pools, dtype=np.int64)
    fill = pool_off[:-1].copy()
    # idle servers first inside each pool, both halves in index order
    for phase in range(2):
        for j in range(N):
            p = pool_of[j]
            q = p if p >= 0 else n_pools
            if (Z[j] == 0) == (phase == 0):
                perm[fill[q]] = j
                pos[j] = fill[q]
                fill[q] += 1
                if phase == 0 and p >= 0:
                    idle_cnt[p] += 1
    return perm, pos, pool_off, idle_cnt


@njit(cache=True)
def _swap(perm, pos, a, b):
    ja = perm[a]
    jb = perm[b]
    perm[a] = jb
    perm[b] = ja
    pos[jb] = a
    pos[ja] = b


@njit(cache=True)
def mark_busy(j, pool_of, perm, pos, pool_off, idle_cnt):
    p = pool_of[j]
    if p < 0:
        return
    last = pool_off[p] + idle_cnt[p] - 1
    _swap(perm, pos, pos[j], last)
    idle_cnt[p] -= 1


@njit(cache=True)
def mark_idle(j, pool_of, perm, pos, pool_off, idle_cnt):
    p = pool_of[j]
    if p < 0:
        return
    first = pool_off[p] + idle_cnt[p]
    _swap(perm, pos, pos[j], first)
    idle_cnt[p] += 1


@njit(cache=True)
def _sample_group(rng, pcum, h):
    u = rng.random()
    M = pcum.shape[1]
    for m in range(M):
        if u < pcum[h, m]:
            return m
    return M - 1


@njit(cache=True)
def route_one(kind, i, rng, table, row_key, col_key, dgroup, sclass, pcum,
              perm, pool_off, idle_cnt, Z, Q):
    """Destination server for a task from dispatcher i, or -1 if none exists."""
    N = Z.size
    if kind == RANDOM or kind == PBASED or kind == ICRD:
        p = dgroup[i] if kind == ICRD else _sample_group(rng, pcum, dgroup[i])
        lo = pool_off[p]
        size = pool_off[p + 1] - lo
        if size == 0:
            return -1
        if kind != RANDOM and idle_cnt[p] > 0:
            return perm[lo + _pick(rng, idle_cnt[p])]
        return perm[lo + _pick(rng, size)]

    c = idle_cnt[0]
    if kind == JIQ:
        if c > 0:
            for _ in range(REJECTION_TRIES):
                j = perm[_pick(rng, c)]
                if table[row_key[i], col_key[j]] > 0:
                    return j
            best = -1
            ties = 0
            for a in range(c):
                j = perm[a]
                if table[row_key[i], col_key[j]] > 0:
                    ties += 1
                    if _pick(rng, ties) == 0:
                        best = j
            if best >= 0:
                return best
        best = -1
        ties = 0
        for j in range(N):
            if table[row_key[i], col_key[j]] > 0:
                ties += 1
                if _pick(rng, ties) == 0:
                    best = j
        return best

    if kind == JFIQ:
        best = -1
        best_r = 0.0
        ties = 0
        for a in range(c):
            j = perm[a]
            r = table[row_key[i], col_key[j]]
            if r <= 0:
                continue
            if r > best_r:
                best, best_r, ties = j, r, 1
            elif r == best_r:
                ties += 1
                if _pick(rng, ties) == 0:
                    best = j
        if best >= 0:
            return best
        best_z = 0
        for j in range(N):
            r = table[row_key[i], col_key[j]]
            if r <= 0:
                continue
            if best < 0 or r > best_r or (r == best_r and Z[j] < best_z):
                best, best_r, best_z, ties = j, r, Z[j], 1
            elif r == best_r and Z[j] == best_z:
                ties += 1
                if _pick(rng, ties) == 0:
                    best = j
        return best

    if kind == JFSQ:
        best = -1
        best_r = 0.0
        best_z = 0
        ties = 0
        for j in range(N):
            r = table[row_key[i], col_key[j]]
            if r <= 0:
                continue
            if best < 0 or Z[j] < best_z or (Z[j] == best_z and r > best_r):
                best, best_r, best_z, ties = j, r, Z[j], 1
            elif Z[j] == best_z and r == best_r:
                ties += 1
                if _pick(rng, ties) == 0:
                    best = j
        return best

    # MINDRIFT
    best = -1
    best_v = 0.0
    ties = 0
    for j in range(N):
        r = table[row_key[i], col_key[j]]
        if r <= 0:
            continue
        v = Q[j] / r
        if best < 0 or v < best_v:
            best, best_v, ties = j, v, 1
        elif v == best_v:
            ties += 1
            if _pick(rng, ties) == 0:
                best = j
    return best


@njit(cache=True)
def _tree_set(tree, size, j, r):
    k = size + j
    tree[k] = r
    k //= 2
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k //= 2


@njit(cache=True)
def _tree_find(tree, size, u):
    k = 1
    while k < size:
        left = tree[2 * k]
        if u < left or tree[2 * k + 1] <= 0.0:
            k = 2 * k
        else:
            u -= left
            k = 2 * k + 1
    return k - size


@njit(cache=True)
def _bump(val, integ, last, idx, delta, t):
    integ[idx] += val[idx] * (t - last[idx])
    last[idx] = t
    val[idx] += delta


@njit(cache=True)
def run(kind, rng, T, lam, table, row_key, col_key, dgroup, sclass, pcum,
        pool_of, n_pools, bucket_tab, K, xgroup, M, block_of, B, Lcap, thr,
        init_mode, sample_times, debug, qcap):
    W = lam.size
    N = pool_of.size
    S = sample_times.size
    Lw = Lcap + 2

    lam_cum = np.cumsum(lam)
    Lam = lam_cum[-1] if W > 0 else 0.0

    Z = np.zeros(N, dtype=np.int64)
    Q = np.zeros(N)
    head = np.zeros(N, dtype=np.int64)
    qbuf = np.zeros((N, qcap), dtype=np.int64)

    perm, pos, pool_off, idle_cnt = build_pools(pool_of, n_pools, Z)

    size = 1
    while size < N:
        size *= 2
    tree = np.zeros(2 * size)

    # lazily integrated aggregates, flattened
    hval = np.zeros(B * Lw)
    hint = np.zeros(B * Lw)
    hlast = np.zeros(B * Lw)
    xval = np.zeros(M * K)
    xint = np.zeros(M * K)
    xlast = np.zeros(M * K)
    tval = np.zeros(1)
    tint = np.zeros(1)
    tlast = np.zeros(1)
    for j in range(N):
        hval[block_of[j] * Lw] += 1.0

    # preload: one task of a uniformly chosen compatible type
    preloaded = 0
    if init_mode > 0:
        for j in range(N):
            if init_mode == 2 and j % 2 == 1:
                continue
            pick = -1
            cnt = 0
            for i in range(W):
                if eff_rate(kind, table, row_key, col_key, dgroup, sclass, i, j) > 0:
                    cnt += 1
                    if _pick(rng, cnt) == 0:
                        pick = i
            if pick < 0:
                continue
            r = table[row_key[pick], col_key[j]]
            qbuf[j, 0] = pick
            Z[j] = 1
            Q[j] = 1.0 / r
            mark_busy(j, pool_of, perm, pos, pool_off, idle_cnt)
            _tree_set(tree, size, j, r)
            b = block_of[j] * Lw
            hval[b] -= 1.0
            hval[b + 1] += 1.0
            xval[xgroup[j] * K + bucket_tab[row_key[pick], col_key[j]]] += 1.0
            tval[0] += 1.0
            preloaded += 1

    n_arr = 0
    n_dep = 0
    n_busy = 0
    n_bad = 0
    n_bucket = np.zeros(K, dtype=np.int64)

    s_h = np.zeros((S, B * Lw))
    s_hi = np.zeros((S, B * Lw))
    s_x = np.zeros((S, M * K))
    s_xi = np.zeros((S, M * K))
    s_t = np.zeros(S)
    s_ti = np.zeros(S)
    s_c = np.zeros((S, 5), dtype=np.int64)
    s_b = np.zeros((S, K), dtype=np.int64)

    t = 0.0
    k = 0
    n_events = 0
    while True:
        total = Lam + tree[1]
        if total > 0:
            t_next = t + rng.standard_exponential() / total
        else:
            t_next = np.inf
        while k < S and sample_times[k] < t_next:
            s = sample_times[k]
            for a in range(B * Lw):
                s_h[k, a] = hval[a]
                s_hi[k, a] = hint[a] + hval[a] * (s - hlast[a])
            for a in range(M * K):
                s_x[k, a] = xval[a]
                s_xi[k, a] = xint[a] + xval[a] * (s - xlast[a])
            s_t[k] = tval[0]
            s_ti[k] = tint[0] + tval[0] * (s - tlast[0])
            s_c[k, 0] = n_arr
            s_c[k, 1] = n_dep
            s_c[k, 2] = n_busy
            s_c[k, 3] = n_bad
            s_c[k, 4] = int(tval[0])
            s_b[k] = n_bucket
            k += 1
        if t_next > T:
            break
        t = t_next
        n_events += 1

        u = rng.random() * total
        if u < Lam:
            i = np.searchsorted(lam_cum, u, side="right")
            if i >= W:
                i = W - 1
            j = route_one(kind, i, rng, table, row_key, col_key, dgroup, sclass, pcum,
                          perm, pool_off, idle_cnt, Z, Q)
            if j < 0:
                raise RuntimeError("no compatible server for an arriving task")
            r = eff_rate(kind, table, row_key, col_key, dgroup, sclass, i, j)
            if debug and r <= 0.0:
                raise RuntimeError("task routed to a server with zero effective rate")
            n_arr += 1
            bk = bucket_tab[row_key[i], col_key[j]]
            n_bucket[bk] += 1
            if r < thr:
                n_bad += 1
            z = Z[j]
            if z >= 1:
                n_busy += 1
            if z == qbuf.shape[1]:
                cap = qbuf.shape[1]
                grown = np.zeros((N, 2 * cap), dtype=np.int64)
                for jj in range(N):
                    for a in range(Z[jj]):
                        grown[jj, a] = qbuf[jj, (head[jj] + a) % cap]
                    head[jj] = 0
                qbuf = grown
            cap = qbuf.shape[1]
            qbuf[j, (head[j] + z) % cap] = i
            Z[j] = z + 1
            Q[j] += 1.0 / r
            b = block_of[j] * Lw
            zo = z if z <= Lcap else Lcap + 1
            zn = z + 1 if z + 1 <= Lcap else Lcap + 1
            if zo != zn:
                _bump(hval, hint, hlast, b + zo, -1.0, t)
                _bump(hval, hint, hlast, b + zn, 1.0, t)
            _bump(tval, tint, tlast, 0, 1.0, t)
            if z == 0:
                mark_busy(j, pool_of, perm, pos, pool_off, idle_cnt)
                _tree_set(tree, size, j, r)
                _bump(xval, xint, xlast, xgroup[j] * K + bk, 1.0, t)
        else:
            j = _tree_find(tree, size, u - Lam)
            cap = qbuf.shape[1]
            i = qbuf[j, head[j]]
            r = table[row_key[i], col_key[j]]
            head[j] = (head[j] + 1) % cap
            z = Z[j]
            Z[j] = z - 1
            n_dep += 1
            b = block_of[j] * Lw
            zo = z if z <= Lcap else Lcap + 1
            zn = z - 1 if z - 1 <= Lcap else Lcap + 1
            if zo != zn:
                _bump(hval, hint, hlast, b + zo, -1.0, t)
                _bump(hval, hint, hlast, b + zn, 1.0, t)
            _bump(tval, tint, tlast, 0, -1.0, t)
            _bump(xval, xint, xlast, xgroup[j] * K + bucket_tab[row_key[i], col_key[j]], -1.0, t)
            if z == 1:
                Q[j] = 0.0
                mark_idle(j, pool_of, perm, pos, pool_off, idle_cnt)
                _tree_set(tree, size, j, 0.0)
            else:
                Q[j] -= 1.0 / r
                i2 = qbuf[j, head[j]]
                r2 = table[row_key[i2], col_key[j]]
                _tree_set(tree, size, j, r2)
                _bump(xval, xint, xlast, xgroup[j] * K + bucket_tab[row_key[i2], col_key[j]], 1.0, t)

        if debug:
            tot = 0
            for jj in range(N):
                tot += Z[jj]
            if preloaded + n_arr != n_dep + tot:
                raise RuntimeError("task conservation violated")
            for p in range(n_pools):
                for a in range(pool_off[p], pool_off[p + 1]):
                    idle = a < pool_off[p] + idle_cnt[p]
                    if idle != (Z[perm[a]] == 0):
                        raise RuntimeError("idle set out of sync with queue lengths")

    # unwind ring buffers into plain FIFO order
    cap = qbuf.shape[1]
    queues = np.zeros((N, cap), dtype=np.int64)
    for j in range(N):
        for a in range(Z[j]):
            queues[j, a] = qbuf[j, (head[j] + a) % cap]
    return (s_h, s_hi, s_x, s_xi, s_t, s_ti, s_c, s_b, preloaded, n_events, Z, Q, queues)
