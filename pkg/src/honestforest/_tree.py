"""Compiled tree-growing and routing kernels.

Trees are stored as flat arrays: ``feature`` (-1 marks a leaf), ``threshold``
(ordered rule ``x <= threshold`` goes left), ``catmask`` (unordered rule: the
category bit set goes left), ``left`` and ``right`` child ids.

Three split objectives share one grower:

* ``CAUSAL``: multi-arm effect heterogeneity on a centered outcome, every
  child must keep ``min_leaf`` observations in every arm;
* ``REGRESSION``: squared-error reduction on ``target``;
* ``CLASSIFICATION``: Gini reduction on the ``groups`` labels.
"""
import numpy as np
from numba import njit, prange

CAUSAL, REGRESSION, CLASSIFICATION = 0, 1, 2
LEAF = -1
MAX_CATEGORIES = 64


@njit(cache=True)
def _splitmix(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randbelow(state, k):
    u = (_splitmix(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    r = int(u * k)
    return r if r < k else k - 1


@njit(cache=True)
def causal_score(cl, sl, ql, cr, sr, qr, lam):
    """Heterogeneity gain minus variance and correlated-error penalties.

    gain    = sum over arm pairs (m, l) of n_L n_R (theta_L - theta_R)^2
    penalty = sum over children and arms of ((K-1) + lam (K-1)^2) Var(mean)
    """
    k = cl.shape[0]
    nl = cl.sum()
    nr = cr.sum()
    ml = sl / cl
    mr = sr / cr
    gain = 0.0
    for a in range(k):
        for b in range(a + 1, k):
            diff = (ml[a] - ml[b]) - (mr[a] - mr[b])
            gain += nl * nr * diff * diff
    return gain - _causal_penalty(cl, sl, ql, lam) - _causal_penalty(cr, sr, qr, lam)


@njit(cache=True)
def _causal_penalty(c, s, q, lam):
    k = c.shape[0]
    w = (k - 1) + lam * (k - 1) * (k - 1)
    pen = 0.0
    for a in range(k):
        if c[a] > 1:
            var = (q[a] - s[a] * s[a] / c[a]) / (c[a] - 1.0)
            if var < 0.0:
                var = 0.0
            pen += w * var / c[a]
    return pen


@njit(cache=True)
def _score(mode, cl, sl, ql, cr, sr, qr, lam):
    if mode == CAUSAL:
        return causal_score(cl, sl, ql, cr, sr, qr, lam)
    nl = cl.sum()
    nr = cr.sum()
    if mode == REGRESSION:
        return sl[0] * sl[0] / nl + sr[0] * sr[0] / nr
    out = 0.0
    for g in range(cl.shape[0]):
        out += cl[g] * cl[g] / nl + cr[g] * cr[g] / nr
    return out


@njit(cache=True)
def _parent_score(mode, c, s, q, lam):
    if mode == CAUSAL:
        return -_causal_penalty(c, s, q, lam)
    n = c.sum()
    if mode == REGRESSION:
        return s[0] * s[0] / n
    out = 0.0
    for g in range(c.shape[0]):
        out += c[g] * c[g] / n
    return out


@njit(cache=True)
def _feasible(mode, cl, cr, min_leaf):
    if mode == CAUSAL:
        for g in range(cl.shape[0]):
            if cl[g] < min_leaf or cr[g] < min_leaf:
                return False
        return True
    return cl.sum() >= min_leaf and cr.sum() >= min_leaf


@njit(cache=True, nogil=True)
def grow_tree(X, unordered, target, groups, n_groups, rows, mode, min_leaf, mtry, lam,
              seed, max_depth):
    """Grow one tree on ``rows`` of ``X``; returns the node arrays and node count."""
    n_rows = rows.shape[0]
    p = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, LEAF, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    catmask = np.zeros(cap, dtype=np.uint64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)

    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    idx = rows.copy()
    perm = np.arange(p)
    chosen = np.empty(mtry, dtype=np.int64)
    keys = np.empty(n_rows, dtype=np.float64)
    cat_key = np.empty(MAX_CATEGORIES, dtype=np.float64)
    cat_cnt = np.empty(MAX_CATEGORIES, dtype=np.float64)
    cat_rank = np.empty(MAX_CATEGORIES, dtype=np.float64)
    cat_order = np.empty(MAX_CATEGORIES, dtype=np.int64)

    c_all = np.zeros(n_groups)
    s_all = np.zeros(n_groups)
    q_all = np.zeros(n_groups)
    cl = np.zeros(n_groups)
    sl = np.zeros(n_groups)
    ql = np.zeros(n_groups)
    cr = np.zeros(n_groups)
    sr = np.zeros(n_groups)
    qr = np.zeros(n_groups)

    stack = np.empty((cap, 4), dtype=np.int64)  # start, end, node, depth
    stack[0, 0] = 0
    stack[0, 1] = n_rows
    stack[0, 2] = 0
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        node = stack[top, 2]
        depth = stack[top, 3]
        m = end - start
        if max_depth >= 0 and depth >= max_depth:
            continue
        c_all[:] = 0.0
        s_all[:] = 0.0
        q_all[:] = 0.0
        for t in range(start, end):
            i = idx[t]
            g = groups[i]
            c_all[g] += 1.0
            s_all[g] += target[i]
            q_all[g] += target[i] * target[i]
        if mode == CAUSAL:
            possible = True
            for g in range(n_groups):
                if c_all[g] < 2 * min_leaf:
                    possible = False
            if not possible:
                continue
        elif m < 2 * min_leaf:
            continue
        parent = _parent_score(mode, c_all, s_all, q_all, lam)

        # sample mtry distinct features, then scan them in index order
        for j in range(mtry):
            r = j + _randbelow(state, p - j)
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
            chosen[j] = perm[j]
        chosen.sort()

        best = -np.inf
        best_f = -1
        best_thr = 0.0
        best_mask = np.uint64(0)
        for jj in range(mtry):
            f = chosen[jj]
            is_cat = unordered[f]
            if is_cat:
                cat_key[:] = 0.0
                cat_cnt[:] = 0.0
                for t in range(start, end):
                    i = idx[t]
                    c = int(X[i, f])
                    cat_cnt[c] += 1.0
                    if mode == CLASSIFICATION:
                        cat_key[c] += groups[i]
                    else:
                        cat_key[c] += target[i]
                n_present = 0
                for c in range(MAX_CATEGORIES):
                    if cat_cnt[c] > 0:
                        cat_key[c] /= cat_cnt[c]
                        cat_order[n_present] = c
                        n_present += 1
                # rank present categories by mean key, ties by category code
                for a in range(1, n_present):
                    v = cat_order[a]
                    b = a - 1
                    while b >= 0 and (cat_key[cat_order[b]] > cat_key[v] or
                                      (cat_key[cat_order[b]] == cat_key[v] and cat_order[b] > v)):
                        cat_order[b + 1] = cat_order[b]
                        b -= 1
                    cat_order[b + 1] = v
                for a in range(n_present):
                    cat_rank[cat_order[a]] = a
                for t in range(start, end):
                    keys[t - start] = cat_rank[int(X[idx[t], f])]
            else:
                for t in range(start, end):
                    keys[t - start] = X[idx[t], f]
            order = np.argsort(keys[:m], kind="mergesort")
            if keys[order[0]] == keys[order[m - 1]]:
                continue
            cl[:] = 0.0
            sl[:] = 0.0
            ql[:] = 0.0
            for k in range(m - 1):
                i = idx[start + order[k]]
                g = groups[i]
                v = target[i]
                cl[g] += 1.0
                sl[g] += v
                ql[g] += v * v
                lo = keys[order[k]]
                hi = keys[order[k + 1]]
                if lo == hi:
                    continue
                for g2 in range(n_groups):
                    cr[g2] = c_all[g2] - cl[g2]
                    sr[g2] = s_all[g2] - sl[g2]
                    qr[g2] = q_all[g2] - ql[g2]
                if not _feasible(mode, cl, cr, min_leaf):
                    continue
                sc = _score(mode, cl, sl, ql, cr, sr, qr, lam)
                if sc > best:
                    best = sc
                    best_f = f
                    if is_cat:
                        mask = np.uint64(0)
                        for a in range(int(lo) + 1):
                            mask |= np.uint64(1) << np.uint64(cat_order[a])
                        best_mask = mask
                        best_thr = 0.0
                    else:
                        best_thr = 0.5 * (lo + hi)
                        if best_thr >= hi:
                            best_thr = lo
        if best_f < 0 or not best > parent + 1e-12 * abs(parent):
            continue

        # partition idx[start:end] in place, stable within each side
        n_left = 0
        for t in range(start, end):
            i = idx[t]
            if unordered[best_f]:
                goes_left = ((best_mask >> np.uint64(int(X[i, best_f]))) & np.uint64(1)) != 0
            else:
                goes_left = X[i, best_f] <= best_thr
            if goes_left:
                n_left += 1
        buf = np.empty(m, dtype=idx.dtype)
        a = 0
        b = n_left
        for t in range(start, end):
            i = idx[t]
            if unordered[best_f]:
                goes_left = ((best_mask >> np.uint64(int(X[i, best_f]))) & np.uint64(1)) != 0
            else:
                goes_left = X[i, best_f] <= best_thr
            if goes_left:
                buf[a] = i
                a += 1
            else:
                buf[b] = i
                b += 1
        for t in range(m):
            idx[start + t] = buf[t]

        feature[node] = best_f
        threshold[node] = best_thr
        catmask[node] = best_mask
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = start + n_left
        stack[top, 1] = end
        stack[top, 2] = n_nodes + 1
        stack[top, 3] = depth + 1
        stack[top + 1, 0] = start
        stack[top + 1, 1] = start + n_left
        stack[top + 1, 2] = n_nodes
        stack[top + 1, 3] = depth + 1
        top += 2
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), catmask[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy())


@njit(cache=True, nogil=True)
def apply_tree(X, unordered, feature, threshold, catmask, left, right):
    """Leaf node id of every row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            f = feature[node]
            if unordered[f]:
                go = ((catmask[node] >> np.uint64(int(X[i, f]))) & np.uint64(1)) != 0
            else:
                go = X[i, f] <= threshold[node]
            node = left[node] if go else right[node]
        out[i] = node
    return out


@njit(cache=True)
def leaf_index(leaves, arms, n_nodes, n_arms):
    """CSR-style member lists per (leaf, arm) for one tree.

    Returns ``order`` (row indices sorted by leaf then arm, stable),
    ``start`` and ``count`` arrays of shape (n_nodes, n_arms).
    """
    n = leaves.shape[0]
    count = np.zeros((n_nodes, n_arms), dtype=np.int32)
    for i in range(n):
        count[leaves[i], arms[i]] += 1
    start = np.zeros((n_nodes, n_arms), dtype=np.int32)
    acc = 0
    for node in range(n_nodes):
        for a in range(n_arms):
            start[node, a] = acc
            acc += count[node, a]
    fill = start.copy()
    order = np.empty(n, dtype=np.int32)
    for i in range(n):
        pos = fill[leaves[i], arms[i]]
        order[pos] = i
        fill[leaves[i], arms[i]] = pos + 1
    return order, start, count


@njit(cache=True, parallel=True)
def weight_rows(q_leaf, order, start, count, n_honest, row0, row1):
    """Dense forest weights for query rows ``row0:row1``.

    A tree contributes to a query row only if the row's leaf holds honest
    observations of every arm; within the leaf each arm's members share
    ``1 / count`` and the row is averaged over contributing trees, so every
    arm's weights sum to one.
    """
    n_trees = q_leaf.shape[0]
    n_arms = count.shape[2]
    out = np.zeros((row1 - row0, n_honest))
    used = np.zeros(row1 - row0, dtype=np.int64)
    for r in prange(row1 - row0):
        q = row0 + r
        u = 0
        for s in range(n_trees):
            leaf = q_leaf[s, q]
            ok = True
            for a in range(n_arms):
                if count[s, leaf, a] == 0:
                    ok = False
            if not ok:
                continue
            u += 1
            for a in range(n_arms):
                c = count[s, leaf, a]
                st = start[s, leaf, a]
                inv = 1.0 / c
                for t in range(st, st + c):
                    out[r, order[s, t]] += inv
        used[r] = u
        if u > 0:
            for j in range(n_honest):
                out[r, j] /= u
    return out, used


@njit(cache=True, nogil=True)
def leaf_means(leaves, values, n_nodes):
    """Per-leaf column means of ``values`` (n, q); empty leaves get NaN."""
    q = values.shape[1]
    sums = np.zeros((n_nodes, q))
    cnt = np.zeros(n_nodes)
    for i in range(leaves.shape[0]):
        cnt[leaves[i]] += 1.0
        for j in range(q):
            sums[leaves[i], j] += values[i, j]
    for node in range(n_nodes):
        for j in range(q):
            sums[node, j] = sums[node, j] / cnt[node] if cnt[node] > 0 else np.nan
    return sums
