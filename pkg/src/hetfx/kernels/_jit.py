"""Numba-compiled tree kernels.

Every function here has a twin in ``_numpy`` that produces bit-identical
output; keep the floating-point operation order in sync when editing either.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix_next(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _draw_features(state, perm, d, mtry):
    for j in range(d):
        perm[j] = j
    for j in range(mtry):
        r = j + np.int64(_splitmix_next(state) % np.uint64(d - j))
        tmp = perm[j]
        perm[j] = perm[r]
        perm[r] = tmp
    return np.sort(perm[:mtry])


@njit(cache=True, nogil=True)
def grow_tree(x, rows, causal, target, w_tilde, w_raw, min_leaf, alpha, max_depth, mtry, seed):
    """Grow one tree depth-first on ``rows``.

    Regression mode splits on ``target`` centered within each node; causal
    mode splits on the gradient pseudo-outcomes built from ``target`` (the
    centered outcome) and ``w_tilde``. Children always carry larger node ids
    than their parent.
    """
    n = rows.shape[0]
    d = x.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)

    work = rows.copy()
    buf = np.empty(n, dtype=np.int64)
    tgt = np.empty(n, dtype=np.float64)
    vals = np.empty(n, dtype=np.float64)
    perm = np.empty(d, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    state[0] = seed

    stop[0] = n
    n_nodes = 1
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = stop[node]
        m = e - s
        if max_depth >= 0 and depth[node] >= max_depth:
            continue
        if m < 2 * min_leaf:
            continue

        if causal:
            sw = 0.0
            sy = 0.0
            for j in range(m):
                sw += w_tilde[work[s + j]]
                sy += target[work[s + j]]
            wbar = sw / m
            ybar = sy / m
            sww = 0.0
            swy = 0.0
            for j in range(m):
                dw = w_tilde[work[s + j]] - wbar
                dy = target[work[s + j]] - ybar
                sww += dw * dw
                swy += dw * dy
            if not sww > 0.0:
                continue
            tau = swy / sww
            var = sww / m
            for j in range(m):
                dw = w_tilde[work[s + j]] - wbar
                dy = target[work[s + j]] - ybar
                tgt[j] = dw * (dy - tau * dw) / var
            total_treated = 0
            for j in range(m):
                total_treated += w_raw[work[s + j]]
        else:
            sy = 0.0
            for j in range(m):
                sy += target[work[s + j]]
            mean = sy / m
            for j in range(m):
                tgt[j] = target[work[s + j]] - mean
            total_treated = 0

        min_child = max(min_leaf, np.int64(np.ceil(alpha * m)))
        feats = _draw_features(state, perm, d, mtry)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for fi in range(feats.shape[0]):
            f = feats[fi]
            for j in range(m):
                vals[j] = x[work[s + j], f]
            order = np.argsort(vals[:m], kind="mergesort")
            total = 0.0
            for j in range(m):
                total += tgt[order[j]]
            base = total * total / m
            cum = 0.0
            treated = 0
            for k in range(1, m):
                cum += tgt[order[k - 1]]
                if causal:
                    treated += w_raw[work[s + order[k - 1]]]
                if k < min_child or m - k < min_child:
                    continue
                lo = vals[order[k - 1]]
                hi = vals[order[k]]
                if not lo < hi:
                    continue
                if causal:
                    if treated < 1 or k - treated < 1:
                        continue
                    rt = total_treated - treated
                    if rt < 1 or (m - k) - rt < 1:
                        continue
                rest = total - cum
                gain = cum * cum / k + rest * rest / (m - k) - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (lo + hi)
                    if thr >= hi:
                        thr = lo
                    best_thr = thr
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for j in range(m):
            r = work[s + j]
            if x[r, best_f] <= best_thr:
                work[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for j in range(nr):
            work[s + nl + j] = buf[j]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        stop[lc] = s + nl
        start[rc] = s + nl
        stop[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[sp] = rc
        sp += 1
        stack[sp] = lc
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def route(x, rows, feature, threshold, left, right):
    out = np.empty(rows.shape[0], dtype=np.int64)
    for i in range(rows.shape[0]):
        r = rows[i]
        node = 0
        while left[node] >= 0:
            if x[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def prune_tree(left, right, leaf_of, w_raw_rows, min_leaf):
    """Collapse subtrees until every leaf holds ``min_leaf`` rows with both arms.

    ``leaf_of`` gives the node each estimation row lands in. Returns whether
    the root itself is valid, and the post-pruning leaf mask.
    """
    n_nodes = left.shape[0]
    cnt = np.zeros(n_nodes, dtype=np.int64)
    trt = np.zeros(n_nodes, dtype=np.int64)
    for i in range(leaf_of.shape[0]):
        cnt[leaf_of[i]] += 1
        trt[leaf_of[i]] += w_raw_rows[i]
    for node in range(n_nodes - 1, -1, -1):
        if left[node] >= 0:
            cnt[node] = cnt[left[node]] + cnt[right[node]]
            trt[node] = trt[left[node]] + trt[right[node]]
    is_leaf = left < 0
    for node in range(n_nodes - 1, -1, -1):
        if is_leaf[node]:
            continue
        bad = False
        for c in (left[node], right[node]):
            if is_leaf[c]:
                if cnt[c] < min_leaf or trt[c] < 1 or cnt[c] - trt[c] < 1:
                    bad = True
        if bad:
            is_leaf[node] = True
    root_ok = cnt[0] >= min_leaf and trt[0] >= 1 and cnt[0] - trt[0] >= 1
    return root_ok, is_leaf


@njit(cache=True, nogil=True)
def compact_tree(feature, threshold, left, right, is_leaf):
    """Renumber surviving nodes in preorder; returns new arrays and old->new map.

    Dropped nodes map to their nearest surviving ancestor, which is a leaf.
    """
    n_nodes = left.shape[0]
    new_id = np.full(n_nodes, -1, dtype=np.int64)
    order = np.empty(n_nodes, dtype=np.int64)
    stack = np.empty(n_nodes + 1, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    k = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        new_id[node] = k
        order[k] = node
        k += 1
        if not is_leaf[node]:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    nf = np.full(k, -1, dtype=np.int64)
    nt = np.zeros(k, dtype=np.float64)
    nl = np.full(k, -1, dtype=np.int64)
    nr = np.full(k, -1, dtype=np.int64)
    for j in range(k):
        node = order[j]
        if not is_leaf[node]:
            nf[j] = feature[node]
            nt[j] = threshold[node]
            nl[j] = new_id[left[node]]
            nr[j] = new_id[right[node]]
    # parents precede children, so one forward pass resolves dropped nodes
    mapping = new_id.copy()
    for node in range(n_nodes):
        if left[node] >= 0:
            if new_id[left[node]] < 0:
                mapping[left[node]] = mapping[node]
                mapping[right[node]] = mapping[node]
    return nf, nt, nl, nr, mapping


@njit(cache=True, nogil=True)
def predict_regression(xq, qclust, oob, feature, threshold, left, right, node_offset, value, in_tree):
    nq = xq.shape[0]
    n_trees = node_offset.shape[0] - 1
    out = np.empty(nq, dtype=np.float64)
    used = np.zeros(nq, dtype=np.int64)
    for q in range(nq):
        acc = 0.0
        cnt = 0
        for b in range(n_trees):
            if oob and in_tree[b, qclust[q]]:
                continue
            off = node_offset[b]
            node = 0
            while left[off + node] >= 0:
                if xq[q, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            acc += value[off + node]
            cnt += 1
        used[q] = cnt
        out[q] = acc / cnt if cnt > 0 else np.nan
    return out, used


@njit(cache=True, nogil=True)
def predict_causal(
    xq, qclust, oob, feature, threshold, left, right, node_offset,
    leaf_n, leaf_syw, leaf_sww, in_tree, tree_group, n_groups,
):
    """Forest ratio estimate plus little-bag variance for each query row."""
    nq = xq.shape[0]
    n_trees = node_offset.shape[0] - 1
    tau = np.empty(nq, dtype=np.float64)
    var = np.empty(nq, dtype=np.float64)
    den_out = np.empty(nq, dtype=np.float64)
    used = np.zeros(nq, dtype=np.int64)
    nb = np.zeros(n_trees, dtype=np.float64)
    db = np.zeros(n_trees, dtype=np.float64)
    ok = np.zeros(n_trees, dtype=np.bool_)
    gsum = np.zeros(n_groups, dtype=np.float64)
    gss = np.zeros(n_groups, dtype=np.float64)
    gcnt = np.zeros(n_groups, dtype=np.int64)
    for q in range(nq):
        num = 0.0
        den = 0.0
        cnt = 0
        for b in range(n_trees):
            ok[b] = False
            if oob and in_tree[b, qclust[q]]:
                continue
            off = node_offset[b]
            node = 0
            while left[off + node] >= 0:
                if xq[q, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            ln = leaf_n[off + node]
            nb[b] = leaf_syw[off + node] / ln
            db[b] = leaf_sww[off + node] / ln
            ok[b] = True
            num += nb[b]
            den += db[b]
            cnt += 1
        used[q] = cnt
        den_out[q] = den
        if cnt == 0 or not den > 0.0:
            tau[q] = np.nan
            var[q] = np.nan
            continue
        t = num / den
        tau[q] = t
        dbar = den / cnt
        for g in range(n_groups):
            gsum[g] = 0.0
            gss[g] = 0.0
            gcnt[g] = 0
        for b in range(n_trees):
            if ok[b]:
                g = tree_group[b]
                gsum[g] += (nb[b] - t * db[b]) / dbar
                gcnt[g] += 1
        for b in range(n_trees):
            if ok[b]:
                g = tree_group[b]
                dev = (nb[b] - t * db[b]) / dbar - gsum[g] / gcnt[g]
                gss[g] += dev * dev
        n_used = 0
        mean_all = 0.0
        for g in range(n_groups):
            if gcnt[g] >= 2:
                mean_all += gsum[g] / gcnt[g]
                n_used += 1
        if n_used < 2:
            var[q] = np.nan
            continue
        mean_all = mean_all / n_used
        between = 0.0
        within = 0.0
        for g in range(n_groups):
            if gcnt[g] >= 2:
                dev = gsum[g] / gcnt[g] - mean_all
                between += dev * dev
                within += gss[g] / (gcnt[g] - 1) / gcnt[g]
        v = between / (n_used - 1) - within / n_used
        var[q] = v if v > 0.0 else 0.0
    return tau, var, den_out, used
