"""Pure-numpy twins of the numba kernels in ``_jit``.

Sums that must match the compiled loops bit-for-bit go through ``_seqsum``
(sequential accumulation) rather than ``np.sum`` (pairwise).
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_CHUNK = 4096


def _seqsum(a):
    if a.shape[0] == 0:
        return 0.0
    return float(np.cumsum(a)[-1])


class _SplitMix:
    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next(self):
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)


def _draw_features(rng, d, mtry):
    perm = list(range(d))
    for j in range(mtry):
        r = j + rng.next() % (d - j)
        perm[j], perm[r] = perm[r], perm[j]
    return sorted(perm[:mtry])


def grow_tree(x, rows, causal, target, w_tilde, w_raw, min_leaf, alpha, max_depth, mtry, seed):
    n = rows.shape[0]
    d = x.shape[1]
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    start = [0]
    stop = [n]
    depth = [0]
    work = np.array(rows, dtype=np.int64, copy=True)
    rng = _SplitMix(seed)

    stack = [0]
    while stack:
        node = stack.pop()
        s, e = start[node], stop[node]
        m = e - s
        if max_depth >= 0 and depth[node] >= max_depth:
            continue
        if m < 2 * min_leaf:
            continue
        idx = work[s:e]

        if causal:
            wt = w_tilde[idx]
            yt = target[idx]
            wbar = _seqsum(wt) / m
            ybar = _seqsum(yt) / m
            dw = wt - wbar
            dy = yt - ybar
            sww = _seqsum(dw * dw)
            swy = _seqsum(dw * dy)
            if not sww > 0.0:
                continue
            tau = swy / sww
            var = sww / m
            tgt = dw * (dy - tau * dw) / var
            wr = w_raw[idx].astype(np.int64)
            total_treated = int(wr.sum())
        else:
            yt = target[idx]
            mean = _seqsum(yt) / m
            tgt = yt - mean

        min_child = max(min_leaf, int(np.ceil(alpha * m)))
        feats = _draw_features(rng, d, mtry)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        k = np.arange(1, m)
        kf = k.astype(np.float64)
        rk = (m - k).astype(np.float64)
        size_ok = (k >= min_child) & (m - k >= min_child)
        for f in feats:
            vals = x[idx, f]
            order = np.argsort(vals, kind="stable")
            ts = tgt[order]
            cs = np.cumsum(ts)
            total = float(cs[-1])
            base = total * total / m
            cum = cs[:-1]
            sv = vals[order]
            lo = sv[:-1]
            hi = sv[1:]
            ok = size_ok & (lo < hi)
            if causal:
                treated = np.cumsum(wr[order])[:-1]
                rt = total_treated - treated
                ok &= (treated >= 1) & (k - treated >= 1) & (rt >= 1) & ((m - k) - rt >= 1)
            if not ok.any():
                continue
            rest = total - cum
            gain = cum * cum / kf + rest * rest / rk - base
            gain = np.where(ok, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best_gain:
                best_gain = float(gain[j])
                best_f = f
                thr = 0.5 * (lo[j] + hi[j])
                if thr >= hi[j]:
                    thr = lo[j]
                best_thr = float(thr)
        if best_f < 0:
            continue

        mask = x[idx, best_f] <= best_thr
        nl = int(mask.sum())
        work[s:e] = np.concatenate([idx[mask], idx[~mask]])
        feature[node] = best_f
        threshold[node] = best_thr
        lc = len(feature)
        rc = lc + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
        left[node] = lc
        right[node] = rc
        start += [s, s + nl]
        stop += [s + nl, e]
        depth += [depth[node] + 1, depth[node] + 1]
        stack.append(rc)
        stack.append(lc)

    return (
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
    )


def route(x, rows, feature, threshold, left, right):
    node = np.zeros(rows.shape[0], dtype=np.int64)
    active = left[node] >= 0
    while active.any():
        a = np.flatnonzero(active)
        nd = node[a]
        go_left = x[rows[a], feature[nd]] <= threshold[nd]
        node[a] = np.where(go_left, left[nd], right[nd])
        active[a] = left[node[a]] >= 0
    return node


def prune_tree(left, right, leaf_of, w_raw_rows, min_leaf):
    n_nodes = left.shape[0]
    cnt = np.bincount(leaf_of, minlength=n_nodes).astype(np.int64)
    trt = np.bincount(leaf_of, weights=w_raw_rows, minlength=n_nodes).astype(np.int64)
    for node in range(n_nodes - 1, -1, -1):
        if left[node] >= 0:
            cnt[node] = cnt[left[node]] + cnt[right[node]]
            trt[node] = trt[left[node]] + trt[right[node]]
    is_leaf = left < 0
    for node in range(n_nodes - 1, -1, -1):
        if is_leaf[node]:
            continue
        for c in (left[node], right[node]):
            if is_leaf[c] and (cnt[c] < min_leaf or trt[c] < 1 or cnt[c] - trt[c] < 1):
                is_leaf[node] = True
    root_ok = bool(cnt[0] >= min_leaf and trt[0] >= 1 and cnt[0] - trt[0] >= 1)
    return root_ok, is_leaf


def compact_tree(feature, threshold, left, right, is_leaf):
    n_nodes = left.shape[0]
    new_id = np.full(n_nodes, -1, dtype=np.int64)
    order = []
    stack = [0]
    while stack:
        node = stack.pop()
        new_id[node] = len(order)
        order.append(node)
        if not is_leaf[node]:
            stack.append(right[node])
            stack.append(left[node])
    order = np.array(order, dtype=np.int64)
    internal = ~is_leaf[order]
    nf = np.where(internal, feature[order], -1)
    nt = np.where(internal, threshold[order], 0.0)
    nl = np.where(internal, new_id[left[order]], -1)
    nr = np.where(internal, new_id[right[order]], -1)
    mapping = new_id.copy()
    for node in range(n_nodes):
        if left[node] >= 0 and new_id[left[node]] < 0:
            mapping[left[node]] = mapping[node]
            mapping[right[node]] = mapping[node]
    return nf.astype(np.int64), nt.astype(np.float64), nl.astype(np.int64), nr.astype(np.int64), mapping


def _leaves(xq, off, feature, threshold, left, right):
    node = np.zeros(xq.shape[0], dtype=np.int64)
    active = left[off + node] >= 0
    while active.any():
        a = np.flatnonzero(active)
        g = off + node[a]
        go_left = xq[a, feature[g]] <= threshold[g]
        node[a] = np.where(go_left, left[g], right[g])
        active[a] = left[off + node[a]] >= 0
    return off + node


def predict_regression(xq, qclust, oob, feature, threshold, left, right, node_offset, value, in_tree):
    nq = xq.shape[0]
    n_trees = node_offset.shape[0] - 1
    acc = np.zeros(nq)
    used = np.zeros(nq, dtype=np.int64)
    for b in range(n_trees):
        leaf = _leaves(xq, node_offset[b], feature, threshold, left, right)
        ok = ~in_tree[b, qclust] if oob else np.ones(nq, dtype=bool)
        acc = np.where(ok, acc + value[leaf], acc)
        used += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(used > 0, acc / np.maximum(used, 1), np.nan)
    return out, used


def predict_causal(
    xq, qclust, oob, feature, threshold, left, right, node_offset,
    leaf_n, leaf_syw, leaf_sww, in_tree, tree_group, n_groups,
):
    parts = [
        _predict_causal_chunk(
            xq[a:a + _CHUNK], qclust[a:a + _CHUNK], oob, feature, threshold, left, right,
            node_offset, leaf_n, leaf_syw, leaf_sww, in_tree, tree_group, n_groups,
        )
        for a in range(0, max(xq.shape[0], 1), _CHUNK)
    ]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def _predict_causal_chunk(
    xq, qclust, oob, feature, threshold, left, right, node_offset,
    leaf_n, leaf_syw, leaf_sww, in_tree, tree_group, n_groups,
):
    nq = xq.shape[0]
    n_trees = node_offset.shape[0] - 1
    nb = np.zeros((n_trees, nq))
    db = np.zeros((n_trees, nq))
    ok = np.zeros((n_trees, nq), dtype=bool)
    num = np.zeros(nq)
    den = np.zeros(nq)
    for b in range(n_trees):
        leaf = _leaves(xq, node_offset[b], feature, threshold, left, right)
        ok[b] = ~in_tree[b, qclust] if oob else True
        ln = leaf_n[leaf]
        nb[b] = leaf_syw[leaf] / ln
        db[b] = leaf_sww[leaf] / ln
        num = np.where(ok[b], num + nb[b], num)
        den = np.where(ok[b], den + db[b], den)
    used = ok.sum(axis=0).astype(np.int64)
    good = (used > 0) & (den > 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = num / den
        dbar = den / used
        psi = (nb - t * db) / dbar
    gsum = np.zeros((n_groups, nq))
    gcnt = np.zeros((n_groups, nq), dtype=np.int64)
    for b in range(n_trees):
        g = tree_group[b]
        gsum[g] = np.where(ok[b], gsum[g] + psi[b], gsum[g])
        gcnt[g] += ok[b]
    gss = np.zeros((n_groups, nq))
    with np.errstate(invalid="ignore", divide="ignore"):
        gmean = gsum / gcnt
        for b in range(n_trees):
            g = tree_group[b]
            dev = psi[b] - gmean[g]
            gss[g] = np.where(ok[b], gss[g] + dev * dev, gss[g])
        valid = gcnt >= 2
        n_used = valid.sum(axis=0)
        mean_all = np.zeros(nq)
        for g in range(n_groups):
            mean_all = np.where(valid[g], mean_all + gmean[g], mean_all)
        mean_all = mean_all / n_used
        between = np.zeros(nq)
        within = np.zeros(nq)
        for g in range(n_groups):
            dev = gmean[g] - mean_all
            between = np.where(valid[g], between + dev * dev, between)
            within = np.where(valid[g], within + gss[g] / (gcnt[g] - 1) / gcnt[g], within)
        v = between / (n_used - 1) - within / n_used
    var = np.where(v > 0.0, v, 0.0)
    var = np.where(good & (n_used >= 2), var, np.nan)
    tau = np.where(good, t, np.nan)
    return tau, var, den, used
