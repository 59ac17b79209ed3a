"""Compiled kernels for growing and querying honest IV trees.

Node arrays use ``feature == -1`` for leaves. Leaf members are stored as a
``(start, count)`` slice into the tree's member array, which holds indices
of estimation-half observations.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _arm_stats(idx, y, w, z):
    n1 = 0
    n0 = 0
    sy1 = 0.0
    sy0 = 0.0
    sw1 = 0.0
    sw0 = 0.0
    for k in range(idx.shape[0]):
        i = idx[k]
        if z[i] > 0.5:
            n1 += 1
            sy1 += y[i]
            sw1 += w[i]
        else:
            n0 += 1
            sy0 += y[i]
            sw0 += w[i]
    return n1, n0, sy1, sy0, sw1, sw0


@njit(cache=True)
def _ratio(n1, n0, sy1, sy0, sw1, sw0, floor):
    if n1 == 0 or n0 == 0:
        return np.nan
    gap = sw1 / n1 - sw0 / n0
    if abs(gap) < floor:
        return np.nan
    return (sy1 / n1 - sy0 / n0) / gap


@njit(cache=True)
def _partition(buf, start, end, X, f, thr):
    # stable in-place partition of buf[start:end] into x <= thr, x > thr
    tmp = buf[start:end].copy()
    lo = start
    for k in range(tmp.shape[0]):
        if X[tmp[k], f] <= thr:
            buf[lo] = tmp[k]
            lo += 1
    hi = lo
    for k in range(tmp.shape[0]):
        if X[tmp[k], f] > thr:
            buf[hi] = tmp[k]
            hi += 1
    return lo


@njit(cache=True)
def grow_tree_kernel(X, y, w, z, j_idx, i_idx, mtry, min_leaf, denom_floor, max_depth, seed):
    """Grow one honest tree: splits are chosen on ``j_idx``, leaves hold ``i_idx``."""
    np.random.seed(seed)
    p = X.shape[1]
    max_nodes = 2 * (j_idx.shape[0] + i_idx.shape[0]) + 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    leaf_start = np.zeros(max_nodes, dtype=np.int32)
    leaf_count = np.zeros(max_nodes, dtype=np.int32)
    leaf_est = np.full(max_nodes, np.nan)

    jbuf = j_idx.copy()
    ibuf = i_idx.copy()
    # stack entries: node, js, je, is, ie, depth
    stack = np.zeros((max_nodes, 6), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = jbuf.shape[0]
    stack[0, 3] = 0
    stack[0, 4] = ibuf.shape[0]
    stack[0, 5] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        js = stack[top, 1]
        je = stack[top, 2]
        is_ = stack[top, 3]
        ie = stack[top, 4]
        depth = stack[top, 5]

        best_crit = -1.0
        best_f = -1
        best_thr = 0.0
        if depth < max_depth:
            jn = jbuf[js:je]
            inn = ibuf[is_:ie]
            n1, n0, sy1, sy0, sw1, sw0 = _arm_stats(jn, y, w, z)
            i1, i0, _a, _b, _c, _d = _arm_stats(inn, y, w, z)
            if n1 >= 2 * min_leaf and n0 >= 2 * min_leaf and i1 >= 2 * min_leaf and i0 >= 2 * min_leaf:
                tau_p = _ratio(n1, n0, sy1, sy0, sw1, sw0, denom_floor)
                feats = np.sort(np.random.permutation(p)[:mtry])
                for fi in range(feats.shape[0]):
                    f = feats[fi]
                    jv = np.empty(jn.shape[0])
                    for k in range(jn.shape[0]):
                        jv[k] = X[jn[k], f]
                    order = np.argsort(jv, kind="mergesort")
                    iv = np.empty(inn.shape[0])
                    for k in range(inn.shape[0]):
                        iv[k] = X[inn[k], f]
                    iorder = np.argsort(iv, kind="mergesort")
                    l1 = 0
                    l0 = 0
                    ly1 = 0.0
                    ly0 = 0.0
                    lw1 = 0.0
                    lw0 = 0.0
                    ptr = 0
                    il1 = 0
                    il0 = 0
                    m = jn.shape[0]
                    for k in range(m - 1):
                        i = jn[order[k]]
                        if z[i] > 0.5:
                            l1 += 1
                            ly1 += y[i]
                            lw1 += w[i]
                        else:
                            l0 += 1
                            ly0 += y[i]
                            lw0 += w[i]
                        a = jv[order[k]]
                        b = jv[order[k + 1]]
                        if a == b:
                            continue
                        r1 = n1 - l1
                        r0 = n0 - l0
                        if l1 < min_leaf or l0 < min_leaf or r1 < min_leaf or r0 < min_leaf:
                            continue
                        thr = 0.5 * (a + b)
                        while ptr < iorder.shape[0] and iv[iorder[ptr]] <= thr:
                            if z[inn[iorder[ptr]]] > 0.5:
                                il1 += 1
                            else:
                                il0 += 1
                            ptr += 1
                        if il1 < min_leaf or il0 < min_leaf or i1 - il1 < min_leaf or i0 - il0 < min_leaf:
                            continue
                        tl = _ratio(l1, l0, ly1, ly0, lw1, lw0, denom_floor)
                        tr = _ratio(r1, r0, sy1 - ly1, sy0 - ly0, sw1 - lw1, sw0 - lw0, denom_floor)
                        if np.isnan(tl) or np.isnan(tr):
                            continue
                        nl = l1 + l0
                        nr = r1 + r0
                        ref = tau_p
                        if np.isnan(ref):
                            ref = (nl * tl + nr * tr) / (nl + nr)
                        crit = nl * (tl - ref) ** 2 + nr * (tr - ref) ** 2
                        if crit > best_crit + 1e-12:
                            best_crit = crit
                            best_f = f
                            best_thr = thr

        if best_f < 0:
            leaf_start[node] = is_
            leaf_count[node] = ie - is_
            i1, i0, sy1, sy0, sw1, sw0 = _arm_stats(ibuf[is_:ie], y, w, z)
            leaf_est[node] = _ratio(i1, i0, sy1, sy0, sw1, sw0, denom_floor)
            continue

        jm = _partition(jbuf, js, je, X, best_f, best_thr)
        im = _partition(ibuf, is_, ie, X, best_f, best_thr)
        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[top, 0] = rc
        stack[top, 1] = jm
        stack[top, 2] = je
        stack[top, 3] = im
        stack[top, 4] = ie
        stack[top, 5] = depth + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = js
        stack[top, 2] = jm
        stack[top, 3] = is_
        stack[top, 4] = im
        stack[top, 5] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            leaf_start[:n_nodes], leaf_count[:n_nodes], leaf_est[:n_nodes], ibuf)


@njit(cache=True)
def find_leaves(Xq, feature, threshold, left, right, node_offset):
    """Global node index of the leaf reached by each query in each tree."""
    nq = Xq.shape[0]
    B = node_offset.shape[0] - 1
    out = np.empty((nq, B), dtype=np.int64)
    for q in range(nq):
        for b in range(B):
            base = node_offset[b]
            node = 0
            while feature[base + node] >= 0:
                if Xq[q, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[q, b] = base + node
    return out


@njit(cache=True)
def weighted_sums(leaves, leaf_start, leaf_count, node_tree, member_offset, members, V):
    """``sum_i alpha(x, i) * V[i, :]`` for every query row of ``leaves``."""
    nq, B = leaves.shape
    k = V.shape[1]
    out = np.zeros((nq, k))
    for q in range(nq):
        for b in range(B):
            node = leaves[q, b]
            cnt = leaf_count[node]
            base = member_offset[node_tree[node]] + leaf_start[node]
            scale = 1.0 / (B * cnt)
            for m in range(cnt):
                i = members[base + m]
                for c in range(k):
                    out[q, c] += scale * V[i, c]
    return out


@njit(cache=True)
def per_tree_sums(leaves, leaf_start, leaf_count, node_tree, member_offset, members, v, valid):
    """Per-tree numerator and denominator of the leaf mean of ``v`` over valid members."""
    nq, B = leaves.shape
    num = np.zeros((nq, B))
    den = np.zeros((nq, B))
    for q in range(nq):
        for b in range(B):
            node = leaves[q, b]
            cnt = leaf_count[node]
            base = member_offset[node_tree[node]] + leaf_start[node]
            s = 0.0
            c = 0
            for m in range(cnt):
                i = members[base + m]
                if valid[i]:
                    s += v[i]
                    c += 1
            num[q, b] = s / cnt
            den[q, b] = c / cnt
    return num, den


@njit(cache=True)
def dense_weights(leaves_row, leaf_start, leaf_count, node_tree, member_offset, members, n):
    B = leaves_row.shape[0]
    out = np.zeros(n)
    for b in range(B):
        node = leaves_row[b]
        cnt = leaf_count[node]
        base = member_offset[node_tree[node]] + leaf_start[node]
        for m in range(cnt):
            out[members[base + m]] += 1.0 / (B * cnt)
    return out
