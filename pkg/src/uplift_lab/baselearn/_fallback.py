"""Pure-numpy implementations of the compiled kernels in ``_splitter.pyx``.

Used when the extension is not built or ``UPLIFT_LAB_PURE=1`` is set.
"""
from __future__ import annotations

import numpy as np


def _soft(g, alpha):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


def _score(g, h, lam, alpha):
    t = _soft(g, alpha)
    return t * t / (h + lam)


def best_splits(
    sorted_x,
    order,
    features,
    node_of_row,
    grad,
    hess,
    node_g,
    node_h,
    reg_lambda,
    reg_alpha,
    min_child_weight,
):
    m = node_g.shape[0]
    best_gain = np.full(m, -np.inf)
    best_feat = np.full(m, -1, dtype=np.int64)
    best_thr = np.full(m, np.nan)
    parent = _score(node_g, node_h, reg_lambda, reg_alpha)

    for f in features:
        rows = order[f]
        nodes = node_of_row[rows]
        keep = nodes >= 0
        rows, nodes, xs = rows[keep], nodes[keep], sorted_x[f][keep]
        if rows.size < 2:
            continue
        # group by node, preserving value order inside each group
        grp = np.argsort(nodes, kind="stable")
        rows, nodes, xs = rows[grp], nodes[grp], xs[grp]
        g = grad[rows]
        h = hess[rows]

        starts = np.flatnonzero(np.r_[True, nodes[1:] != nodes[:-1]])
        seg_id = np.repeat(np.arange(starts.size), np.diff(np.r_[starts, nodes.size]))
        # sequential per-group prefix sums; matches the compiled scan order
        gl = _segmented_cumsum(g, starts, seg_id)
        hl = _segmented_cumsum(h, starts, seg_id)

        # candidate split after position i when the next row is in the same
        # node with a strictly larger value
        same = nodes[:-1] == nodes[1:]
        cand = np.flatnonzero(same & (xs[:-1] != xs[1:]))
        if cand.size == 0:
            continue
        k = nodes[cand]
        gl_c, hl_c = gl[cand], hl[cand]
        hr_c = node_h[k] - hl_c
        ok = (hl_c >= min_child_weight) & (hr_c >= min_child_weight)
        cand, k, gl_c, hl_c, hr_c = cand[ok], k[ok], gl_c[ok], hl_c[ok], hr_c[ok]
        if cand.size == 0:
            continue
        gr_c = node_g[k] - gl_c
        gain = 0.5 * (
            _score(gl_c, hl_c, reg_lambda, reg_alpha)
            + _score(gr_c, hr_c, reg_lambda, reg_alpha)
            - parent[k]
        )
        # first maximum per node in scan order
        sel = np.lexsort((cand, -gain, k))
        first = np.r_[True, k[sel][1:] != k[sel][:-1]]
        sel = sel[first]
        k_best = k[sel]
        improve = gain[sel] > best_gain[k_best]
        sel, k_best = sel[improve], k_best[improve]
        best_gain[k_best] = gain[sel]
        best_feat[k_best] = f
        lo = xs[cand[sel]]
        hi = xs[cand[sel] + 1]
        thr = 0.5 * (lo + hi)
        best_thr[k_best] = np.where(thr >= hi, lo, thr)
    return best_gain, best_feat, best_thr


def _segmented_cumsum(v, starts, seg_id):
    out = np.empty_like(v)
    bounds = np.r_[starts, v.size]
    for s, e in zip(bounds[:-1], bounds[1:]):
        np.cumsum(v[s:e], out=out[s:e])
    return out


def predict_forest(X, feature, threshold, left, right, value, roots, out_col, out):
    n = X.shape[0]
    if n == 0:
        return
    rows = np.arange(n)
    for root, col in zip(roots, out_col):
        node = np.full(n, root, dtype=np.int64)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            idx = np.flatnonzero(inner)
            nd = node[idx]
            go_left = X[rows[idx], f[idx]] <= threshold[nd]
            node[idx] = np.where(go_left, left[nd], right[nd])
        out[:, col] += value[node]
