# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled split search and ensemble traversal.

Mirrors ``_fallback.py`` operation-for-operation; the accumulation order is
the same sequential scan, so both backends pick identical splits.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

from libc.math cimport INFINITY


cdef inline double _soft(double g, double alpha) noexcept nogil:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


cdef inline double _score(double g, double h, double lam, double alpha) noexcept nogil:
    cdef double t = _soft(g, alpha)
    return t * t / (h + lam)


def best_splits(
    const double[:, ::1] sorted_x,
    const cnp.int32_t[:, ::1] order,
    const cnp.int64_t[::1] features,
    const cnp.int32_t[::1] node_of_row,
    const double[::1] grad,
    const double[::1] hess,
    const double[::1] node_g,
    const double[::1] node_h,
    double reg_lambda,
    double reg_alpha,
    double min_child_weight,
):
    cdef Py_ssize_t m = node_g.shape[0]
    cdef Py_ssize_t n = node_of_row.shape[0]
    cdef Py_ssize_t nf = features.shape[0]

    best_gain_arr = np.full(m, -np.inf)
    best_feat_arr = np.full(m, -1, dtype=np.int64)
    best_thr_arr = np.full(m, np.nan)
    cdef double[::1] best_gain = best_gain_arr
    cdef cnp.int64_t[::1] best_feat = best_feat_arr
    cdef double[::1] best_thr = best_thr_arr

    cdef double[::1] gl = np.zeros(m)
    cdef double[::1] hl = np.zeros(m)
    cdef double[::1] last_x = np.zeros(m)
    cdef double[::1] parent = np.empty(m)
    cdef cnp.int8_t[::1] seen = np.zeros(m, dtype=np.int8)

    cdef Py_ssize_t i, j, k, fi
    cdef cnp.int64_t f
    cdef cnp.int32_t r
    cdef double x, hr, gr, gain, thr

    with nogil:
        for k in range(m):
            parent[k] = _score(node_g[k], node_h[k], reg_lambda, reg_alpha)
        for fi in range(nf):
            f = features[fi]
            for k in range(m):
                gl[k] = 0.0
                hl[k] = 0.0
                seen[k] = 0
            for j in range(n):
                r = order[f, j]
                k = node_of_row[r]
                if k < 0:
                    continue
                x = sorted_x[f, j]
                if seen[k] and x != last_x[k]:
                    hr = node_h[k] - hl[k]
                    if hl[k] >= min_child_weight and hr >= min_child_weight:
                        gr = node_g[k] - gl[k]
                        gain = 0.5 * (
                            _score(gl[k], hl[k], reg_lambda, reg_alpha)
                            + _score(gr, hr, reg_lambda, reg_alpha)
                            - parent[k]
                        )
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            thr = 0.5 * (last_x[k] + x)
                            if thr >= x:
                                thr = last_x[k]
                            best_thr[k] = thr
                gl[k] += grad[r]
                hl[k] += hess[r]
                last_x[k] = x
                seen[k] = 1
    return best_gain_arr, best_feat_arr, best_thr_arr


def predict_forest(
    const double[:, ::1] X,
    const cnp.int32_t[::1] feature,
    const double[::1] threshold,
    const cnp.int32_t[::1] left,
    const cnp.int32_t[::1] right,
    const double[::1] value,
    const cnp.int32_t[::1] roots,
    const cnp.int32_t[::1] out_col,
    double[:, ::1] out,
):
    """Add every tree's leaf value into ``out[:, out_col[tree]]``."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_trees = roots.shape[0]
    cdef Py_ssize_t i, t
    cdef cnp.int32_t node, col
    with nogil:
        for t in range(n_trees):
            col = out_col[t]
            for i in range(n):
                node = roots[t]
                while feature[node] >= 0:
                    if X[i, feature[node]] <= threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                out[i, col] += value[node]
