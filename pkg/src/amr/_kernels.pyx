# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-sample kernels in ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, isfinite

cnp.import_array()


def linear_sum_assignment(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui0
    if n > m:
        raise ValueError(f"cannot assign {n} rows to {m} columns")
    for i in range(n):
        for j in range(m):
            if not isfinite(c[i, j]):
                raise ValueError("cost matrix contains non-finite entries")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] cv = cols
    for j in range(1, m + 1):
        if p[j]:
            cv[p[j] - 1] = j - 1
    return np.arange(n, dtype=np.intp), cols


cdef inline double _iou(double s1, double e1, double s2, double e2) nogil:
    cdef double inter = (e1 if e1 < e2 else e2) - (s1 if s1 > s2 else s2)
    if inter < 0:
        inter = 0
    cdef double union = (e1 - s1) + (e2 - s2) - inter
    if union > 0:
        return inter / union
    return 0.0


def iou_matrix(a, b):
    cdef double[:, ::1] x = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 2))
    cdef double[:, ::1] y = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = _iou(x[i, 0], x[i, 1], y[j, 0], y[j, 1])
    return out


def giou_matrix(a, b):
    cdef double[:, ::1] x = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 2))
    cdef double[:, ::1] y = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef double inter, union, hull, val
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            inter = (x[i, 1] if x[i, 1] < y[j, 1] else y[j, 1]) - (x[i, 0] if x[i, 0] > y[j, 0] else y[j, 0])
            if inter < 0:
                inter = 0
            union = (x[i, 1] - x[i, 0]) + (y[j, 1] - y[j, 0]) - inter
            hull = (x[i, 1] if x[i, 1] > y[j, 1] else y[j, 1]) - (x[i, 0] if x[i, 0] < y[j, 0] else y[j, 0])
            val = inter / union if union > 0 else 0.0
            if hull > 0:
                val -= (hull - union) / hull
            o[i, j] = val
    return out


def greedy_average_precision(scores, preds, gts, double threshold):
    cdef double[::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0]
    cdef Py_ssize_t m = len(gts)
    if m == 0:
        return 0.0
    cdef double[:, ::1] ious = iou_matrix(preds, gts) if n else np.zeros((0, m))
    cdef cnp.intp_t[::1] order = np.lexsort((np.arange(n), -np.asarray(s)))
    cdef char[::1] taken = np.zeros(m, dtype=np.int8)
    cdef double[::1] prec = np.empty(n)
    cdef double[::1] rec = np.empty(n)
    cdef Py_ssize_t rank, i, j, best, tp = 0
    cdef double best_iou, env, prev, ap
    for rank in range(n):
        i = order[rank]
        best = -1
        best_iou = -1.0
        for j in range(m):
            if not taken[j] and ious[i, j] >= threshold and ious[i, j] > best_iou:
                best = j
                best_iou = ious[i, j]
        if best >= 0:
            taken[best] = 1
            tp += 1
        prec[rank] = <double>tp / <double>(rank + 1)
        rec[rank] = <double>tp / <double>m
    env = 0.0
    for rank in range(n - 1, -1, -1):
        if prec[rank] > env:
            env = prec[rank]
        prec[rank] = env
    ap = 0.0
    prev = 0.0
    for rank in range(n):
        if rec[rank] > prev:
            ap += (rec[rank] - prev) * prec[rank]
            prev = rec[rank]
    return ap
