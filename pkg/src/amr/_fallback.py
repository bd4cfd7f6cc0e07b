"""Pure-Python versions of the hot kernels in ``_kernels.pyx``.

Both implementations must agree to the last bit on every input; the test
suite compares them directly when the extension is built.
"""
from __future__ import annotations

import math

import numpy as np


def linear_sum_assignment(cost):
    """Minimum-cost assignment of every row to a distinct column.

    Shortest-augmenting-path Hungarian method with potentials, O(n^2 m).
    Requires rows <= columns. Returns ``(rows, cols)`` int arrays sorted by row.
    Among equal-cost augmentations the lowest column index wins.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n > m:
        raise ValueError(f"cannot assign {n} rows to {m} columns")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    cl = c.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cl[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return np.arange(n, dtype=np.intp), cols


def iou_matrix(a, b):
    """Pairwise IoU of 1-D intervals given as (n, 2) and (m, 2) [start, end] rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def giou_matrix(a, b):
    """Pairwise generalized IoU of 1-D intervals."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    hull = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    safe_u = np.where(union > 0, union, 1.0)
    safe_h = np.where(hull > 0, hull, 1.0)
    return np.where(union > 0, inter / safe_u, 0.0) - np.where(hull > 0, (hull - union) / safe_h, 0.0)


def greedy_average_precision(scores, preds, gts, threshold):
    """Interpolated AP of one query at one IoU threshold.

    Predictions are visited by descending score (lower index first on ties);
    each takes the unmatched gt of highest IoU (lowest index on ties) when
    that IoU reaches ``threshold``. AP is the area under the precision
    envelope of the resulting precision/recall steps.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    m = len(gts)
    if m == 0:
        return 0.0
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    ious = iou_matrix(preds, gts) if n else np.zeros((0, m))
    taken = [False] * m
    precisions = []
    recalls = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        best = -1
        best_iou = -1.0
        for j in range(m):
            if not taken[j] and ious[i, j] >= threshold and ious[i, j] > best_iou:
                best = j
                best_iou = ious[i, j]
        if best >= 0:
            taken[best] = True
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / m)
    ap = 0.0
    envelope = 0.0
    # sweep from the lowest-ranked prediction upwards
    for k in range(n - 1, -1, -1):
        envelope = max(envelope, precisions[k])
        precisions[k] = envelope
    prev_recall = 0.0
    for k in range(n):
        if recalls[k] > prev_recall:
            ap += (recalls[k] - prev_recall) * precisions[k]
            prev_recall = recalls[k]
    return ap
