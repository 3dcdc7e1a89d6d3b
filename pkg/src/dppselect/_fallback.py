"""Numpy implementations of the hot loops, used when the compiled core is absent.

Signatures and semantics mirror ``_core.pyx``.
"""

import numpy as np


def greedy_map(K, k, eps):
    n = K.shape[0]
    cis = np.zeros((n, k))
    di2 = np.array(np.diag(K), dtype=np.float64)
    available = np.ones(n, dtype=bool)
    order, gains = [], []
    stopped = False
    while len(order) < k:
        if not available.any():
            stopped = True
            break
        masked = np.where(available, di2, -np.inf)
        j = int(np.argmax(masked))  # first maximum -> lowest index
        if masked[j] <= eps:
            stopped = True
            break
        order.append(j)
        gains.append(float(masked[j]))
        available[j] = False
        t = len(order)
        if t == k:
            break
        dj = np.sqrt(masked[j])
        idx = np.flatnonzero(available)
        e = (K[j, idx] - cis[idx, : t - 1] @ cis[j, : t - 1]) / dj
        cis[idx, t - 1] = e
        di2[idx] = np.maximum(di2[idx] - e * e, 0.0)
    return np.asarray(order, dtype=np.intp), np.asarray(gains, dtype=np.float64), stopped


def _gather(L, subsets):
    return L[subsets[:, :, None], subsets[:, None, :]]


def subset_dets(L, subsets):
    if subsets.shape[1] == 0:
        return np.ones(subsets.shape[0])
    return np.linalg.det(_gather(L, subsets))


def subset_dets_adj(L, subsets):
    blocks = _gather(L, subsets)
    m, k, _ = blocks.shape
    dets = np.linalg.det(blocks) if k else np.ones(m)
    adj = np.empty((m, k, k))
    if k == 1:
        adj[:] = 1.0
        return dets, adj
    keep = [np.array([r for r in range(k) if r != i]) for i in range(k)]
    for i in range(k):
        for j in range(k):
            minor = blocks[:, keep[i][:, None], keep[j][None, :]]
            adj[:, j, i] = (-1.0) ** (i + j) * np.linalg.det(minor)
    return dets, adj
