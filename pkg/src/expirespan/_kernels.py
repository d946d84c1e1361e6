"""Compiled loops for masked, renormalized attention.

Memories are visited in bank order and entries with mask exactly 0 are
skipped without touching any accumulator, so the result for a query does
not depend on how many dead entries are present.  No fastmath: reductions
run strictly left to right.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def attention_forward(q, k, v, bias, dist, mask, scale):
    B, H, K, dh = q.shape
    M = k.shape[2]
    out = np.zeros((B, H, K, dh))
    weights = np.zeros((B, H, K, M))
    scores = np.empty(M)
    n_bad = 0
    for b in range(B):
        for h in range(H):
            for t in range(K):
                top = -np.inf
                for i in range(M):
                    if mask[b, t, i] > 0.0:
                        acc = 0.0
                        for d in range(dh):
                            acc += q[b, h, t, d] * k[b, h, i, d]
                        s = acc * scale + bias[h, dist[t, i]]
                        scores[i] = s
                        if s > top:
                            top = s
                z = 0.0
                for i in range(M):
                    if mask[b, t, i] > 0.0:
                        p = mask[b, t, i] * np.exp(scores[i] - top)
                        weights[b, h, t, i] = p
                        z += p
                if not (z > 0.0):
                    n_bad += 1
                    continue
                for i in range(M):
                    if mask[b, t, i] > 0.0:
                        w = weights[b, h, t, i] / z
                        weights[b, h, t, i] = w
                        for d in range(dh):
                            out[b, h, t, d] += w * v[b, h, i, d]
    return out, weights, n_bad


@njit(cache=True)
def attention_backward(g, q, k, v, dist, mask, weights, out, scale, n_pos):
    B, H, K, dh = q.shape
    M = k.shape[2]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dbias = np.zeros((H, n_pos))
    dmask = np.zeros((B, K, M))
    for b in range(B):
        for h in range(H):
            for t in range(K):
                dot_go = 0.0
                for d in range(dh):
                    dot_go += g[b, h, t, d] * out[b, h, t, d]
                for i in range(M):
                    m = mask[b, t, i]
                    if m > 0.0:
                        w = weights[b, h, t, i]
                        gv = 0.0
                        for d in range(dh):
                            gv += g[b, h, t, d] * v[b, h, i, d]
                        diff = gv - dot_go
                        ds = w * diff
                        dbias[h, dist[t, i]] += ds
                        dmask[b, t, i] += diff * w / m
                        c = ds * scale
                        for d in range(dh):
                            dq[b, h, t, d] += c * k[b, h, i, d]
                            dk[b, h, i, d] += c * q[b, h, t, d]
                            dv[b, h, i, d] += w * g[b, h, t, d]
    return dq, dk, dv, dbias, dmask
