"""Compiled inner loops for the classifiers: exact-greedy regression trees on
gradient/hessian statistics and coordinate descent for the penalized
weighted least-squares subproblem."""
import numpy as np
from numba import njit


@njit(cache=True)
def build_tree(X, order, g, h, max_depth, lam, min_child_weight):
    """Level-wise exact-greedy tree in heap layout (children of k at 2k+1,
    2k+2). Returns (feature, threshold, value); feature -1 marks a leaf.
    Samples go left when ``x < threshold``."""
    n, p = X.shape
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full(n_nodes, -1, dtype=np.int64)
    thr = np.zeros(n_nodes)
    val = np.zeros(n_nodes)
    G = np.zeros(n_nodes)
    H = np.zeros(n_nodes)
    open_ = np.zeros(n_nodes, dtype=np.bool_)
    node = np.zeros(n, dtype=np.int64)
    for i in range(n):
        G[0] += g[i]
        H[0] += h[i]
    open_[0] = True
    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    cnt = np.zeros(n_nodes, dtype=np.int64)
    last = np.zeros(n_nodes)
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    for depth in range(max_depth):
        lo = 2 ** depth - 1
        hi = 2 ** (depth + 1) - 1
        for k in range(lo, hi):
            best_gain[k] = 0.0
            best_feat[k] = -1
        for f in range(p):
            for k in range(lo, hi):
                GL[k] = 0.0
                HL[k] = 0.0
                cnt[k] = 0
            for r in range(n):
                i = order[r, f]
                k = node[i]
                if not open_[k]:
                    continue
                x = X[i, f]
                if cnt[k] > 0 and x > last[k]:
                    gr = G[k] - GL[k]
                    hr = H[k] - HL[k]
                    if HL[k] >= min_child_weight and hr >= min_child_weight:
                        gain = 0.5 * (GL[k] * GL[k] / (HL[k] + lam) + gr * gr / (hr + lam)
                                      - G[k] * G[k] / (H[k] + lam))
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            t = 0.5 * (last[k] + x)
                            best_thr[k] = t if t > last[k] else x
                GL[k] += g[i]
                HL[k] += h[i]
                cnt[k] += 1
                last[k] = x
        any_split = False
        for k in range(lo, hi):
            if open_[k] and best_feat[k] >= 0:
                feat[k] = best_feat[k]
                thr[k] = best_thr[k]
                open_[2 * k + 1] = True
                open_[2 * k + 2] = True
                any_split = True
        for i in range(n):
            k = node[i]
            if open_[k] and feat[k] >= 0:
                c = 2 * k + 1 if X[i, feat[k]] < thr[k] else 2 * k + 2
                node[i] = c
                G[c] += g[i]
                H[c] += h[i]
        for k in range(lo, hi):
            if open_[k] and feat[k] >= 0:
                open_[k] = False
        if not any_split:
            break
    for k in range(n_nodes):
        if feat[k] < 0:
            val[k] = -G[k] / (H[k] + lam)
    return feat, thr, val


@njit(cache=True)
def tree_predict(X, feat, thr, val):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        k = 0
        while feat[k] >= 0:
            k = 2 * k + 1 if X[i, feat[k]] < thr[k] else 2 * k + 2
        out[i] = val[k]
    return out


@njit(cache=True)
def wls_cd(X, z, w, beta0, beta, l1, l2, tol, max_sweeps):
    """Cyclic coordinate descent with soft-thresholding for
    (1/2n) sum w_i (z_i - b0 - x_i b)^2 + l1 |b|_1 + (l2/2) |b|^2.
    Updates ``beta`` in place and returns the new intercept."""
    n, p = X.shape
    r = np.empty(n)
    for i in range(n):
        s = beta0
        for j in range(p):
            s += X[i, j] * beta[j]
        r[i] = z[i] - s
    xw2 = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += w[i] * X[i, j] * X[i, j]
        xw2[j] = s / n
    sw = 0.0
    for i in range(n):
        sw += w[i]
    for _ in range(max_sweeps):
        dmax = 0.0
        # intercept (unpenalized)
        s = 0.0
        for i in range(n):
            s += w[i] * r[i]
        d = s / sw
        beta0 += d
        for i in range(n):
            r[i] -= d
        if abs(d) > dmax:
            dmax = abs(d)
        for j in range(p):
            if xw2[j] == 0.0:
                continue
            s = 0.0
            for i in range(n):
                s += w[i] * X[i, j] * r[i]
            u = s / n + xw2[j] * beta[j]
            if u > l1:
                b = (u - l1) / (xw2[j] + l2)
            elif u < -l1:
                b = (u + l1) / (xw2[j] + l2)
            else:
                b = 0.0
            d = b - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * X[i, j]
                beta[j] = b
                if abs(d) > dmax:
                    dmax = abs(d)
        if dmax < tol:
            break
    return beta0
