"""Compiled per-series recursions for the 5-state HMM.

Each kernel loops over series and frames with explicit 5 x 5 arithmetic.
Emissions are rescaled by their per-frame maximum and the forward vector is
renormalized at every step, so nothing underflows on long series.
"""
import math

import numpy as np
from numba import njit

K = 5
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True)
def _emissions(y, mu, sigma, out_p, out_z2):
    # returns the max log-density; fills scaled densities and squared z-scores
    m = -np.inf
    for j in range(K):
        z = (y - mu[j]) / sigma
        out_z2[j] = z * z
        lp = -_HALF_LOG_2PI - math.log(sigma) - 0.5 * z * z
        out_p[j] = lp
        if lp > m:
            m = lp
    for j in range(K):
        out_p[j] = math.exp(out_p[j] - m)
    return m


@njit(cache=True)
def _tpm(a, b, d, G):
    # G[i, j] = softmax_j(eta_ij), eta_ii = 0, eta_ij = a + b d_ij
    for i in range(K):
        mx = 0.0
        for j in range(K):
            if i != j:
                e = a + b * d[i, j]
                if e > mx:
                    mx = e
        s = 0.0
        for j in range(K):
            e = 0.0 if i == j else a + b * d[i, j]
            G[i, j] = math.exp(e - mx)
            s += G[i, j]
        for j in range(K):
            G[i, j] /= s


@njit(cache=True)
def _tpm_cached(ea, E, G):
    # same softmax with E[i, j] = exp(b d_ij) precomputed and ea = exp(a)
    for i in range(K):
        s = 0.0
        for j in range(K):
            if i != j:
                s += E[i, j]
        den = 1.0 / (1.0 + ea * s)
        for j in range(K):
            G[i, j] = den if i == j else ea * E[i, j] * den


@njit(cache=True)
def forward_derivs(y, mu, dist, E, use_E, delta, lengths, a, b, sigma, derivs):
    """Log-likelihood per series; optionally gradient wrt (a, b, log sigma)
    and second derivative wrt a (forward-mode propagation)."""
    B = y.shape[0]
    ll = np.zeros(B)
    grad = np.zeros((B, 3))
    d2a = np.zeros(B)
    p = np.empty(K)
    z2 = np.empty(K)
    G = np.empty((K, K))
    dGa = np.empty((K, K))
    dGb = np.empty((K, K))
    d2G = np.empty((K, K))
    A = np.empty(K)
    dA = np.empty((3, K))
    d2A = np.empty(K)
    v = np.empty(K)
    dv = np.empty((3, K))
    d2v = np.empty(K)
    for n in range(B):
        ea = math.exp(a[n])
        m = _emissions(y[n, 0], mu[n, 0], sigma, p, z2)
        c = 0.0
        for j in range(K):
            A[j] = delta[n, j] * p[j]
            c += A[j]
        for j in range(K):
            A[j] /= c
            dA[0, j] = 0.0
            dA[1, j] = 0.0
            dA[2, j] = delta[n, j] * p[j] * (z2[j] - 1.0) / c
            d2A[j] = 0.0
        tot = math.log(c) + m
        for t in range(1, lengths[n]):
            m = _emissions(y[n, t], mu[n, t], sigma, p, z2)
            if use_E and ea < 1e300:
                _tpm_cached(ea, E[n, t], G)
            else:
                _tpm(a[n], b, dist[n, t], G)
            if derivs:
                for i in range(K):
                    xa = 1.0 - G[i, i]
                    xb = 0.0
                    for j in range(K):
                        xb += G[i, j] * dist[n, t, i, j]
                    var = xa * (1.0 - xa)
                    for j in range(K):
                        ind = 0.0 if i == j else 1.0
                        dGa[i, j] = G[i, j] * (ind - xa)
                        dGb[i, j] = G[i, j] * (dist[n, t, i, j] - xb)
                        d2G[i, j] = G[i, j] * ((ind - xa) * (ind - xa) - var)
            c = 0.0
            for j in range(K):
                s = 0.0
                for i in range(K):
                    s += A[i] * G[i, j]
                v[j] = s
                if derivs:
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    s3 = 0.0
                    for i in range(K):
                        s0 += dA[0, i] * G[i, j] + A[i] * dGa[i, j]
                        s1 += dA[1, i] * G[i, j] + A[i] * dGb[i, j]
                        s2 += dA[2, i] * G[i, j]
                        s3 += d2A[i] * G[i, j] + 2.0 * dA[0, i] * dGa[i, j] + A[i] * d2G[i, j]
                    dv[0, j] = s0 * p[j]
                    dv[1, j] = s1 * p[j]
                    dv[2, j] = s2 * p[j] + s * p[j] * (z2[j] - 1.0)
                    d2v[j] = s3 * p[j]
                c += s * p[j]
            if not c > 0.0:
                tot = -np.inf
                break
            for j in range(K):
                A[j] = v[j] * p[j] / c
                if derivs:
                    dA[0, j] = dv[0, j] / c
                    dA[1, j] = dv[1, j] / c
                    dA[2, j] = dv[2, j] / c
                    d2A[j] = d2v[j] / c
            tot += math.log(c) + m
        ll[n] = tot
        if derivs:
            for k in range(3):
                s = 0.0
                for j in range(K):
                    s += dA[k, j]
                grad[n, k] = s
            s = 0.0
            for j in range(K):
                s += d2A[j]
            d2a[n] = s - grad[n, 0] * grad[n, 0]
    return ll, grad, d2a


@njit(cache=True)
def forward_backward(y, mu, dist, delta, lengths, a, b, sigma, fixed, use_fixed):
    """Smoothed posteriors (B, T, 5), log-likelihoods, the expected transition
    counts summed over everything, and the summed d loglik / d log sigma."""
    B, T = y.shape
    ll = np.zeros(B)
    post = np.zeros((B, T, K))
    xi_sum = np.zeros((K, K))
    dls = 0.0
    phi = np.empty((T, K))
    beta = np.empty((T, K))
    P = np.empty((T, K))
    Z2 = np.empty((T, K))
    C = np.empty(T)
    Gs = np.empty((T, K, K))
    for n in range(B):
        L = lengths[n]
        tot = 0.0
        for t in range(L):
            tot += _emissions(y[n, t], mu[n, t], sigma, P[t], Z2[t])
            if t > 0:
                if use_fixed:
                    Gs[t] = fixed
                else:
                    _tpm(a[n], b, dist[n, t], Gs[t])
        c = 0.0
        for j in range(K):
            phi[0, j] = delta[n, j] * P[0, j]
            c += phi[0, j]
        C[0] = c
        for j in range(K):
            phi[0, j] /= c
        for t in range(1, L):
            c = 0.0
            for j in range(K):
                s = 0.0
                for i in range(K):
                    s += phi[t - 1, i] * Gs[t, i, j]
                phi[t, j] = s * P[t, j]
                c += phi[t, j]
            C[t] = c
            if not c > 0.0:
                raise FloatingPointError("forward normalizer underflowed")
            for j in range(K):
                phi[t, j] /= c
        for t in range(L):
            tot += math.log(C[t])
        ll[n] = tot
        for j in range(K):
            beta[L - 1, j] = 1.0
        for t in range(L - 1, 0, -1):
            for i in range(K):
                s = 0.0
                for j in range(K):
                    s += Gs[t, i, j] * P[t, j] * beta[t, j]
                beta[t - 1, i] = s / C[t]
            for i in range(K):
                for j in range(K):
                    xi_sum[i, j] += phi[t - 1, i] * Gs[t, i, j] * P[t, j] * beta[t, j] / C[t]
        for t in range(L):
            s = 0.0
            for j in range(K):
                post[n, t, j] = phi[t, j] * beta[t, j]
                s += post[n, t, j]
            for j in range(K):
                post[n, t, j] /= s
                dls += post[n, t, j] * (Z2[t, j] - 1.0)
    return ll, post, xi_sum, dls
