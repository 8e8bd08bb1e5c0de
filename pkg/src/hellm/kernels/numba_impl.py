"""Numba-compiled versions of the hot kernels.

Same contracts as numpy_impl; explicit loops under @njit. Argmax scans
keep the first (smallest-index) maximizer so tie-breaking matches the
numpy backend exactly on tie-exact inputs.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def scatter_add_rows(out, ids, rows):
    n, d = rows.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += rows[i, j]
    return out


@njit(cache=True)
def _logsumexp_1d(x):
    m = x[0]
    for i in range(1, x.shape[0]):
        if x[i] > m:
            m = x[i]
    s = 0.0
    for i in range(x.shape[0]):
        s += np.exp(x[i] - m)
    return m + np.log(s)


@njit(cache=True)
def crf_forward(emissions, transitions):
    T, K = emissions.shape
    start, stop = K, K + 1
    alpha = np.empty((T, K), dtype=emissions.dtype)
    for k in range(K):
        alpha[0, k] = transitions[start, k] + emissions[0, k]
    work = np.empty(K, dtype=emissions.dtype)
    for t in range(1, T):
        for k in range(K):
            for j in range(K):
                work[j] = alpha[t - 1, j] + transitions[j, k]
            alpha[t, k] = emissions[t, k] + _logsumexp_1d(work)
    for k in range(K):
        work[k] = alpha[T - 1, k] + transitions[k, stop]
    return alpha, float(_logsumexp_1d(work))


@njit(cache=True)
def crf_backward(emissions, transitions):
    T, K = emissions.shape
    stop = K + 1
    beta = np.empty((T, K), dtype=emissions.dtype)
    for k in range(K):
        beta[T - 1, k] = transitions[k, stop]
    work = np.empty(K, dtype=emissions.dtype)
    for t in range(T - 2, -1, -1):
        for k in range(K):
            for j in range(K):
                work[j] = transitions[k, j] + emissions[t + 1, j] + beta[t + 1, j]
            beta[t, k] = _logsumexp_1d(work)
    return beta


@njit(cache=True)
def crf_marginals(emissions, transitions):
    T, K = emissions.shape
    alpha, log_z = crf_forward(emissions, transitions)
    beta = crf_backward(emissions, transitions)
    unary = np.empty((T, K), dtype=emissions.dtype)
    for t in range(T):
        for k in range(K):
            unary[t, k] = np.exp(alpha[t, k] + beta[t, k] - log_z)
    pairwise = np.empty((max(T - 1, 0), K, K), dtype=emissions.dtype)
    for t in range(T - 1):
        for j in range(K):
            for k in range(K):
                pairwise[t, j, k] = np.exp(
                    alpha[t, j]
                    + transitions[j, k]
                    + emissions[t + 1, k]
                    + beta[t + 1, k]
                    - log_z
                )
    return unary, pairwise, log_z


@njit(cache=True)
def viterbi_decode(emissions, transitions):
    T, K = emissions.shape
    start, stop = K, K + 1
    delta = np.empty(K, dtype=emissions.dtype)
    for k in range(K):
        delta[k] = transitions[start, k] + emissions[0, k]
    psi = np.zeros((T, K), dtype=np.int64)
    new_delta = np.empty(K, dtype=emissions.dtype)
    for t in range(1, T):
        for k in range(K):
            best = delta[0] + transitions[0, k]
            arg = 0
            for j in range(1, K):
                s = delta[j] + transitions[j, k]
                if s > best:
                    best = s
                    arg = j
            psi[t, k] = arg
            new_delta[k] = emissions[t, k] + best
        delta[:] = new_delta
    best = delta[0] + transitions[0, stop]
    arg = 0
    for k in range(1, K):
        s = delta[k] + transitions[k, stop]
        if s > best:
            best = s
            arg = k
    path = np.zeros(T, dtype=np.int64)
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path, float(best)
