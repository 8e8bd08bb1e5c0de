"""Pure-numpy reference implementations of the hot numerical kernels.

All linear-chain CRF kernels work in log space over a [K+2, K+2]
transition matrix whose last two rows/columns are the virtual START (=K)
and STOP (=K+1) states. Emissions are [T, K]. Everything here is plain
vectorized numpy and serves as the always-available fallback backend.
"""

import numpy as np

NAME = "numpy"


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """out[ids[i]] += rows[i] with repeated ids accumulating."""
    np.add.at(out, ids, rows)
    return out


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def crf_forward(emissions: np.ndarray, transitions: np.ndarray):
    """Forward recursion; returns (alpha [T,K], log partition)."""
    T, K = emissions.shape
    start, stop = K, K + 1
    alpha = np.empty((T, K), dtype=emissions.dtype)
    alpha[0] = transitions[start, :K] + emissions[0]
    for t in range(1, T):
        scores = alpha[t - 1][:, None] + transitions[:K, :K]
        alpha[t] = emissions[t] + _logsumexp(scores, axis=0)
    log_z = _logsumexp(alpha[T - 1] + transitions[:K, stop], axis=0)
    return alpha, float(log_z)


def crf_backward(emissions: np.ndarray, transitions: np.ndarray) -> np.ndarray:
    """Backward recursion; returns beta [T,K]."""
    T, K = emissions.shape
    stop = K + 1
    beta = np.empty((T, K), dtype=emissions.dtype)
    beta[T - 1] = transitions[:K, stop]
    for t in range(T - 2, -1, -1):
        scores = transitions[:K, :K] + (emissions[t + 1] + beta[t + 1])[None, :]
        beta[t] = _logsumexp(scores, axis=1)
    return beta


def crf_marginals(emissions: np.ndarray, transitions: np.ndarray):
    """Exact posterior marginals under the chain.

    Returns (unary [T,K], pairwise [T-1,K,K], log partition); pairwise[t]
    is the joint P(y_t = j, y_{t+1} = k).
    """
    T, K = emissions.shape
    alpha, log_z = crf_forward(emissions, transitions)
    beta = crf_backward(emissions, transitions)
    unary = np.exp(alpha + beta - log_z)
    pairwise = np.empty((max(T - 1, 0), K, K), dtype=emissions.dtype)
    for t in range(T - 1):
        joint = (
            alpha[t][:, None]
            + transitions[:K, :K]
            + (emissions[t + 1] + beta[t + 1])[None, :]
        )
        pairwise[t] = np.exp(joint - log_z)
    return unary, pairwise, log_z


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray):
    """Best label path; returns (path int64 [T], path score).

    Ties pick the smallest label index at every argmax, matching the
    first-occurrence convention of np.argmax.
    """
    T, K = emissions.shape
    start, stop = K, K + 1
    delta = transitions[start, :K] + emissions[0]
    psi = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + transitions[:K, :K]
        psi[t] = np.argmax(scores, axis=0)
        delta = emissions[t] + np.max(scores, axis=0)
    final = delta + transitions[:K, stop]
    path = np.zeros(T, dtype=np.int64)
    path[T - 1] = int(np.argmax(final))
    for t in range(T - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path, float(final[path[T - 1]])
