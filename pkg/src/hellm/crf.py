"""Linear-chain CRF with exact log-likelihood and Viterbi decoding.

The transition matrix is [K+2, K+2] over K real labels plus a virtual
START (index K) and STOP (index K+1); entries into START and out of STOP
are never read. The log-partition comes from the forward algorithm in
log space (max-shifted log-sum-exp) via the active kernel backend, and
log_likelihood registers a custom backward rule on the tape: the exact
gradient is observed-minus-expected feature counts, with expectations
from forward-backward marginals. An exhaustive enumeration oracle covers
small instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, current_tape
from .errors import ContractError


@dataclass
class CrfParams:
    """Transition scores; row = from-state, column = to-state."""

    transitions: Tensor

    def __post_init__(self):
        shape = self.transitions.shape
        if len(shape) != 2 or shape[0] != shape[1] or shape[0] < 3:
            raise ContractError(
                f"transitions must be square [K+2, K+2] with K >= 1, got {shape}"
            )
        if not np.isfinite(self.transitions.data).all():
            raise ContractError("transitions must be finite")

    @property
    def n_labels(self) -> int:
        return self.transitions.shape[0] - 2

    @property
    def start(self) -> int:
        return self.n_labels

    @property
    def stop(self) -> int:
        return self.n_labels + 1

    @classmethod
    def create(cls, n_labels: int, rng: np.random.Generator | None = None,
               scale: float = 0.01) -> "CrfParams":
        shape = (n_labels + 2, n_labels + 2)
        data = np.zeros(shape, dtype=np.float32) if rng is None else (
            rng.normal(size=shape) * scale
        ).astype(np.float32)
        return cls(Tensor(data, requires_grad=True, name="crf.transitions"))


def _check_labels(labels: np.ndarray, T: int, K: int) -> None:
    if labels.shape != (T,):
        raise ContractError(f"labels must have shape ({T},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"label id out of range [0, {K})")


def _path_score(e: np.ndarray, a: np.ndarray, labels: np.ndarray) -> float:
    """Score accumulated in the same association order as the DP."""
    K = e.shape[1]
    s = a[K, labels[0]] + e[0, labels[0]]
    for t in range(1, len(labels)):
        s = s + a[labels[t - 1], labels[t]]
        s = s + e[t, labels[t]]
    return s + a[labels[-1], K + 1]


def log_likelihood(emissions: Tensor, labels, params: CrfParams) -> Tensor:
    """log p(labels | emissions) as a scalar differentiable in both the
    emissions and the transition matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    T, K = emissions.shape
    if T < 1:
        raise ContractError("log_likelihood needs T >= 1")
    if params.n_labels != K:
        raise ContractError(
            f"emissions have {K} labels but transitions expect {params.n_labels}"
        )
    _check_labels(labels, T, K)

    dtype = np.result_type(emissions.data, params.transitions.data)
    e = emissions.data.astype(dtype)
    a = params.transitions.data.astype(dtype)
    _, log_z = kernels.crf_forward(e, a)
    score = _path_score(e, a, labels)
    out = Tensor(np.asarray(score - log_z, dtype=dtype))

    def backward(g):
        unary, pairwise, _ = kernels.crf_marginals(e, a)
        grad_e = -unary
        grad_e[np.arange(T), labels] += 1.0
        grad_a = np.zeros_like(a)
        grad_a[params.start, labels[0]] += 1.0
        grad_a[labels[-1], params.stop] += 1.0
        np.add.at(grad_a, (labels[:-1], labels[1:]), 1.0)
        grad_a[params.start, :K] -= unary[0]
        grad_a[:K, params.stop] -= unary[T - 1]
        grad_a[:K, :K] -= pairwise.sum(axis=0)
        return grad_e * g, grad_a * g

    tape = current_tape()
    if tape is not None:
        tape.record(out, (emissions, params.transitions), backward)
    return out


def viterbi(emissions, params: CrfParams):
    """Highest-scoring label path and its score; argmax ties at every
    step resolve to the lower label id."""
    e = np.asarray(emissions.data if isinstance(emissions, Tensor) else emissions,
                   dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ContractError(f"emissions must be [T >= 1, K], got {e.shape}")
    if params.n_labels != e.shape[1]:
        raise ContractError(
            f"emissions have {e.shape[1]} labels but transitions expect {params.n_labels}"
        )
    a = params.transitions.data.astype(np.float64)
    path, score = kernels.viterbi_decode(e, a)
    return path, float(score)


def brute_force_oracle(emissions, params: CrfParams):
    """Exact (log-partition, best path) by enumerating all K^T paths.

    The best path among ties is the one whose reversed label tuple is
    smallest, which is provably the path the backpointer DP returns.
    """
    e = np.asarray(emissions.data if isinstance(emissions, Tensor) else emissions,
                   dtype=np.float64)
    a = params.transitions.data.astype(np.float64)
    T, K = e.shape
    if K ** T > 10 ** 6:
        raise ContractError(f"enumeration refused: {K}^{T} paths exceed 10^6")
    scores = []
    best_score = -math.inf
    best_path = None
    for path in itertools.product(range(K), repeat=T):
        labels = np.asarray(path, dtype=np.int64)
        s = _path_score(e, a, labels)
        scores.append(s)
        key = tuple(reversed(path))
        if s > best_score or (s == best_score and key < tuple(reversed(best_path))):
            best_score = s
            best_path = path
    m = max(scores)
    log_z = m + math.log(sum(math.exp(s - m) for s in scores))
    return float(log_z), np.asarray(best_path, dtype=np.int64)
