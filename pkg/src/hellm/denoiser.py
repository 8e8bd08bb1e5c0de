"""Corpus filtering by masked-LM pseudo-perplexity.

A sentence pair is encoded once as <CLS, premise, SEP, hypothesis, SEP>;
every scoreable position in turn is replaced by the mask token, the
model predicts the original token there, and the pair's score is exp of
the mean per-position cross-entropy. Lower scores mean the pair reads
more like the pre-training corpus; select_top_fraction keeps the best
slice of a scored collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import bert
from .autodiff import Tensor
from .bert import BertConfig, EncoderWeights
from .errors import ConfigError, ContractError, DataError
from .finetune import NliPair, encode_pair
from .tokenizer import MASK_ID, SPECIAL_IDS, UNK_ID, Vocabulary


@dataclass(frozen=True)
class ScoredPair:
    """A pair with its pseudo-perplexity over scored positions."""

    pair: NliPair
    token_count: int
    ppl: float

    def __post_init__(self):
        if self.token_count < 1:
            raise ContractError(
                f"token_count must be >= 1, got {self.token_count}"
            )
        if not self.ppl >= 1.0:
            raise ContractError(f"ppl must be >= 1, got {self.ppl}")


def _scoreable_positions(ids: np.ndarray, attention_length: int) -> list[int]:
    """Positions the masking policy may select: real tokens and UNK, but
    never CLS, SEP, MASK, or padding."""
    return [
        p
        for p in range(attention_length)
        if ids[p] == UNK_ID or ids[p] not in SPECIAL_IDS
    ]


def _masked_ce_rows(
    ids: np.ndarray,
    segment_ids: np.ndarray,
    attention_length: int,
    positions: Sequence[int],
    weights: EncoderWeights,
    config: BertConfig,
) -> list[Tensor]:
    """One [1, V] logit row per position, each from a forward pass with
    only that position masked."""
    rows = []
    for p in positions:
        masked = ids.copy()
        masked[p] = MASK_ID
        hidden = bert.encode(
            masked, segment_ids, attention_length, weights, config
        )
        rows.append(bert.mlm_logits(hidden, np.array([p]), weights))
    return rows


def pseudo_perplexity(
    pair: NliPair,
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    batched: bool = False,
    cache: dict | None = None,
) -> ScoredPair:
    """Score one pair; the model runs in eval mode so the result is a
    pure function of the pair and the weights.

    The sequential path averages per-position cross-entropies one at a
    time; the batched path stacks all logit rows and takes one
    cross-entropy over the stack. Both orderings agree within float
    round-off.
    """
    ids, segment_ids, attention_length = encode_pair(
        pair, vocab, config.max_positions, cache
    )
    positions = _scoreable_positions(ids, attention_length)
    if not positions:
        raise DataError(
            f"pair has no scoreable tokens (premise {pair.premise[:40]!r})"
        )
    rows = _masked_ce_rows(
        ids, segment_ids, attention_length, positions, weights, config
    )
    labels = np.array([ids[p] for p in positions], dtype=np.int64)
    if batched:
        stacked = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        mean_ce = float(ad.cross_entropy(stacked, labels).data)
    else:
        ces = [
            float(ad.cross_entropy(row, labels[k : k + 1]).data)
            for k, row in enumerate(rows)
        ]
        mean_ce = float(np.mean(ces))
    return ScoredPair(
        pair=pair, token_count=len(positions), ppl=float(math.exp(mean_ce))
    )


def score_pairs(
    pairs: Sequence[NliPair],
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    batched: bool = True,
) -> list[ScoredPair]:
    """Score every pair; the shared sub-token cache makes repeats cheap."""
    cache: dict = {}
    return [
        pseudo_perplexity(
            pair, vocab, weights, config, batched=batched, cache=cache
        )
        for pair in pairs
    ]


@dataclass(frozen=True)
class SelectionReport:
    """Summary emitted next to a retained subset."""

    total: int
    retained: int
    fraction: float
    min_ppl: float
    max_ppl: float
    mean_ppl: float
    cutoff_ppl: float


def select_top_fraction(
    scored: Sequence[ScoredPair], fraction: float
) -> tuple[list[ScoredPair], SelectionReport]:
    """Retain the ceil(fraction * n) lowest-perplexity pairs, sorted
    ascending; ties keep input order."""
    if not scored:
        raise DataError("nothing to select from")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    order = sorted(range(len(scored)), key=lambda i: scored[i].ppl)
    keep = math.ceil(fraction * len(scored))
    retained = [scored[i] for i in order[:keep]]
    ppls = [s.ppl for s in scored]
    report = SelectionReport(
        total=len(scored),
        retained=keep,
        fraction=fraction,
        min_ppl=min(ppls),
        max_ppl=max(ppls),
        mean_ppl=float(np.mean(ppls)),
        cutoff_ppl=retained[-1].ppl,
    )
    return retained, report
