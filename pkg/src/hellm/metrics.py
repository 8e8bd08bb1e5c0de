"""Evaluation metrics: exact-match accuracy, one-vs-rest per-class F1,
entity-level micro-F1 over BIO2 spans, and multi-run aggregation.

Span scoring decodes both label sequences into (type, start, end)
triples and counts exact matches. Predictions are repaired before
decoding (an I-X with no head is read as B-X) because models may emit
malformed sequences and scoring must be total; gold is never repaired.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class ClassScore:
    """One-vs-rest confusion counts for a single class."""

    tp: int
    fp: int
    fn: int
    absent: bool = False

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def precision(self) -> float:
        total = self.tp + self.fp
        return self.tp / total if total else 0.0

    @property
    def recall(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0


def accuracy(gold: Sequence, pred: Sequence) -> float:
    """Exact-match fraction over aligned items."""
    if len(gold) != len(pred):
        raise ContractError(
            f"{len(gold)} gold items but {len(pred)} predictions"
        )
    if not gold:
        raise ContractError("accuracy over zero items is undefined")
    return sum(1 for g, p in zip(gold, pred) if g == p) / len(gold)


def per_class_f1(
    gold: Sequence[str], pred: Sequence[str], classes: Sequence[str]
) -> dict[str, ClassScore]:
    """One-vs-rest F1 per class; a class absent from both sides scores
    0 and is flagged absent."""
    if len(gold) != len(pred):
        raise ContractError(
            f"{len(gold)} gold items but {len(pred)} predictions"
        )
    known = set(classes)
    for label in gold:
        if label not in known:
            raise DataError(f"gold label {label!r} not in classes")
    for label in pred:
        if label not in known:
            raise DataError(f"predicted label {label!r} not in classes")
    scores = {}
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
        scores[cls] = ClassScore(
            tp=tp, fp=fp, fn=fn, absent=(tp + fp + fn == 0)
        )
    return scores


# ---------------------------------------------------------------------------
# BIO2 spans


@dataclass(frozen=True)
class EntitySpan:
    """An exact entity location: inclusive word indices."""

    type: str
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end or self.start < 0:
            raise ContractError(
                f"span needs 0 <= start <= end, got ({self.start}, {self.end})"
            )


def _split_label(label: str, position: int) -> tuple[str, str]:
    if label == "O":
        return "O", ""
    if len(label) > 2 and label[1] == "-" and label[0] in ("B", "I"):
        return label[0], label[2:]
    raise DataError(f"bad BIO2 label {label!r} at position {position}")


def decode_bio2_spans(
    labels: Sequence[str], repair: bool = False
) -> list[EntitySpan]:
    """Spans from a BIO2 sequence. With repair, a headless I-X opens a
    new span as if it were B-X; without it, malformed input is an error."""
    spans: list[EntitySpan] = []
    open_type: str | None = None
    open_start = 0

    def close(upto: int):
        nonlocal open_type
        if open_type is not None:
            spans.append(EntitySpan(open_type, open_start, upto))
            open_type = None

    for i, label in enumerate(labels):
        head, kind = _split_label(label, i)
        if head == "O":
            close(i - 1)
        elif head == "B":
            close(i - 1)
            open_type, open_start = kind, i
        else:
            if open_type == kind:
                continue
            if not repair:
                raise DataError(
                    f"I-{kind} at position {i} continues nothing"
                )
            close(i - 1)
            open_type, open_start = kind, i
    close(len(labels) - 1)
    return spans


@dataclass(frozen=True)
class SpanF1:
    """Micro-averaged exact-span counts, pooled over all sentences."""

    tp: int
    fp: int
    fn: int
    degenerate: bool
    per_type: dict[str, ClassScore]

    @property
    def precision(self) -> float:
        if self.degenerate:
            return 1.0
        total = self.tp + self.fp
        return self.tp / total if total else 0.0

    @property
    def recall(self) -> float:
        if self.degenerate:
            return 1.0
        total = self.tp + self.fn
        return self.tp / total if total else 0.0

    @property
    def f1(self) -> float:
        if self.degenerate:
            return 1.0
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0


def entity_micro_f1(
    gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]
) -> SpanF1:
    """Exact (type, start, end) span matching pooled over sentences;
    empty gold with empty predictions is a defined 1.0, flagged."""
    if len(gold) != len(pred):
        raise ContractError(
            f"{len(gold)} gold sentences but {len(pred)} predicted"
        )
    tp = fp = fn = 0
    by_type: dict[str, list[int]] = {}
    for k, (g_labels, p_labels) in enumerate(zip(gold, pred)):
        if len(g_labels) != len(p_labels):
            raise ContractError(
                f"sentence {k}: {len(g_labels)} gold labels but "
                f"{len(p_labels)} predicted"
            )
        g_spans = set(decode_bio2_spans(g_labels, repair=False))
        p_spans = set(decode_bio2_spans(p_labels, repair=True))
        tp += len(g_spans & p_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
        for span in g_spans | p_spans:
            counts = by_type.setdefault(span.type, [0, 0, 0])
            if span in g_spans and span in p_spans:
                counts[0] += 1
            elif span in p_spans:
                counts[1] += 1
            else:
                counts[2] += 1
    per_type = {
        t: ClassScore(tp=c[0], fp=c[1], fn=c[2])
        for t, c in sorted(by_type.items())
    }
    return SpanF1(
        tp=tp, fp=fp, fn=fn,
        degenerate=(tp + fp + fn == 0),
        per_type=per_type,
    )


# ---------------------------------------------------------------------------
# Multi-run aggregation


@dataclass(frozen=True)
class MetricSummary:
    """Mean and unbiased standard deviation over repeated measurements."""

    metric: str
    values: tuple[float, ...]
    mean: float
    std: float

    @classmethod
    def from_values(cls, metric: str, values: Sequence[float]) -> "MetricSummary":
        vals = tuple(float(v) for v in values)
        if not vals:
            raise DataError(f"no values to aggregate for {metric!r}")
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return cls(metric=metric, values=vals, mean=mean, std=std)

    def __str__(self) -> str:
        return f"{self.metric}: {self.mean:.4f} +- {self.std:.4f}"
