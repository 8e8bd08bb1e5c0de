"""Task heads and data plumbing for sequence tagging and pair
classification fine-tuning.

Tagging (part-of-speech, named entities) attaches each word's label to
its first sub-token; continuation pieces are excluded from the loss.
Pair classification (natural language inference) reads the CLS vector
through the pooler and a fresh 3-way head. Both tasks fine-tune the
whole encoder together with the head.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import bert
from . import crf as crf_mod
from .autodiff import Tape, Tensor
from .bert import BertConfig, EncoderWeights, truncated_normal
from .crf import CrfParams
from .errors import ConfigError, ContractError, DataError, ParseError
from .pretrain_data import truncate_pair
from .tokenizer import CLS_ID, SEP_ID, UNK_ID, Vocabulary, encode
from .trainer import AdamState, GridSpec, adam_step, collect_grads

logger = logging.getLogger("hellm.finetune")

UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
NER_TAGS = ("O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC")
NLI_LABELS = ("entailment", "contradiction", "neutral")
NLI_LABEL_IDS = {label: i for i, label in enumerate(NLI_LABELS)}

DEFAULT_FINETUNE_GRID = GridSpec(
    axes={
        "lr": [2e-5, 3e-5, 5e-5],
        "dropout": [0.0, 0.1, 0.2],
        "batch_size": [16, 32],
    }
)

# ---------------------------------------------------------------------------
# Data types and readers


@dataclass
class TaggedSentence:
    """Words with one label per word."""

    words: list[str]
    labels: list[str]

    def __post_init__(self):
        if len(self.words) != len(self.labels):
            raise DataError(
                f"{len(self.words)} words but {len(self.labels)} labels"
            )


@dataclass(frozen=True)
class NliPair:
    """Premise/hypothesis pair with a 3-way label."""

    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if self.label not in NLI_LABEL_IDS:
            raise DataError(
                f"unknown label {self.label!r} in pair "
                f"(premise {self.premise[:40]!r}); expected one of {NLI_LABELS}"
            )


def validate_bio2(labels: Sequence[str], where: str = "") -> None:
    """Reject label sequences where I-X does not continue B-X or I-X."""
    prev = "O"
    for i, label in enumerate(labels):
        if label.startswith("I-"):
            kind = label[2:]
            if prev not in (f"B-{kind}", f"I-{kind}"):
                place = f" in {where}" if where else ""
                raise DataError(
                    f"malformed BIO2{place}: {label} at position {i} "
                    f"follows {prev}"
                )
        prev = label


def read_tagged(path: str | Path, bio2: bool = False) -> list[TaggedSentence]:
    """Parse token<TAB>label lines, blank line between sentences."""
    sentences: list[TaggedSentence] = []
    words: list[str] = []
    labels: list[str] = []

    def flush():
        if words:
            sentences.append(TaggedSentence(list(words), list(labels)))
            words.clear()
            labels.clear()

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(
                    f"expected 'token<TAB>label' on line {lineno}, got {line!r}",
                    line=lineno,
                )
            words.append(parts[0])
            labels.append(parts[1])
    flush()
    if bio2:
        for i, sent in enumerate(sentences):
            validate_bio2(sent.labels, where=f"sentence {i + 1}")
    return sentences


def read_nli(path: str | Path) -> list[NliPair]:
    """Parse JSONL records {"premise", "hypothesis", "label"}."""
    pairs: list[NliPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pair = NliPair(
                    premise=str(record["premise"]),
                    hypothesis=str(record["hypothesis"]),
                    label=str(record["label"]),
                )
            except (ValueError, KeyError, DataError) as exc:
                raise ParseError(
                    f"bad record on line {lineno}: {exc}", line=lineno
                ) from exc
            pairs.append(pair)
    return pairs


def build_label_map(sentences: Sequence[TaggedSentence]) -> dict[str, int]:
    """Stable label inventory: sorted unique labels to dense ids."""
    seen = sorted({label for s in sentences for label in s.labels})
    if not seen:
        raise DataError("no labels found in tagged data")
    return {label: i for i, label in enumerate(seen)}


# ---------------------------------------------------------------------------
# Alignment


@dataclass
class AlignmentMap:
    """First-sub-token position per kept word, plus the loss mask."""

    positions: np.ndarray  # int64 [n_words]
    loss_mask: np.ndarray  # bool [T]


@dataclass
class AlignedSentence:
    """A tagged sentence rendered into encoder inputs."""

    ids: np.ndarray
    segment_ids: np.ndarray
    attention_length: int
    alignment: AlignmentMap
    label_ids: np.ndarray
    dropped_words: int


def align_labels(
    sentence: TaggedSentence,
    vocab: Vocabulary,
    max_positions: int,
    label_map: dict[str, int],
    cache: dict | None = None,
) -> AlignedSentence:
    """Encode ⟨CLS, pieces, SEP⟩ and attach each label to its word's
    first sub-token. Words that do not fit in max_positions are dropped
    whole from the end, with a warning."""
    if not sentence.words:
        raise ContractError("cannot align an empty sentence")
    piece_ids: list[list[int]] = []
    for word in sentence.words:
        encoded = encode(word, vocab, _cache=cache)
        # A word that normalizes to nothing still needs one position so
        # every label keeps exactly one loss-active sub-token.
        piece_ids.append(list(encoded.ids) if encoded.ids else [UNK_ID])

    budget = max_positions - 2
    kept = 0
    used = 0
    for pieces in piece_ids:
        if used + len(pieces) > budget:
            break
        used += len(pieces)
        kept += 1
    if kept == 0:
        raise DataError(
            f"first word {sentence.words[0]!r} alone exceeds max_positions "
            f"{max_positions}"
        )
    dropped = len(sentence.words) - kept
    if dropped:
        logger.warning(
            "truncating sentence: dropped %d of %d words to fit %d positions",
            dropped, len(sentence.words), max_positions,
        )

    ids = [CLS_ID]
    positions = []
    for pieces in piece_ids[:kept]:
        positions.append(len(ids))
        ids.extend(pieces)
    ids.append(SEP_ID)

    label_ids = []
    for label in sentence.labels[:kept]:
        if label not in label_map:
            raise DataError(f"unknown tag label {label!r}")
        label_ids.append(label_map[label])

    mask = np.zeros(len(ids), dtype=bool)
    mask[positions] = True
    return AlignedSentence(
        ids=np.asarray(ids, dtype=np.int64),
        segment_ids=np.zeros(len(ids), dtype=np.int64),
        attention_length=len(ids),
        alignment=AlignmentMap(
            positions=np.asarray(positions, dtype=np.int64),
            loss_mask=mask,
        ),
        label_ids=np.asarray(label_ids, dtype=np.int64),
        dropped_words=dropped,
    )


# ---------------------------------------------------------------------------
# Heads


def make_tagging_head(
    hidden: int, n_labels: int, seed: int, use_crf: bool = False
) -> dict[str, Tensor]:
    """Linear per-word emission head, optionally with CRF transitions."""
    rng = np.random.default_rng(seed)
    head = {
        "head.w": Tensor(
            truncated_normal(rng, (hidden, n_labels)), requires_grad=True,
            name="head.w",
        ),
        "head.b": Tensor(
            np.zeros(n_labels, dtype=np.float32), requires_grad=True,
            name="head.b",
        ),
    }
    if use_crf:
        head["head.crf"] = CrfParams.create(n_labels, rng).transitions
    return head


def make_pair_head(hidden: int, seed: int) -> dict[str, Tensor]:
    """3-way classification head over the pooled CLS vector."""
    rng = np.random.default_rng(seed)
    return {
        "nli.w": Tensor(
            truncated_normal(rng, (hidden, len(NLI_LABELS))),
            requires_grad=True, name="nli.w",
        ),
        "nli.b": Tensor(
            np.zeros(len(NLI_LABELS), dtype=np.float32), requires_grad=True,
            name="nli.b",
        ),
    }


@dataclass
class TagResult:
    """Per-word logits with optional loss and decoded label ids."""

    logits: Tensor
    loss: Tensor | None
    predictions: np.ndarray


def token_classification(
    hidden: Tensor,
    head: dict[str, Tensor],
    alignment: AlignmentMap,
    label_ids: np.ndarray | None = None,
) -> TagResult:
    """Per-word logits from first-sub-token states; mean cross-entropy
    over active positions, or CRF negative log-likelihood when the head
    carries transitions. Decoding is greedy argmax (Viterbi with CRF)."""
    w = head["head.w"]
    if hidden.shape[1] != w.shape[0]:
        raise ConfigError(
            f"head expects hidden size {w.shape[0]}, encoder produced "
            f"{hidden.shape[1]}"
        )
    gathered = ad.embedding_lookup(hidden, alignment.positions)
    logits = ad.add(ad.matmul(gathered, w), head["head.b"])

    crf_t = head.get("head.crf")
    crf_params = CrfParams(crf_t) if crf_t is not None else None
    if crf_params is not None:
        path, _ = crf_mod.viterbi(logits.data, crf_params)
        predictions = path
    else:
        predictions = logits.data.argmax(axis=1)

    loss = None
    if label_ids is not None:
        label_ids = np.asarray(label_ids, dtype=np.int64)
        if label_ids.shape[0] != alignment.positions.shape[0]:
            raise ConfigError(
                f"{label_ids.shape[0]} labels for "
                f"{alignment.positions.shape[0]} words"
            )
        if label_ids.size and int(label_ids.max()) >= w.shape[1]:
            raise ConfigError(
                f"label id {int(label_ids.max())} outside head of size "
                f"{w.shape[1]}"
            )
        if crf_params is not None:
            ll = crf_mod.log_likelihood(logits, label_ids, crf_params)
            loss = ad.scale(ll, -1.0 / label_ids.shape[0])
        else:
            loss = ad.cross_entropy(logits, label_ids)
    return TagResult(logits=logits, loss=loss, predictions=predictions)


def encode_pair(
    pair: NliPair,
    vocab: Vocabulary,
    max_positions: int,
    cache: dict | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """⟨CLS, premise, SEP, hypothesis, SEP⟩ with 0/1 segment ids; the
    longer segment is truncated from its end to fit, as in pre-training."""
    p = list(encode(pair.premise, vocab, _cache=cache).ids)
    h = list(encode(pair.hypothesis, vocab, _cache=cache).ids)
    if not p or not h:
        raise DataError(
            f"pair encodes to an empty segment (premise {pair.premise[:40]!r})"
        )
    keep_p, keep_h = truncate_pair(len(p), len(h), max_positions - 3)
    if keep_p == 0 or keep_h == 0:
        raise DataError(
            f"max_positions {max_positions} cannot hold both segments"
        )
    ids = [CLS_ID] + p[:keep_p] + [SEP_ID] + h[:keep_h] + [SEP_ID]
    segment_ids = [0] * (keep_p + 2) + [1] * (keep_h + 1)
    return (
        np.asarray(ids, dtype=np.int64),
        np.asarray(segment_ids, dtype=np.int64),
        len(ids),
    )


@dataclass
class PairResult:
    """3-way logits with loss and the predicted label string."""

    logits: Tensor
    loss: Tensor
    predicted: str


def pair_classification(
    pair: NliPair,
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    head: dict[str, Tensor],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> PairResult:
    """Encode the pair, pool CLS through tanh, and classify 3 ways."""
    ids, segment_ids, attention_length = encode_pair(
        pair, vocab, config.max_positions, cache=cache
    )
    hidden = bert.encode(
        ids, segment_ids, attention_length, weights, config, mode=mode, rng=rng
    )
    cls = ad.slice_axis(hidden, 0, 0, 1)
    pooled = ad.tanh(
        ad.add(ad.matmul(cls, weights["pooler.w"]), weights["pooler.b"])
    )
    logits = ad.add(ad.matmul(pooled, head["nli.w"]), head["nli.b"])
    target = NLI_LABEL_IDS[pair.label]
    loss = ad.cross_entropy(logits, np.array([target]))
    predicted = NLI_LABELS[int(logits.data.argmax(axis=1)[0])]
    return PairResult(logits=logits, loss=loss, predicted=predicted)


# ---------------------------------------------------------------------------
# Fine-tuning loops


@dataclass(frozen=True)
class FinetuneRunConfig:
    """Loop controls shared by the tagging and NLI trainers."""

    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 10
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, eval_every >= 1")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass
class FinetuneResult:
    """Trained parameters plus the evaluation trace."""

    weights: EncoderWeights
    head: dict[str, Tensor]
    steps_run: int
    accuracy_trace: list[tuple[int, float]]
    reached_target: bool


def evaluate_tagging(
    encoded: Sequence[AlignedSentence],
    weights: EncoderWeights,
    config: BertConfig,
    head: dict[str, Tensor],
) -> tuple[float, list[np.ndarray]]:
    """Word-level accuracy and per-sentence predicted label ids."""
    correct = total = 0
    outputs = []
    for sent in encoded:
        hidden = bert.encode(
            sent.ids, sent.segment_ids, sent.attention_length, weights, config
        )
        result = token_classification(hidden, head, sent.alignment)
        outputs.append(result.predictions)
        correct += int((result.predictions == sent.label_ids).sum())
        total += sent.label_ids.shape[0]
    return correct / total, outputs


def finetune_tagging(
    train: Sequence[TaggedSentence],
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    label_map: dict[str, int],
    run: FinetuneRunConfig,
    dev: Sequence[TaggedSentence] | None = None,
    use_crf: bool = False,
) -> FinetuneResult:
    """Fine-tune the encoder plus a fresh tagging head; optionally stop
    early once dev accuracy reaches run.target_accuracy."""
    if not train:
        raise DataError("fine-tuning needs at least one sentence")
    cache: dict = {}
    encoded = [
        align_labels(s, vocab, config.max_positions, label_map, cache)
        for s in train
    ]
    encoded_dev = (
        [align_labels(s, vocab, config.max_positions, label_map, cache) for s in dev]
        if dev is not None
        else encoded
    )
    head = make_tagging_head(
        config.hidden, len(label_map), run.seed, use_crf=use_crf
    )
    params = dict(weights.params)
    params.update(head)
    state = AdamState.create(params, run.lr)
    seeds = np.random.SeedSequence(run.seed).generate_state(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])

    trace: list[tuple[int, float]] = []
    reached = False
    steps_run = 0
    for step in range(1, run.steps + 1):
        batch_idx = order_rng.integers(0, len(encoded), size=run.batch_size)
        for t in params.values():
            t.zero_grad()
        with Tape() as tape:
            total = None
            for i in batch_idx:
                sent = encoded[int(i)]
                hidden = bert.encode(
                    sent.ids, sent.segment_ids, sent.attention_length,
                    weights, config, mode="train", rng=drop_rng,
                )
                result = token_classification(
                    hidden, head, sent.alignment, sent.label_ids
                )
                total = result.loss if total is None else ad.add(total, result.loss)
            tape.backward(ad.scale(total, 1.0 / run.batch_size))
        adam_step(params, collect_grads(params), state)
        steps_run = step
        if run.target_accuracy is not None and step % run.eval_every == 0:
            accuracy, _ = evaluate_tagging(encoded_dev, weights, config, head)
            trace.append((step, accuracy))
            if accuracy >= run.target_accuracy:
                reached = True
                break
    if run.target_accuracy is None or not trace or trace[-1][0] != steps_run:
        accuracy, _ = evaluate_tagging(encoded_dev, weights, config, head)
        trace.append((steps_run, accuracy))
        reached = reached or (
            run.target_accuracy is not None and accuracy >= run.target_accuracy
        )
    return FinetuneResult(weights, head, steps_run, trace, reached)


def evaluate_nli(
    pairs: Sequence[NliPair],
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    head: dict[str, Tensor],
    cache: dict | None = None,
) -> tuple[float, list[str]]:
    """Pair accuracy and predicted label strings."""
    correct = 0
    predictions = []
    for pair in pairs:
        result = pair_classification(
            pair, vocab, weights, config, head, cache=cache
        )
        predictions.append(result.predicted)
        correct += int(result.predicted == pair.label)
    return correct / len(pairs), predictions


def finetune_nli(
    train: Sequence[NliPair],
    vocab: Vocabulary,
    weights: EncoderWeights,
    config: BertConfig,
    run: FinetuneRunConfig,
    dev: Sequence[NliPair] | None = None,
) -> FinetuneResult:
    """Fine-tune the encoder plus a fresh 3-way pair head."""
    if not train:
        raise DataError("fine-tuning needs at least one pair")
    cache: dict = {}
    dev_pairs = list(dev) if dev is not None else list(train)
    head = make_pair_head(config.hidden, run.seed)
    params = dict(weights.params)
    params.update(head)
    state = AdamState.create(params, run.lr)
    seeds = np.random.SeedSequence(run.seed).generate_state(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])

    trace: list[tuple[int, float]] = []
    reached = False
    steps_run = 0
    for step in range(1, run.steps + 1):
        batch_idx = order_rng.integers(0, len(train), size=run.batch_size)
        for t in params.values():
            t.zero_grad()
        with Tape() as tape:
            total = None
            for i in batch_idx:
                result = pair_classification(
                    train[int(i)], vocab, weights, config, head,
                    mode="train", rng=drop_rng, cache=cache,
                )
                total = result.loss if total is None else ad.add(total, result.loss)
            tape.backward(ad.scale(total, 1.0 / run.batch_size))
        adam_step(params, collect_grads(params), state)
        steps_run = step
        if run.target_accuracy is not None and step % run.eval_every == 0:
            accuracy, _ = evaluate_nli(
                dev_pairs, vocab, weights, config, head, cache=cache
            )
            trace.append((step, accuracy))
            if accuracy >= run.target_accuracy:
                reached = True
                break
    if run.target_accuracy is None or not trace or trace[-1][0] != steps_run:
        accuracy, _ = evaluate_nli(
            dev_pairs, vocab, weights, config, head, cache=cache
        )
        trace.append((steps_run, accuracy))
        reached = reached or (
            run.target_accuracy is not None and accuracy >= run.target_accuracy
        )
    return FinetuneResult(weights, head, steps_run, trace, reached)
