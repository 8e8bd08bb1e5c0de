"""MLM/NSP pre-training instances: pairing, packing, masking, JSONL I/O.

Each instance packs two sentences as ``[CLS] S1 [SEP] S2 [SEP] [PAD]...``
to a fixed length. With probability ``1 - negative_prob`` S2 is the
sentence that actually follows S1 in its document (label IsNext);
otherwise S2 is a uniformly random sentence drawn from a different
document (NotNext). Masking selects real token positions independently
and replaces them with MASK / a random id / the original token in the
configured proportions, recording the originals as labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError
from .textnorm import Document
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Vocabulary, encode

IS_NEXT = "IsNext"
NOT_NEXT = "NotNext"
NSP_LABELS = (IS_NEXT, NOT_NEXT)

_N_SPECIALS = 5  # random replacements are drawn from ids >= this

FIELD_ORDER = ("ids", "segment_ids", "mlm_positions", "mlm_labels", "nsp_label", "attention_length")


@dataclass
class PretrainInstance:
    """One packed pre-training example of fixed length.

    ``attention_length`` counts the real (non-PAD) positions;
    ``mlm_positions`` / ``mlm_labels`` are empty until masking is applied.
    """

    ids: list[int]
    segment_ids: list[int]
    mlm_positions: list[int]
    mlm_labels: list[int]
    nsp_label: str
    attention_length: int

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in FIELD_ORDER}

    @classmethod
    def from_dict(cls, payload: dict) -> "PretrainInstance":
        try:
            return cls(
                ids=[int(v) for v in payload["ids"]],
                segment_ids=[int(v) for v in payload["segment_ids"]],
                mlm_positions=[int(v) for v in payload["mlm_positions"]],
                mlm_labels=[int(v) for v in payload["mlm_labels"]],
                nsp_label=str(payload["nsp_label"]),
                attention_length=int(payload["attention_length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed pre-training instance: {exc}") from exc


@dataclass(frozen=True)
class MaskingPolicy:
    """Selection probability and replacement split for MLM masking."""

    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    rng_seed: int = 0
    force_minimum: bool = True

    def __post_init__(self):
        if not 0.0 < self.select_prob < 1.0:
            raise ConfigError(f"select_prob must lie in (0, 1), got {self.select_prob}")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0.0:
            raise ConfigError(f"replacement fractions must be non-negative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"replacement fractions must sum to 1, got {fracs}")


def truncate_pair(len1: int, len2: int, budget: int) -> tuple[int, int]:
    """Token counts after trimming the longer segment one token at a time.

    Equal lengths trim the first segment, so 100 + 100 under budget 125
    lands on (62, 63).
    """
    while len1 + len2 > budget:
        if len1 >= len2:
            len1 -= 1
        else:
            len2 -= 1
    return len1, len2


def _pack(s1: list[int], s2: list[int], nsp_label: str, max_len: int) -> PretrainInstance:
    ids = [CLS_ID] + s1 + [SEP_ID] + s2 + [SEP_ID]
    attention_length = len(ids)
    segment_ids = [0] * (len(s1) + 2) + [1] * (len(s2) + 1)
    pad = max_len - attention_length
    return PretrainInstance(
        ids=ids + [PAD_ID] * pad,
        segment_ids=segment_ids + [0] * pad,
        mlm_positions=[],
        mlm_labels=[],
        nsp_label=nsp_label,
        attention_length=attention_length,
    )


def build_sentence_pairs(
    documents: list[Document],
    vocab: Vocabulary,
    max_len: int,
    negative_prob: float,
    rng_seed: int,
) -> list[PretrainInstance]:
    """Build unmasked NSP instances from consecutive sentence pairs.

    Every sentence with a successor in its document yields one instance.
    Sentences that encode to zero tokens produce no instance.
    """
    if max_len < 8:
        raise ConfigError(f"max_len must be at least 8, got {max_len}")
    if not 0.0 <= negative_prob <= 1.0:
        raise ConfigError(f"negative_prob must lie in [0, 1], got {negative_prob}")
    if negative_prob > 0 and len(documents) < 2:
        raise DataError(
            "negative sampling draws from a different document: "
            "need at least 2 documents when negative_prob > 0"
        )

    cache: dict = {}
    encoded = [
        [encode(s, vocab, _cache=cache).ids for s in doc.sentences] for doc in documents
    ]
    doc_sizes = [len(sents) for sents in encoded]
    offsets = np.cumsum([0] + doc_sizes)
    flat = [ids for sents in encoded for ids in sents]
    total = len(flat)

    rng = np.random.default_rng(rng_seed)
    budget = max_len - 3
    instances = []
    for d, sents in enumerate(encoded):
        for i in range(len(sents) - 1):
            s1 = sents[i]
            if not s1:
                continue
            if rng.random() < negative_prob:
                label = NOT_NEXT
                # uniform over sentences of all other documents
                pool = total - doc_sizes[d]
                if pool == 0:
                    raise DataError(
                        "negative sampling found no sentence outside the current document"
                    )
                r = int(rng.integers(pool))
                if r >= offsets[d]:
                    r += doc_sizes[d]
                s2 = flat[r]
            else:
                label = IS_NEXT
                s2 = sents[i + 1]
            if not s2:
                continue
            n1, n2 = truncate_pair(len(s1), len(s2), budget)
            instances.append(_pack(s1[:n1], s2[:n2], label, max_len))
    return instances


def eligible_positions(instance: PretrainInstance) -> list[int]:
    """Real token positions: everything before attention_length except
    CLS and the two SEP separators. UNK tokens are eligible."""
    return [
        p
        for p in range(instance.attention_length)
        if instance.ids[p] not in (CLS_ID, SEP_ID)
    ]


def apply_mlm_masking(
    instance: PretrainInstance,
    policy: MaskingPolicy,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
) -> PretrainInstance:
    """Return a masked copy of an unmasked instance.

    Pass ``rng`` to share one generator across a stream of instances;
    otherwise a fresh generator is derived from ``policy.rng_seed``.
    """
    if instance.mlm_positions:
        raise ContractError("instance is already masked (mlm_positions non-empty)")
    if rng is None:
        rng = np.random.default_rng(policy.rng_seed)

    eligible = eligible_positions(instance)
    selected = [p for p in eligible if rng.random() < policy.select_prob]
    if not selected and policy.force_minimum and eligible:
        selected = [eligible[int(rng.integers(len(eligible)))]]

    new_ids = list(instance.ids)
    labels = []
    for p in selected:
        labels.append(instance.ids[p])
        u = rng.random()
        if u < policy.mask_frac:
            new_ids[p] = MASK_ID
        elif u < policy.mask_frac + policy.random_frac:
            new_ids[p] = int(rng.integers(_N_SPECIALS, len(vocab)))
        # else: keep the original id
    return replace(instance, ids=new_ids, mlm_positions=selected, mlm_labels=labels)


def build_pretrain_dataset(
    documents: list[Document],
    vocab: Vocabulary,
    max_len: int,
    negative_prob: float,
    policy: MaskingPolicy,
    rng_seed: int,
) -> list[PretrainInstance]:
    """Pair, pack, and mask in one deterministic pass (one masked copy
    per pair). Pairing and masking use independently derived streams."""
    pair_seed, mask_seed = np.random.SeedSequence(rng_seed).spawn(2)
    instances = build_sentence_pairs(
        documents, vocab, max_len, negative_prob, rng_seed=pair_seed
    )
    rng = np.random.default_rng(mask_seed)
    return [apply_mlm_masking(inst, policy, vocab, rng=rng) for inst in instances]


def validate_instance(
    instance: PretrainInstance, max_len: int, vocab_size: int | None = None
) -> None:
    """Raise a data error unless the instance satisfies all layout
    invariants: fixed length, CLS/SEP/PAD placement, segment ids, sorted
    in-range masking positions, and parallel labels."""
    n = instance.attention_length
    if len(instance.ids) != max_len or len(instance.segment_ids) != max_len:
        raise DataError("ids and segment_ids must both have length max_len")
    if not 4 <= n <= max_len:
        raise DataError(f"attention_length {n} out of range")
    if instance.ids[0] != CLS_ID:
        raise DataError("position 0 must be CLS")
    seps = [p for p in range(n) if instance.ids[p] == SEP_ID]
    if len(seps) != 2 or seps[1] != n - 1:
        raise DataError("instance must contain exactly two SEP, the last at attention_length-1")
    if any(instance.ids[p] == PAD_ID for p in range(n)):
        raise DataError("PAD inside the attended prefix")
    if any(instance.ids[p] != PAD_ID for p in range(n, max_len)):
        raise DataError("non-PAD beyond attention_length")
    want_segments = [0] * (seps[0] + 1) + [1] * (n - seps[0] - 1) + [0] * (max_len - n)
    if instance.segment_ids != want_segments:
        raise DataError("segment_ids do not match the packed layout")
    if instance.nsp_label not in NSP_LABELS:
        raise DataError(f"unknown nsp_label {instance.nsp_label!r}")
    pos = instance.mlm_positions
    if pos != sorted(set(pos)):
        raise DataError("mlm_positions must be strictly increasing")
    banned = {0, seps[0], seps[1]}
    if any(p in banned or not 0 <= p < n for p in pos):
        raise DataError("mlm_positions must avoid CLS/SEP/PAD positions")
    if len(instance.mlm_labels) != len(pos):
        raise DataError("mlm_labels must parallel mlm_positions")
    if vocab_size is not None:
        if any(not 0 <= i < vocab_size for i in instance.ids):
            raise DataError("token id out of vocabulary range")
        if any(not 0 <= i < vocab_size for i in instance.mlm_labels):
            raise DataError("mlm label out of vocabulary range")


def write_instances(instances: list[PretrainInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), separators=(",", ":")) + "\n")


def read_instances(path: str | Path) -> list[PretrainInstance]:
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                instances.append(PretrainInstance.from_dict(payload))
            except (json.JSONDecodeError, DataError) as exc:
                raise ParseError(
                    f"bad pre-training instance at line {lineno}: {exc}", line=lineno
                ) from exc
    return instances
