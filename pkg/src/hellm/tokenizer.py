"""BPE subword vocabulary: training, encoding, decoding, fragmentation.

Words are whitespace tokens of normalized text; the first symbol of each
word carries a word-initial marker fused onto the character (word "αβ"
becomes symbols "▁α", "β"). Training greedily merges the most frequent
adjacent symbol pair, breaking frequency ties by lexicographic order of
the (left, right) pair, until the vocabulary is full or no pair occurs at
least twice. Encoding replays the merge list in training order, so
training and encoding segment identically.

Pair counts are maintained incrementally (only words containing the merged
pair are re-counted); the test suite checks the merge sequence against a
from-scratch recount oracle.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataError, EmptyCorpusError
from .textnorm import DEFAULT_CONFIG, Document, NormalizationConfig, normalize

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
SPECIAL_IDS = frozenset(range(5))

DEFAULT_WORD_MARKER = "▁"  # ▁
FORMAT_VERSION = 1

# Sentinel for characters outside the base alphabet; never merges.
_GAP = None


@dataclass
class TokenSequence:
    """Parallel token ids, surface pieces, and word-start flags."""

    ids: list[int]
    pieces: list[str]
    word_starts: list[bool]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    """Ordered BPE vocabulary with merge table and special tokens.

    ``tokens`` maps token string to a dense id in [0, size); the five
    special tokens occupy ids 0..4. ``merges`` lists symbol pairs in
    training order; each merge's concatenation is itself a token.
    """

    tokens: dict[str, int]
    merges: list[tuple[str, str]]
    word_marker: str = DEFAULT_WORD_MARKER
    normalizer: NormalizationConfig = field(default_factory=NormalizationConfig)

    def __post_init__(self):
        ids = sorted(self.tokens.values())
        if ids != list(range(len(self.tokens))):
            raise DataError("vocabulary ids must be dense 0..size-1")
        for tok, want in zip(SPECIAL_TOKENS, range(5)):
            if self.tokens.get(tok) != want:
                raise DataError(f"special token {tok} must have id {want}")
        for left, right in self.merges:
            if left + right not in self.tokens:
                raise DataError(f"merge output {left + right!r} missing from tokens")
        self._id_to_token = [None] * len(self.tokens)
        for tok, i in self.tokens.items():
            self._id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.tokens)

    def token_for(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_token):
            raise DataError(f"token id {token_id} out of range for vocabulary of {len(self)}")
        return self._id_to_token[token_id]

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": FORMAT_VERSION,
            "normalizer": self.normalizer.to_dict(),
            "specials": {tok: i for i, tok in enumerate(SPECIAL_TOKENS)},
            "word_marker": self.word_marker,
            "merges": [list(pair) for pair in self.merges],
            "tokens": self.tokens,
        }
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=True, indent=1), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"vocabulary file {path} is not valid JSON: {exc}") from exc
        if payload.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"unsupported vocabulary format_version {payload.get('format_version')!r}"
            )
        return cls(
            tokens={str(k): int(v) for k, v in payload["tokens"].items()},
            merges=[(str(l), str(r)) for l, r in payload["merges"]],
            word_marker=str(payload["word_marker"]),
            normalizer=NormalizationConfig.from_dict(payload["normalizer"]),
        )


def _word_symbols(word: str, marker: str) -> list[str]:
    # Literal marker characters in the text are unencodable by construction;
    # map them out of the alphabet so decode stays unambiguous.
    chars = [c if c != marker else _GAP for c in word]
    if chars[0] is not _GAP:
        chars[0] = marker + chars[0]
    return chars


def _merge_word(symbols: list, left: str, right: str) -> list:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _count_pairs(symbols: list, count: int, into: Counter) -> None:
    for a, b in zip(symbols, symbols[1:]):
        if a is not _GAP and b is not _GAP:
            into[(a, b)] += count


def train_bpe(
    corpus: list[Document],
    vocab_size: int,
    min_char_freq: int = 1,
    word_marker: str = DEFAULT_WORD_MARKER,
    normalizer: NormalizationConfig = DEFAULT_CONFIG,
) -> Vocabulary:
    """Train a BPE vocabulary of exactly ``vocab_size`` tokens (or fewer if
    merging exhausts before the budget).

    Deterministic for a fixed corpus: pair-frequency ties break toward the
    lexicographically smaller (left, right) pair, and base symbols enter the
    vocabulary in sorted order after the specials.
    """
    word_counts: Counter = Counter()
    for doc in corpus:
        for sentence in doc.sentences:
            word_counts.update(normalize(sentence, normalizer).split())
    if not word_counts:
        raise EmptyCorpusError("cannot train a vocabulary on an empty corpus")

    symbol_freq: Counter = Counter()
    raw_words = []  # (symbols, count) before alphabet filtering
    for word, count in sorted(word_counts.items()):
        symbols = _word_symbols(word, word_marker)
        raw_words.append((symbols, count))
        for s in symbols:
            if s is not _GAP:
                symbol_freq[s] += count

    threshold = max(1, min_char_freq)
    alphabet = sorted(s for s, c in symbol_freq.items() if c >= threshold)
    minimum = len(SPECIAL_TOKENS) + len(alphabet) + 1
    if vocab_size < minimum:
        raise ConfigError(
            f"vocab_size {vocab_size} too small: minimum feasible size is {minimum} "
            f"({len(alphabet)} base symbols + {len(SPECIAL_TOKENS)} specials + 1 merge)"
        )

    alpha_set = set(alphabet)
    words = [
        ([s if s in alpha_set else _GAP for s in symbols], count)
        for symbols, count in raw_words
    ]

    tokens: dict[str, int] = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for s in alphabet:
        tokens[s] = len(tokens)

    # Incremental pair bookkeeping: global counts plus an index of which
    # words currently contain each pair.
    pair_counts: Counter = Counter()
    pair_words: dict[tuple, set[int]] = {}
    for wi, (symbols, count) in enumerate(words):
        local = Counter()
        _count_pairs(symbols, count, local)
        for pair, c in local.items():
            pair_counts[pair] += c
            pair_words.setdefault(pair, set()).add(wi)

    merges: list[tuple[str, str]] = []
    while len(tokens) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)

        for wi in sorted(pair_words.get(best, ())):
            symbols, count = words[wi]
            old = Counter()
            _count_pairs(symbols, count, old)
            merged = _merge_word(symbols, best[0], best[1])
            new = Counter()
            _count_pairs(merged, count, new)
            for pair, c in (old - new).items():
                pair_counts[pair] -= c
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                    pair_words.pop(pair, None)
                elif pair not in new:
                    pws = pair_words.get(pair)
                    if pws:
                        pws.discard(wi)
            for pair, c in (new - old).items():
                pair_counts[pair] += c
                pair_words.setdefault(pair, set()).add(wi)
            words[wi] = (merged, count)

        merges.append(best)
        tokens[best[0] + best[1]] = len(tokens)

    return Vocabulary(tokens=tokens, merges=merges, word_marker=word_marker, normalizer=normalizer)


def _encode_word(word: str, vocab: Vocabulary) -> list[str]:
    symbols = _word_symbols(word, vocab.word_marker)
    symbols = [s if (s is not _GAP and s in vocab.tokens) else _GAP for s in symbols]
    present = set(s for s in symbols if s is not _GAP)
    for left, right in vocab.merges:
        if left in present and right in present:
            merged = _merge_word(symbols, left, right)
            if len(merged) != len(symbols):
                symbols = merged
                present = set(s for s in symbols if s is not _GAP)
    # Collapse maximal runs of out-of-alphabet characters to single UNKs.
    pieces: list[str] = []
    for s in symbols:
        if s is _GAP:
            if not pieces or pieces[-1] != UNK:
                pieces.append(UNK)
        else:
            pieces.append(s)
    return pieces


def encode(text: str, vocab: Vocabulary, _cache: dict | None = None) -> TokenSequence:
    """Encode normalized text into subword pieces.

    Normalization is re-applied defensively under the vocabulary's own
    config. ``_cache`` may hold previously encoded words when looping over
    a corpus.
    """
    ids: list[int] = []
    pieces: list[str] = []
    starts: list[bool] = []
    marker = vocab.word_marker
    for word in normalize(text, vocab.normalizer).split():
        word_pieces = _cache.get(word) if _cache is not None else None
        if word_pieces is None:
            word_pieces = _encode_word(word, vocab)
            if _cache is not None:
                _cache[word] = word_pieces
        for p in word_pieces:
            ids.append(vocab.tokens[p])
            pieces.append(p)
            starts.append(p.startswith(marker))
    return TokenSequence(ids=ids, pieces=pieces, word_starts=starts)


def decode(tokens: TokenSequence, vocab: Vocabulary) -> str:
    """Reassemble text from pieces; inverse of encode when no UNK occurred.

    UNK decodes to its literal surface form. Any other special id is
    rejected.
    """
    out: list[str] = []
    marker = vocab.word_marker
    for pos, token_id in enumerate(tokens.ids):
        if not 0 <= token_id < len(vocab):
            raise DataError(f"invalid token id {token_id} at position {pos}: out of range")
        piece = vocab.token_for(token_id)
        if token_id in SPECIAL_IDS and token_id != UNK_ID:
            raise DataError(f"invalid token {piece} at position {pos}: special ids cannot be decoded")
        if piece.startswith(marker):
            out.append(" " + piece[len(marker):])
        else:
            out.append(piece)
    return "".join(out).lstrip(" ")


def fragmentation_ratio(corpus: list[Document], vocab: Vocabulary) -> float:
    """Average sub-word pieces per whitespace word over the corpus."""
    cache: dict = {}
    total_pieces = 0
    total_words = 0
    for doc in corpus:
        for sentence in doc.sentences:
            seq = encode(sentence, vocab, _cache=cache)
            total_pieces += len(seq.ids)
            total_words += len(normalize(sentence, vocab.normalizer).split())
    if total_words == 0:
        raise EmptyCorpusError("fragmentation ratio undefined on a corpus with no words")
    return total_pieces / total_words
