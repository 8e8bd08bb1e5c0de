"""Greek-aware text normalization and corpus segmentation.

Normalization runs a fixed pipeline: Unicode canonical decomposition,
removal of combining marks, language-aware lowercasing, then canonical
recomposition. Lowercasing happens after mark stripping so that accent
removal is alphabet-independent, and it relies on the context-sensitive
case mapping of ``str.lower`` to produce word-final sigma ('ς'), which is
kept distinct from 'σ'. Whitespace runs collapse to single spaces so that
normalized text round-trips through the whitespace pretokenizer.

Corpus files are UTF-8 with LF line endings, one sentence per line, and a
blank line between documents.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

from .errors import ConfigError, DataError, EmptyCorpusError

UNICODE_FORMS = ("composed", "decomposed")

_WHITESPACE_RUN = re.compile(r"\s+")

# Trivial sentence-splitter punctuation: period, Greek question mark, ano teleia.
_SENTENCE_BREAK = re.compile(r"(?<=[.;·])\s+")


@dataclass(frozen=True)
class NormalizationConfig:
    """Switches for the normalization pipeline.

    The default configuration strips diacritics and lowercases, which is the
    widest normalization an uncased Greek model wants.
    """

    strip_diacritics: bool = True
    lowercase: bool = True
    unicode_form: str = "composed"

    def __post_init__(self):
        if self.unicode_form not in UNICODE_FORMS:
            raise ConfigError(
                f"unicode_form must be one of {UNICODE_FORMS}, got {self.unicode_form!r}"
            )

    def to_dict(self) -> dict:
        return {
            "strip_diacritics": self.strip_diacritics,
            "lowercase": self.lowercase,
            "unicode_form": self.unicode_form,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationConfig":
        return cls(
            strip_diacritics=bool(data["strip_diacritics"]),
            lowercase=bool(data["lowercase"]),
            unicode_form=str(data["unicode_form"]),
        )


DEFAULT_CONFIG = NormalizationConfig()


@dataclass
class Document:
    """An ordered sequence of normalized sentences from one source document."""

    sentences: list[str]
    source_id: str = ""


def normalize(text: str, config: NormalizationConfig = DEFAULT_CONFIG) -> str:
    """Normalize ``text`` according to ``config``.

    Idempotent for every configuration: applying it twice equals applying
    it once.
    """
    out = unicodedata.normalize("NFD", text)
    if config.strip_diacritics:
        out = "".join(c for c in out if unicodedata.category(c) != "Mn")
    if config.lowercase:
        out = out.lower()
    out = _WHITESPACE_RUN.sub(" ", out).strip()
    if config.unicode_form == "composed":
        return unicodedata.normalize("NFC", out)
    return unicodedata.normalize("NFD", out)


def decode_utf8(raw: bytes) -> str:
    """Decode UTF-8 bytes, reporting the byte offset of any malformed input."""
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(
            f"malformed UTF-8 input at byte offset {exc.start}: {exc.reason}"
        ) from exc


def segment_corpus(
    raw: bytes | str,
    config: NormalizationConfig = DEFAULT_CONFIG,
    source_prefix: str = "doc",
) -> list[Document]:
    """Split a corpus into documents of normalized sentences.

    Blank lines separate documents; every non-blank line is one sentence.
    Lines that normalize to the empty string are dropped, as are documents
    left with no sentences.
    """
    text = decode_utf8(raw) if isinstance(raw, bytes) else raw
    documents: list[Document] = []
    sentences: list[str] = []

    def flush():
        if sentences:
            documents.append(Document(list(sentences), f"{source_prefix}{len(documents)}"))
            sentences.clear()

    for line in text.split("\n"):
        if line.strip() == "":
            flush()
            continue
        normalized = normalize(line, config)
        if normalized:
            sentences.append(normalized)
    flush()

    if not documents:
        raise EmptyCorpusError("corpus contains no non-empty documents")
    return documents


def serialize_corpus(documents: list[Document]) -> str:
    """Inverse of :func:`segment_corpus` up to normalization."""
    return "\n\n".join("\n".join(doc.sentences) for doc in documents) + "\n"


def split_sentences(text: str) -> list[str]:
    """Trivial splitter on '.', ';' and ano teleia for unsegmented input.

    Optional helper only; the corpus format expects pre-segmented lines.
    """
    parts = [p.strip() for p in _SENTENCE_BREAK.split(text)]
    return [p for p in parts if p]
