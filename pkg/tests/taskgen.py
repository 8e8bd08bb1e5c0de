"""Synthetic task generators shared across fine-tuning, baseline, and
acceptance tests.

Suffix tagging: every word is stem + suffix, and the tag is determined
by the suffix ("ος" vs "ια"). Sentences for pre-training can be drawn
suffix-coherently (all words in a sentence share one suffix class) so
masked-LM training induces class-clustered embeddings; tagging data
mixes classes freely.

Rule-based NLI: hypothesis = premise copy → entailment; hypothesis =
shuffled premise (derangement) → neutral; hypothesis = negation marker
+ premise → contradiction.
"""

import numpy as np

from hellm.finetune import NliPair, TaggedSentence
from hellm.textnorm import Document
from hellm.tokenizer import train_bpe

ONSETS = list("βγδζθκλμνπρστφχ")
NUCLEI = list("αεηιουω")
SUFFIXES = ("ος", "ια")
SUFFIX_TAGS = {"ος": "TAG-OS", "ια": "TAG-IA"}
NEGATION = "οχι"


def stems(n_stems):
    combos = [o + n for o in ONSETS for n in NUCLEI]
    if n_stems > len(combos):
        raise ValueError(f"at most {len(combos)} stems available")
    return combos[:n_stems]


def word_inventory(n_stems):
    """All word types, grouped by suffix class."""
    return {suffix: [s + suffix for s in stems(n_stems)] for suffix in SUFFIXES}


def tag_of(word):
    return SUFFIX_TAGS[word[-2:]]


def make_suffix_corpus(
    n_docs, sents_per_doc, words_per_sent, n_stems, rng, coherent=True
):
    """Documents of suffix-class-coherent (or mixed) sentences."""
    inventory = word_inventory(n_stems)
    all_words = inventory[SUFFIXES[0]] + inventory[SUFFIXES[1]]
    docs = []
    for d in range(n_docs):
        sentences = []
        for _ in range(sents_per_doc):
            if coherent:
                pool = inventory[SUFFIXES[rng.integers(0, len(SUFFIXES))]]
            else:
                pool = all_words
            picks = rng.choice(len(pool), size=words_per_sent, replace=True)
            sentences.append(" ".join(pool[i] for i in picks))
        docs.append(Document(sentences=sentences, source_id=f"doc{d}"))
    return docs


def make_tagged_sentences(n, words_per_sent, n_stems, rng):
    """Mixed-class sentences labeled word-by-word from the suffix."""
    inventory = word_inventory(n_stems)
    all_words = inventory[SUFFIXES[0]] + inventory[SUFFIXES[1]]
    sentences = []
    for _ in range(n):
        picks = rng.choice(len(all_words), size=words_per_sent, replace=True)
        words = [all_words[i] for i in picks]
        sentences.append(TaggedSentence(words, [tag_of(w) for w in words]))
    return sentences


def suffix_vocab(n_stems, vocab_size=160):
    """BPE vocabulary covering the whole inventory plus the negation
    marker; sized so frequent words merge into single pieces."""
    inventory = word_inventory(n_stems)
    all_words = inventory[SUFFIXES[0]] + inventory[SUFFIXES[1]] + [NEGATION]
    # Repeat every word so each merge clears the frequency-2 floor.
    sentences = [" ".join(all_words)] * 3
    return train_bpe([Document(sentences=sentences, source_id="inv")], vocab_size)


def _derange(words, rng):
    """Reorder so that the sequence differs from the original."""
    words = list(words)
    for _ in range(100):
        perm = rng.permutation(len(words))
        shuffled = [words[i] for i in perm]
        if shuffled != words:
            return shuffled
    raise ValueError("cannot derange a constant sentence")


def make_nli_pairs(n, words_per_premise, n_stems, rng):
    """Balanced rule-based pairs cycling entailment/neutral/contradiction."""
    if words_per_premise < 2:
        raise ValueError("premises need >= 2 words to shuffle")
    inventory = word_inventory(n_stems)
    all_words = inventory[SUFFIXES[0]] + inventory[SUFFIXES[1]]
    pairs = []
    for k in range(n):
        # Sample without replacement so a derangement always differs.
        picks = rng.choice(len(all_words), size=words_per_premise, replace=False)
        words = [all_words[i] for i in picks]
        premise = " ".join(words)
        kind = k % 3
        if kind == 0:
            pairs.append(NliPair(premise, premise, "entailment"))
        elif kind == 1:
            pairs.append(
                NliPair(premise, " ".join(_derange(words, rng)), "neutral")
            )
        else:
            pairs.append(
                NliPair(premise, NEGATION + " " + premise, "contradiction")
            )
    return pairs
