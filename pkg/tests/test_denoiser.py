"""Tests for pseudo-perplexity scoring and best-fraction selection:
stub-model oracles, batching/order invariance, sort-oracle selection,
and the overfit-then-corrupt ranking experiment."""

import math

import numpy as np
import pytest

import taskgen
from hellm import bert, denoiser
from hellm.autodiff import Tensor
from hellm.bert import BertConfig, init_weights
from hellm.denoiser import (
    ScoredPair,
    pseudo_perplexity,
    score_pairs,
    select_top_fraction,
)
from hellm.errors import ConfigError, ContractError, DataError
from hellm.finetune import NliPair, encode_pair
from hellm.pretrain_data import MaskingPolicy, build_pretrain_dataset
from hellm.textnorm import Document
from hellm.trainer import PretrainRunConfig, pretrain


@pytest.fixture(scope="module")
def scoring_setup():
    vocab = taskgen.suffix_vocab(4)
    config = BertConfig(
        layers=1, hidden=16, heads=2, intermediate=32, max_positions=16,
        vocab_size=len(vocab.tokens), dropout=0.0,
    )
    weights = init_weights(config, seed=9)
    return vocab, config, weights


def make_scored(ppl, i, token_count=1):
    return ScoredPair(
        pair=NliPair(f"p{i}", f"h{i}", "neutral"),
        token_count=token_count,
        ppl=ppl,
    )


# ---------------------------------------------------------------------------
# Scoring oracles


class TestScoring:
    def test_probability_one_model_scores_ppl_one(
        self, scoring_setup, monkeypatch
    ):
        """A model putting all mass on the true token has cross-entropy
        zero at every position, so ppl is exactly 1."""
        vocab, config, weights = scoring_setup
        pair = NliPair("βαος γαος", "δαια", "neutral")
        ids, _, _ = encode_pair(pair, vocab, config.max_positions)

        def sure_logits(hidden, positions, w):
            rows = np.zeros(
                (len(positions), config.vocab_size), dtype=np.float32
            )
            for k, p in enumerate(positions):
                rows[k, ids[p]] = 1000.0
            return Tensor(rows)

        monkeypatch.setattr(bert, "mlm_logits", sure_logits)
        for batched in (False, True):
            scored = pseudo_perplexity(
                pair, vocab, weights, config, batched=batched
            )
            assert scored.ppl == 1.0

    def test_uniform_model_scores_ppl_vocab_size(
        self, scoring_setup, monkeypatch
    ):
        vocab, config, weights = scoring_setup

        def flat_logits(hidden, positions, w):
            return Tensor(
                np.zeros((len(positions), config.vocab_size), dtype=np.float32)
            )

        monkeypatch.setattr(bert, "mlm_logits", flat_logits)
        scored = pseudo_perplexity(
            NliPair("βαος γαος", "δαια", "neutral"), vocab, weights, config
        )
        assert math.isclose(scored.ppl, config.vocab_size, rel_tol=1e-6)

    def test_token_count_is_the_non_special_positions(self, scoring_setup):
        vocab, config, weights = scoring_setup
        pair = NliPair("βαος γαος", "δαια", "neutral")
        ids, _, length = encode_pair(pair, vocab, config.max_positions)
        scored = pseudo_perplexity(pair, vocab, weights, config)
        assert scored.token_count == length - 3  # CLS and two SEPs

    def test_scoring_twice_is_identical(self, scoring_setup):
        vocab, config, weights = scoring_setup
        pair = NliPair("βαος γαος", "δαια", "neutral")
        a = pseudo_perplexity(pair, vocab, weights, config)
        b = pseudo_perplexity(pair, vocab, weights, config)
        assert a.ppl == b.ppl
        assert a.token_count == b.token_count

    def test_batched_matches_sequential(self, scoring_setup):
        vocab, config, weights = scoring_setup
        pairs = taskgen.make_nli_pairs(6, 3, 4, np.random.default_rng(2))
        for pair in pairs:
            seq = pseudo_perplexity(pair, vocab, weights, config, batched=False)
            bat = pseudo_perplexity(pair, vocab, weights, config, batched=True)
            assert math.isclose(seq.ppl, bat.ppl, rel_tol=1e-5, abs_tol=1e-5)

    def test_position_evaluation_order_does_not_matter(self, scoring_setup):
        vocab, config, weights = scoring_setup
        pair = NliPair("βαος γαος δαος", "δαια εαια", "neutral")
        ids, segment_ids, length = encode_pair(pair, vocab, config.max_positions)
        positions = denoiser._scoreable_positions(ids, length)
        shuffled = [positions[i] for i in np.random.default_rng(4).permutation(len(positions))]

        def mean_ce(order):
            rows = denoiser._masked_ce_rows(
                ids, segment_ids, length, order, weights, config
            )
            ces = []
            for row, p in zip(rows, order):
                import hellm.autodiff as ad

                ces.append(
                    float(ad.cross_entropy(row, np.array([ids[p]])).data)
                )
            return float(np.mean(ces))

        assert abs(mean_ce(positions) - mean_ce(shuffled)) < 1e-5

    def test_empty_segment_pair_rejected(self, scoring_setup):
        vocab, config, weights = scoring_setup
        with pytest.raises(DataError):
            pseudo_perplexity(
                NliPair("", "δαια", "neutral"), vocab, weights, config
            )

    def test_score_pairs_preserves_order(self, scoring_setup):
        vocab, config, weights = scoring_setup
        pairs = taskgen.make_nli_pairs(4, 3, 4, np.random.default_rng(3))
        scored = score_pairs(pairs, vocab, weights, config)
        assert [s.pair for s in scored] == pairs


class TestScoredPairValidation:
    def test_ppl_below_one_rejected(self):
        with pytest.raises(ContractError):
            make_scored(0.99, 0)

    def test_zero_token_count_rejected(self):
        with pytest.raises(ContractError):
            make_scored(2.0, 0, token_count=0)


# ---------------------------------------------------------------------------
# Selection


class TestSelection:
    def test_fraction_bounds(self):
        scored = [make_scored(2.0, 0)]
        for bad in (0.0, -0.5, 1.0001):
            with pytest.raises(ConfigError):
                select_top_fraction(scored, bad)

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            select_top_fraction([], 0.5)

    def test_fraction_one_is_identity_sorted(self):
        scored = [make_scored(p, i) for i, p in enumerate([3.0, 1.5, 2.2])]
        retained, report = select_top_fraction(scored, 1.0)
        assert retained == [scored[1], scored[2], scored[0]]
        assert report.retained == 3
        assert report.cutoff_ppl == 3.0

    def test_ten_distinct_scores_fraction_03_keeps_three_lowest(self):
        rng = np.random.default_rng(8)
        ppls = list(1.0 + rng.permutation(10).astype(float))
        scored = [make_scored(p, i) for i, p in enumerate(ppls)]
        retained, report = select_top_fraction(scored, 0.3)
        expected = sorted(ppls)[:3]
        assert [s.ppl for s in retained] == expected
        assert report.total == 10 and report.retained == 3

    def test_ties_keep_input_order(self):
        scored = [
            make_scored(p, i) for i, p in enumerate([2.0, 1.5, 2.0, 1.5])
        ]
        retained, _ = select_top_fraction(scored, 0.5)
        assert retained == [scored[1], scored[3]]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n = int(rng.integers(1, 50))
            # One-decimal scores force plenty of ties.
            ppls = np.round(1.0 + rng.uniform(0.0, 3.0, size=n), 1)
            scored = [make_scored(float(p), i) for i, p in enumerate(ppls)]
            fraction = float(rng.uniform(0.05, 1.0))
            retained, _ = select_top_fraction(scored, fraction)
            keep = math.ceil(fraction * n)
            oracle = np.argsort(ppls, kind="stable")[:keep]
            assert retained == [scored[i] for i in oracle]

    def test_retained_sets_nest_as_fraction_grows(self):
        rng = np.random.default_rng(6)
        ppls = np.round(1.0 + rng.uniform(0.0, 2.0, size=40), 1)
        scored = [make_scored(float(p), i) for i, p in enumerate(ppls)]
        previous = []
        for fraction in (0.1, 0.25, 0.5, 0.75, 1.0):
            retained, _ = select_top_fraction(scored, fraction)
            assert retained[: len(previous)] == previous
            previous = retained

    def test_report_summarizes_scores(self):
        scored = [make_scored(p, i) for i, p in enumerate([4.0, 1.0, 2.0])]
        retained, report = select_top_fraction(scored, 0.6)
        assert report.min_ppl == 1.0
        assert report.max_ppl == 4.0
        assert math.isclose(report.mean_ppl, 7.0 / 3.0)
        assert report.cutoff_ppl == retained[-1].ppl == 2.0


# ---------------------------------------------------------------------------
# Corruption ranking experiment


def shuffle_words(text, rng):
    """A reordering guaranteed to differ from the input."""
    words = text.split()
    for _ in range(100):
        perm = rng.permutation(len(words))
        out = [words[i] for i in perm]
        if out != words:
            return " ".join(out)
    raise ValueError("cannot shuffle a constant sentence")


class TestCorruptionExperiment:
    def test_overfit_model_ranks_clean_below_shuffled(self):
        """After memorizing 16 pairs, masked-token prediction is far
        better at the memorized positions, so shuffled corruptions get
        higher pseudo-perplexity for at least 90% of pairs."""
        rng = np.random.default_rng(31)
        vocab = taskgen.suffix_vocab(8)
        pairs = taskgen.make_nli_pairs(16, 4, 8, rng)
        docs = [
            Document(sentences=[p.premise, p.hypothesis], source_id=f"p{i}")
            for i, p in enumerate(pairs)
        ]
        config = BertConfig(
            layers=2, hidden=32, heads=2, intermediate=64, max_positions=24,
            vocab_size=len(vocab.tokens), dropout=0.0,
        )
        # Fresh mask draws per replica so training covers most positions.
        instances = []
        for epoch in range(12):
            instances.extend(
                build_pretrain_dataset(
                    docs, vocab, max_len=24, negative_prob=0.5,
                    policy=MaskingPolicy(rng_seed=epoch), rng_seed=epoch,
                )
            )
        run = PretrainRunConfig(steps=1200, batch_size=8, lr=1e-3, seed=0)
        weights, _ = pretrain(instances, config, run)

        shuffle_rng = np.random.default_rng(77)
        wins = 0
        for pair in pairs:
            clean = pseudo_perplexity(pair, vocab, weights, config)
            corrupted = pseudo_perplexity(
                NliPair(
                    shuffle_words(pair.premise, shuffle_rng),
                    shuffle_words(pair.hypothesis, shuffle_rng),
                    pair.label,
                ),
                vocab, weights, config,
            )
            wins += clean.ppl < corrupted.ppl
        assert wins / len(pairs) >= 0.90, f"{wins}/{len(pairs)}"
