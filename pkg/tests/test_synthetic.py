"""Synthetic corpus generator: determinism, rarity guarantees, and the
planted distractor correlation measured by counting."""

import numpy as np
import pytest

from dtsg.data import split_rare_common, word_frequency_table
from dtsg.synthetic import (InfeasibleSpec, SyntheticSpec,
                            distractor_overlap_rate, generate_corpus,
                            generate_synthetic)

SMALL = SyntheticSpec(num_nouns=8, num_verbs=6, rare_pair_budget=4,
                      num_train=300, num_val=40, num_test=80,
                      clip_count=24, d_in=16, seed=42)


def pair_of(sample):
    return sample.query.tokens


class TestDeterminism:
    def test_same_spec_same_seed_identical(self):
        a_train, a_test = generate_synthetic(SMALL)
        b_train, b_test = generate_synthetic(SMALL)
        for a_split, b_split in ((a_train, b_train), (a_test, b_test)):
            assert len(a_split) == len(b_split)
            for sa, sb in zip(a_split, b_split):
                assert sa.sample_id == sb.sample_id
                assert sa.query == sb.query
                assert sa.clip_segment == sb.clip_segment
                np.testing.assert_array_equal(sa.video.features,
                                              sb.video.features)

    def test_different_seed_differs(self):
        other = SyntheticSpec(**{**SMALL.__dict__, "seed": 43})
        a, _ = generate_synthetic(SMALL)
        b, _ = generate_synthetic(other)
        assert any(not np.array_equal(x.video.features, y.video.features)
                   for x, y in zip(a, b))


class TestRarity:
    def test_rare_pairs_below_threshold(self):
        corpus = generate_corpus(SMALL)
        counts: dict[tuple, int] = {}
        for s in corpus.train:
            counts[pair_of(s)] = counts.get(pair_of(s), 0) + 1
        assert corpus.rare_pairs
        for pair in corpus.rare_pairs:
            assert 0 < counts.get(tuple(pair), 0) < SMALL.rare_threshold

    def test_rare_split_is_nonempty_on_test(self):
        corpus = generate_corpus(SMALL)
        table = word_frequency_table(corpus.train)
        rare, common = split_rare_common(corpus.test, table,
                                         SMALL.rare_threshold)
        assert len(rare) > 0 and len(common) > 0
        assert len(rare) + len(common) == len(corpus.test)

    def test_rare_samples_use_rare_pairs(self):
        corpus = generate_corpus(SMALL)
        table = word_frequency_table(corpus.train)
        rare, _ = split_rare_common(corpus.test, table, SMALL.rare_threshold)
        rare_set = {tuple(p) for p in corpus.rare_pairs}
        for s in rare:
            assert pair_of(s) in rare_set


class TestCorrelation:
    def test_train_correlation_by_counting(self):
        corpus = generate_corpus(SMALL)
        rate = distractor_overlap_rate(corpus.train, SMALL.salience_boost)
        assert abs(rate - SMALL.train_correlation) <= 0.05

    def test_test_correlation_by_counting(self):
        corpus = generate_corpus(SMALL)
        rate = distractor_overlap_rate(corpus.test, SMALL.salience_boost)
        assert abs(rate - SMALL.test_correlation) <= 0.05


class TestValidation:
    def test_infeasible_budget_errors(self):
        bad = SyntheticSpec(num_nouns=3, num_verbs=3, rare_pair_budget=6,
                            num_train=100)
        with pytest.raises(InfeasibleSpec):
            generate_synthetic(bad)

    def test_equal_correlations_rejected(self):
        bad = SyntheticSpec(train_correlation=0.5, test_correlation=0.5)
        with pytest.raises(ValueError):
            generate_synthetic(bad)

    def test_ground_truth_within_bounds(self):
        corpus = generate_corpus(SMALL)
        for split in (corpus.train, corpus.val, corpus.test):
            for s in split:
                lo, hi = s.clip_segment
                assert 0 <= lo <= hi <= SMALL.clip_count - 1

    def test_segment_round_trips_through_seconds(self):
        corpus = generate_corpus(SMALL)
        for s in list(corpus.train)[:20]:
            start, end = s.query.segment_seconds
            assert s.clip_segment == (int(start), int(end) - 1)
