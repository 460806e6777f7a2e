"""Negative mining against a brute-force oracle, draw uniformity, and the
sample-contrastive loss closed forms."""

import math
from collections import Counter

import numpy as np

from dtsg.autodiff import Tensor
from dtsg.config import ModelConfig
from dtsg.data import Dataset, QueryAnnotation
from dtsg.sampling import (MatchScorer, NegativeTable, extract_pos_sets,
                           is_contrastive, mine_negatives, sample_loss,
                           sample_negatives)
from helpers import toy_grounding_sample

RNG = np.random.default_rng(41)


def query(tokens, tags):
    return QueryAnnotation(tuple(tokens), tuple(tags), (0.0, 2.0))


def sample(sid, tokens, tags, video_id=None):
    return toy_grounding_sample(sid, tokens, tags, video_id=video_id)


class TestExtractPosSets:
    def test_basic_filter(self):
        q = query(["person", "holding", "vacuum"], ["NOUN", "VERB", "NOUN"])
        nouns, verbs = extract_pos_sets(q)
        assert nouns == ("person", "vacuum")
        assert verbs == ("holding",)

    def test_other_only_query(self):
        q = query(["the", "and"], ["OTHER", "OTHER"])
        assert extract_pos_sets(q) == ((), ())

    def test_matches_dictionary_filter_oracle(self):
        for k in range(20):
            n = int(RNG.integers(1, 6))
            tokens = [f"w{i}" for i in range(n)]
            tags = [("NOUN", "VERB", "OTHER")[int(RNG.integers(0, 3))]
                    for _ in range(n)]
            q = query(tokens, tags)
            nouns, verbs = extract_pos_sets(q)
            assert list(nouns) == [t for t, g in zip(tokens, tags)
                                   if g == "NOUN"]
            assert list(verbs) == [t for t, g in zip(tokens, tags)
                                   if g == "VERB"]


class TestMiningRules:
    def test_verb_substitution_pair(self):
        a = query(["person", "holding", "vacuum"], ["NOUN", "VERB", "NOUN"])
        b = query(["person", "fixing", "vacuum"], ["NOUN", "VERB", "NOUN"])
        assert is_contrastive(a, b)

    def test_noun_substitution_pair(self):
        a = query(["person", "holding", "vacuum"], ["NOUN", "VERB", "NOUN"])
        b = query(["person", "holding", "book"], ["NOUN", "VERB", "NOUN"])
        assert is_contrastive(a, b)

    def test_double_difference_rejected(self):
        a = query(["person", "holding", "vacuum"], ["NOUN", "VERB", "NOUN"])
        b = query(["dog", "fixing", "vacuum"], ["NOUN", "VERB", "NOUN"])
        assert not is_contrastive(a, b)

    def test_identical_rejected(self):
        a = query(["person", "holding"], ["NOUN", "VERB"])
        assert not is_contrastive(a, a)

    def test_multiset_not_set_semantics(self):
        a = query(["dog", "dog", "running"], ["NOUN", "NOUN", "VERB"])
        b = query(["dog", "cat", "running"], ["NOUN", "NOUN", "VERB"])
        assert is_contrastive(a, b)  # one of the two dogs swapped for cat


def brute_force_table(dataset):
    """Independent double loop using its own multiset-difference logic."""
    entries = {s.sample_id: [] for s in dataset}
    sams = list(dataset)
    for a in sams:
        for b in sams:
            if a.sample_id == b.sample_id or a.video.id == b.video.id:
                continue
            an = sorted(t for t, g in zip(a.query.tokens, a.query.pos_tags)
                        if g == "NOUN")
            bn = sorted(t for t, g in zip(b.query.tokens, b.query.pos_tags)
                        if g == "NOUN")
            av = sorted(t for t, g in zip(a.query.tokens, a.query.pos_tags)
                        if g == "VERB")
            bv = sorted(t for t, g in zip(b.query.tokens, b.query.pos_tags)
                        if g == "VERB")

            def one_sub(x, y):
                if len(x) != len(y):
                    return False
                cx, cy = Counter(x), Counter(y)
                removed = sum((cx - cy).values())
                added = sum((cy - cx).values())
                return removed == 1 and added == 1

            if (one_sub(an, bn) and av == bv) or (one_sub(av, bv) and an == bn):
                entries[a.sample_id].append(b.sample_id)
    return {k: sorted(v) for k, v in entries.items()}


class TestMineNegatives:
    def make_corpus(self, n=30):
        nouns = ["person", "dog", "vacuum", "book", "cup"]
        verbs = ["holding", "fixing", "reading", "washing"]
        samples = []
        rng = np.random.default_rng(7)
        for k in range(n):
            tokens = [nouns[int(rng.integers(0, 5))],
                      verbs[int(rng.integers(0, 4))]]
            if rng.random() < 0.3:
                tokens.append(nouns[int(rng.integers(0, 5))])
                tags = ["NOUN", "VERB", "NOUN"]
            else:
                tags = ["NOUN", "VERB"]
            samples.append(sample(f"s{k:02d}", tokens, tags))
        return Dataset(samples, 8)

    def test_matches_double_loop_oracle(self):
        ds = self.make_corpus(30)
        table = mine_negatives(ds)
        expected = brute_force_table(ds)
        for s in ds:
            assert sorted(table.neg_videos(s.sample_id)) == \
                expected[s.sample_id]
            assert sorted(table.neg_queries(s.sample_id)) == \
                expected[s.sample_id]

    def test_recovers_fig3_style_pairs(self):
        ds = Dataset([
            sample("q1", ["person", "holding", "vacuum"],
                   ["NOUN", "VERB", "NOUN"]),
            sample("q2", ["person", "fixing", "vacuum"],
                   ["NOUN", "VERB", "NOUN"]),
            sample("q3", ["person", "holding", "book"],
                   ["NOUN", "VERB", "NOUN"]),
        ], 8)
        table = mine_negatives(ds)
        assert set(table.neg_videos("q1")) == {"q2", "q3"}
        assert "q1" in table.neg_videos("q2")
        assert "q1" in table.neg_videos("q3")
        # q2 vs q3 differ in both a verb and a noun: not contrastive
        assert "q3" not in table.neg_videos("q2")

    def test_symmetry(self):
        ds = self.make_corpus(25)
        table = mine_negatives(ds)
        for s in ds:
            for other in table.neg_videos(s.sample_id):
                assert s.sample_id in table.neg_videos(other)

    def test_no_sample_is_its_own_negative(self):
        ds = self.make_corpus(25)
        table = mine_negatives(ds)
        for s in ds:
            assert s.sample_id not in table.neg_videos(s.sample_id)

    def test_same_video_pairs_excluded(self):
        ds = Dataset([
            sample("a#0", ["person", "holding"], ["NOUN", "VERB"],
                   video_id="v1"),
            sample("a#1", ["person", "fixing"], ["NOUN", "VERB"],
                   video_id="v1"),
            sample("b#0", ["person", "washing"], ["NOUN", "VERB"],
                   video_id="v2"),
        ], 8)
        table = mine_negatives(ds)
        assert table.neg_videos("a#0") == ["b#0"]

    def test_iteration_order_independent(self):
        ds = self.make_corpus(20)
        shuffled = Dataset(list(reversed(ds.samples)), ds.clip_count)
        t1 = mine_negatives(ds)
        t2 = mine_negatives(shuffled)
        assert t1.entries == t2.entries

    def test_round_trip_json(self, tmp_path):
        ds = self.make_corpus(12)
        table = mine_negatives(ds)
        table.save(tmp_path / "neg.json")
        back = NegativeTable.load(tmp_path / "neg.json")
        assert back.entries == table.entries


class TestSampleNegatives:
    def test_singleton_deterministic(self):
        ds = Dataset([
            sample("a", ["person", "holding"], ["NOUN", "VERB"]),
            sample("b", ["person", "fixing"], ["NOUN", "VERB"]),
        ], 8)
        table = mine_negatives(ds)
        video, q = sample_negatives(table, "a", np.random.default_rng(0), ds)
        assert video.id == "b" and q.tokens == ("person", "fixing")

    def test_empty_lists_give_none(self):
        ds = Dataset([sample("a", ["person", "holding"], ["NOUN", "VERB"])], 8)
        table = mine_negatives(ds)
        video, q = sample_negatives(table, "a", np.random.default_rng(0), ds)
        assert video is None and q is None

    def test_draws_uniform_within_3_sigma(self):
        providers = [sample(f"p{k}", ["person", v], ["NOUN", "VERB"])
                     for k, v in enumerate(["holding", "fixing", "washing",
                                            "reading"])]
        anchor = sample("anchor", ["person", "jumping"], ["NOUN", "VERB"])
        ds = Dataset([anchor] + providers, 8)
        table = mine_negatives(ds)
        assert len(table.neg_videos("anchor")) == 4
        rng = np.random.default_rng(5)
        counts = Counter()
        n = 10_000
        for _ in range(n):
            video, _ = sample_negatives(table, "anchor", rng, ds)
            counts[video.id] += 1
        expected = n / 4
        sigma = math.sqrt(n * 0.25 * 0.75)
        for vid in ("p0", "p1", "p2", "p3"):
            assert abs(counts[vid] - expected) < 3 * sigma


class TestSampleLoss:
    def test_uniform_three_way_is_ln3(self):
        g = Tensor(np.array([1.7, -0.3]))
        present = np.ones(2, bool)
        loss = sample_loss(g, [(g, present), (g, present)])
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_saturated_positive_goes_to_zero(self):
        pos = Tensor(np.array([50.0]))
        neg = Tensor(np.array([-50.0]))
        present = np.ones(1, bool)
        loss = sample_loss(pos, [(neg, present), (neg, present)])
        assert loss.item() < 1e-12

    def test_single_present_negative_equal_scores_is_ln2(self):
        g = Tensor(np.array([0.4]))
        loss = sample_loss(g, [(g, np.array([True])),
                               (g, np.array([False]))])
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_both_missing_is_exactly_zero(self):
        g = Tensor(np.array([0.9, -2.0]))
        absent = np.zeros(2, bool)
        loss = sample_loss(g, [(g, absent), (g, absent)])
        assert loss.item() == 0.0

    def test_decreasing_negative_score_decreases_loss(self):
        pos = Tensor(np.array([0.5]))
        present = np.ones(1, bool)
        base = sample_loss(pos, [(Tensor(np.array([0.2])), present),
                                 (Tensor(np.array([0.1])), present)]).item()
        lower = sample_loss(pos, [(Tensor(np.array([-0.2])), present),
                                  (Tensor(np.array([0.1])), present)]).item()
        assert lower < base

    def test_scorer_shapes_and_max_pooling(self):
        cfg = ModelConfig(dim=6, scorer_hidden=4, vocab_size=4, d_in=4,
                          clip_count=3, query_len=2, heads=1, ffn_dim=8)
        scorer = MatchScorer(np.random.default_rng(0), cfg.resolved())
        feats = Tensor(RNG.normal(size=(2, 5, 6)))
        out = scorer(feats)
        assert out.shape == (2,)
        logits = scorer.mlp(feats)
        per_clip = logits.data.reshape(2, 5)
        np.testing.assert_allclose(out.data, per_clip.max(axis=1), atol=1e-12)
